"""File-output figure rendering for the CLI report paths (Agg backend).

Every figure is rendered next to the delimited file carrying the same data;
the CSV stays the canonical machine-readable output.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def render_metrics(log, path) -> None:
    """Objective trace (and information term) against training step."""
    steps = log.column("step")
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(steps, log.column("objective"), lw=0.9)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("bound per example")
    axes[1].plot(steps, log.column("kl_term"), lw=0.9, label="information")
    axes[1].plot(steps, log.column("loglik_term"), lw=0.9, label="log lik")
    axes[1].set_xlabel("step")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_scatter(mu: np.ndarray, sigma2: np.ndarray, labels: np.ndarray,
                   path) -> None:
    """Latent means colored by label plus variance-vs-mean panels."""
    fig, axes = plt.subplots(2, 3, figsize=(11, 6.5))
    ax = axes[0][0]
    sc = ax.scatter(mu[:, 0], mu[:, 1], c=labels, s=4, cmap="tab10",
                    alpha=0.7)
    ax.set_xlabel("mu_1")
    ax.set_ylabel("mu_2")
    ax.set_title("posterior means")
    fig.colorbar(sc, ax=ax, fraction=0.046)
    pairs = [((0, 0), axes[0][1]), ((1, 1), axes[0][2]),
             ((0, 1), axes[1][1]), ((1, 0), axes[1][2])]
    for (mi, vi), ax in pairs:
        ax.scatter(mu[:, mi], sigma2[:, vi], s=3, alpha=0.5)
        ax.set_xlabel(f"mu_{mi + 1}")
        ax.set_ylabel(f"sigma2_{vi + 1}")
    axes[1][0].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_sweep(axis_name: str, values, bounds, path, extra=None,
                 extra_label: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(values, bounds, "o-", lw=1.0)
    ax.set_xlabel(axis_name)
    ax.set_ylabel("final bound per example")
    if max(values) / max(min(values), 1e-12) > 20:
        ax.set_xscale("log")
    if extra is not None:
        twin = ax.twinx()
        twin.plot(values, extra, "s--", color="tab:red", lw=1.0)
        twin.set_ylabel(extra_label, color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
