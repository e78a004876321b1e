"""Dataset ingestion and synthetic generators with analytic ground truth.

IDX files (the MNIST container) are parsed exactly: big-endian magic,
dimension sizes, raw payload.  Pixels are normalized to [0, 1] before the
scale factor ``lam`` is applied, so the Bernoulli likelihood gets valid
inputs at lam=1; scaled runs should use Gaussian likelihoods.  No network
access anywhere: file paths are always user-supplied.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised on malformed IDX input; carries the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    """Immutable-by-convention data matrix plus provenance."""

    xs: np.ndarray  # (N, m)
    labels: np.ndarray | None = None
    scale_lambda: float = 1.0
    meta: str = ""
    truth: object = None  # generator ground truth, when synthetic

    def __post_init__(self):
        self.xs = np.array(self.xs, dtype=np.float64, order="C", copy=True)
        if self.xs.ndim != 2 or self.xs.shape[0] < 1:
            raise ValueError("dataset needs at least one row")
        if not np.all(np.isfinite(self.xs)):
            raise ValueError("dataset contains non-finite values")
        if self.scale_lambda <= 0:
            raise ValueError("scale factor must be positive")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.xs.shape[0],):
                raise ValueError("labels length must match data rows")
        # shareable across workers: freeze after construction
        self.xs.flags.writeable = False

    @property
    def n_examples(self) -> int:
        return self.xs.shape[0]

    @property
    def data_dim(self) -> int:
        return self.xs.shape[1]

    def scaled(self, lam: float) -> "Dataset":
        """Same data with every vector multiplied by lam."""
        if lam <= 0:
            raise ValueError("scale factor must be positive")
        return Dataset(xs=self.xs * lam, labels=self.labels,
                       scale_lambda=self.scale_lambda * lam,
                       meta=self.meta, truth=self.truth)

    def subset(self, limit: int) -> "Dataset":
        limit = min(limit, self.n_examples)
        labels = None if self.labels is None else self.labels[:limit]
        return Dataset(xs=self.xs[:limit], labels=labels,
                       scale_lambda=self.scale_lambda, meta=self.meta,
                       truth=self.truth)


# ---------------------------------------------------------------------------
# IDX container


def _read_be_u32(buf: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(buf):
        raise IdxFormatError(f"truncated file while reading {what}", offset)
    return struct.unpack_from(">I", buf, offset)[0]


def _parse_idx_images(raw: bytes, path: str) -> np.ndarray:
    magic = _read_be_u32(raw, 0, "image magic")
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"bad image magic 0x{magic:08x} in {path}, expected 0x{IDX_IMAGE_MAGIC:08x}",
            0)
    count = _read_be_u32(raw, 4, "image count")
    rows = _read_be_u32(raw, 8, "row count")
    cols = _read_be_u32(raw, 12, "column count")
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise IdxFormatError(
            f"image payload ends early, expected {need} bytes", len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols,
                           offset=16)
    return pixels.reshape(count, rows * cols)


def _parse_idx_labels(raw: bytes, path: str) -> np.ndarray:
    magic = _read_be_u32(raw, 0, "label magic")
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"bad label magic 0x{magic:08x} in {path}, expected 0x{IDX_LABEL_MAGIC:08x}",
            0)
    count = _read_be_u32(raw, 4, "label count")
    if len(raw) < 8 + count:
        raise IdxFormatError(
            f"label payload ends early, expected {8 + count} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path, labels_path=None, limit: int | None = None,
             lam: float = 1.0) -> Dataset:
    """Load an IDX image file (and optional label file) into a Dataset.

    Pixels are scaled to [0, 1] and then multiplied by ``lam``.  A count
    mismatch between images and labels is a format error.
    """
    with open(images_path, "rb") as f:
        images = _parse_idx_images(f.read(), str(images_path))
    labels = None
    if labels_path is not None:
        with open(labels_path, "rb") as f:
            labels = _parse_idx_labels(f.read(), str(labels_path))
        if labels.shape[0] != images.shape[0]:
            raise IdxFormatError(
                f"count mismatch: {images.shape[0]} images vs "
                f"{labels.shape[0]} labels", 4)
    if limit is not None:
        images = images[:limit]
        labels = None if labels is None else labels[:limit]
    xs = images.astype(np.float64) / 255.0 * lam
    return Dataset(xs=xs, labels=labels, scale_lambda=lam,
                   meta=f"idx:{images_path}")


def write_idx_images(path, images: np.ndarray) -> None:
    """Write uint8 images (N, rows, cols) in the IDX container format."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (count, rows, cols)")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, images.shape[0],
                            images.shape[1], images.shape[2]))
        f.write(images.tobytes(order="C"))


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes(order="C"))


# ---------------------------------------------------------------------------
# synthetic generators


@dataclass(frozen=True)
class LinearManifoldTruth:
    """Generating model x = A u + noise, u ~ N(0, diag(u_variances))."""

    basis: np.ndarray  # (m, n_true), orthonormal columns
    u_variances: np.ndarray  # (n_true,)
    noise_std: float


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str  # gaussian | linear | ring
    n_true: int
    data_dim: int
    variances: tuple = ()
    noise_std: float = 0.0
    count: int = 1000
    seed: int = 0
    ring_bumps: int = 6
    ring_radius: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "linear", "ring"):
            raise ValueError(f"unknown synthetic kind: {self.kind!r}")
        if self.n_true > self.data_dim:
            raise ValueError("intrinsic dimension exceeds data dimension")
        if self.count < 1:
            raise ValueError("count must be positive")


def _orthonormal_columns(rng: Rng, m: int, k: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal((m, k)))
    return q[:, :k]


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw a dataset from one of the analytic test-bed generators."""
    rng = Rng(spec.seed)
    if spec.kind == "gaussian":
        variances = np.asarray(spec.variances, dtype=float)
        if variances.shape != (spec.n_true,):
            raise ValueError("need one variance per intrinsic dimension")
        xs = np.zeros((spec.count, spec.data_dim))
        xs[:, :spec.n_true] = rng.normal((spec.count, spec.n_true)) \
            * np.sqrt(variances)[None, :]
        if spec.noise_std > 0:
            xs += spec.noise_std * rng.normal(xs.shape)
        return Dataset(xs=xs, meta=f"synthetic:gaussian:{spec.seed}",
                       truth=spec)
    if spec.kind == "linear":
        variances = np.asarray(spec.variances, dtype=float)
        if variances.shape != (spec.n_true,):
            raise ValueError("need one variance per intrinsic dimension")
        basis = _orthonormal_columns(rng, spec.data_dim, spec.n_true)
        u = rng.normal((spec.count, spec.n_true)) * np.sqrt(variances)[None, :]
        xs = u @ basis.T
        if spec.noise_std > 0:
            xs = xs + spec.noise_std * rng.normal(xs.shape)
        truth = LinearManifoldTruth(basis=basis, u_variances=variances,
                                    noise_std=spec.noise_std)
        return Dataset(xs=xs, meta=f"synthetic:linear:{spec.seed}",
                       truth=truth)
    # ring: K Gaussian bumps on a circle, embedded into data_dim dimensions
    centers_angle = 2.0 * np.pi * np.arange(spec.ring_bumps) / spec.ring_bumps
    centers = spec.ring_radius * np.stack(
        [np.cos(centers_angle), np.sin(centers_angle)], axis=1)
    which = rng.integers(0, spec.ring_bumps, spec.count)
    bump_std = spec.variances[0] if spec.variances else 0.1
    u = centers[which] + bump_std * rng.normal((spec.count, 2))
    basis = _orthonormal_columns(rng, spec.data_dim, 2)
    xs = u @ basis.T
    if spec.noise_std > 0:
        xs = xs + spec.noise_std * rng.normal(xs.shape)
    return Dataset(xs=xs, labels=which, meta=f"synthetic:ring:{spec.seed}",
                   truth=spec)


def ppca_log_evidence(ds: Dataset, likelihood_var: float) -> float:
    """Analytic marginal log likelihood under the generating linear model.

    Averages log N(x; 0, A diag(u_var) A^T + T I) over the dataset via the
    eigendecomposition of the model covariance.  Requires linear-manifold
    ground truth on the dataset.
    """
    truth = ds.truth
    if not isinstance(truth, LinearManifoldTruth):
        raise ValueError("dataset lacks linear-manifold ground truth")
    if likelihood_var <= 0:
        raise ValueError("likelihood_var must be positive")
    a = truth.basis * np.sqrt(truth.u_variances)[None, :]
    m = ds.data_dim
    cov = a @ a.T + likelihood_var * np.eye(m)
    evals, evecs = np.linalg.eigh(cov)
    proj = ds.xs @ evecs  # rotate into the eigenbasis
    quad = np.sum(proj * proj / evals[None, :], axis=1)
    logdet = float(np.sum(np.log(evals)))
    return float(np.mean(-0.5 * (m * np.log(2.0 * np.pi) + logdet + quad)))


def fitted_ppca_log_evidence(ds: Dataset, latent_dim: int,
                             likelihood_var: float) -> float:
    """Best achievable average log evidence for a linear decoder.

    Maximum-likelihood linear-Gaussian fit with fixed isotropic noise:
    the model covariance shares the eigenvectors of the sample covariance
    and lifts the top ``latent_dim`` eigenvalues to max(lambda, T), leaving
    the rest at T.
    """
    mu = ds.xs.mean(axis=0)
    centered = ds.xs - mu
    cov = centered.T @ centered / ds.n_examples
    evals = np.linalg.eigvalsh(cov)[::-1]  # descending
    t = float(likelihood_var)
    model = np.full(ds.data_dim, t)
    model[:latent_dim] = np.maximum(evals[:latent_dim], t)
    ll = -0.5 * (ds.data_dim * np.log(2.0 * np.pi)
                 + np.sum(np.log(model)) + np.sum(evals / model))
    return float(ll)
