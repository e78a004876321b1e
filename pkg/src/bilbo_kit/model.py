"""Encoder/decoder MLPs, Adam, the training loop, and checkpoints.

Architecture: dense trunks with ReLU on the middle layers and linear output
heads.  The encoder always has a mean head; a standard-deviation head
(SoftPlus, squared at the boundary) exists only when posterior variances are
learned, so constant-variance models carry strictly fewer parameters.  The
decoder mirrors the encoder, with an optional standard-deviation head for
learned likelihood variances.

Training is single-threaded over steps and deterministic for a fixed seed:
weight init, batch shuffling, and objective noise each consume a dedicated
substream of the run seed.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .gaussian import EventCounters, LikelihoodKind
from .objectives import ObjectiveMode, ObjectiveSpec, objective_value
from .tensor import Node, Rng, backward, value_of

CHECKPOINT_MAGIC = b"BVAE"
CHECKPOINT_VERSION = 1

_FLAG_ENC_STD = 1
_FLAG_DEC_STD = 2


class TrainingDiverged(RuntimeError):
    """Raised when the objective is non-finite on consecutive steps."""

    def __init__(self, step: int, diagnostics: dict):
        super().__init__(f"objective non-finite at step {step}")
        self.step = step
        self.diagnostics = diagnostics


class MlpVae:
    """MLP encoder/decoder pair with optional variance heads."""

    def __init__(self, data_dim: int, latent_dim: int,
                 hidden=(200, 200, 200), encoder_std_head: bool = False,
                 decoder_std_head: bool = False, params=None):
        if data_dim < 1 or latent_dim < 1:
            raise ValueError("dimensions must be positive")
        self.data_dim = int(data_dim)
        self.latent_dim = int(latent_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.encoder_std_head = bool(encoder_std_head)
        self.decoder_std_head = bool(decoder_std_head)
        self.params = params if params is not None else {}

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, data_dim, latent_dim, hidden=(200, 200, 200),
              encoder_std_head=False, decoder_std_head=False,
              rng: Rng | None = None) -> "MlpVae":
        """Initialize weights with uniform fan-in (Kaiming) scaling.

        Weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)) so the per-layer
        standard deviation is sqrt(2/fan_in); biases start at zero.
        Deterministic for a given rng seed.
        """
        model = cls(data_dim, latent_dim, hidden, encoder_std_head,
                    decoder_std_head)
        rng = rng if rng is not None else Rng(0)

        def dense(name, fan_in, fan_out):
            bound = math.sqrt(6.0 / fan_in)
            model.params[f"{name}_w"] = rng.uniform(-bound, bound,
                                                    (fan_in, fan_out))
            model.params[f"{name}_b"] = np.zeros(fan_out)

        sizes = [data_dim, *model.hidden]
        for i in range(len(model.hidden)):
            dense(f"enc{i}", sizes[i], sizes[i + 1])
        trunk_out = sizes[-1]
        dense("enc_mu", trunk_out, latent_dim)
        if encoder_std_head:
            dense("enc_std", trunk_out, latent_dim)

        sizes = [latent_dim, *model.hidden]
        for i in range(len(model.hidden)):
            dense(f"dec{i}", sizes[i], sizes[i + 1])
        trunk_out = sizes[-1]
        dense("dec_mean", trunk_out, data_dim)
        if decoder_std_head:
            dense("dec_std", trunk_out, data_dim)
        return model

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def lift(self) -> dict:
        """Wrap every parameter in a fresh tape leaf for one training step."""
        return {k: Node(v) for k, v in self.params.items()}

    # -- forward -----------------------------------------------------------

    def _p(self, params, key):
        return self.params[key] if params is None else params[key]

    def _trunk(self, x, params, prefix):
        h = x
        for i in range(len(self.hidden)):
            h = T.relu(T.matmul(h, self._p(params, f"{prefix}{i}_w"))
                       + self._p(params, f"{prefix}{i}_b"))
        return h

    def encode(self, x, params=None):
        """Map a (batch, data_dim) matrix to (mu, std-or-None)."""
        h = self._trunk(x, params, "enc")
        mu = T.matmul(h, self._p(params, "enc_mu_w")) \
            + self._p(params, "enc_mu_b")
        std = None
        if self.encoder_std_head:
            std = T.softplus(T.matmul(h, self._p(params, "enc_std_w"))
                             + self._p(params, "enc_std_b"))
        return mu, std

    def decode(self, z, params=None):
        """Map a (batch, latent_dim) matrix to (mean, std-or-None)."""
        h = self._trunk(z, params, "dec")
        mean = T.matmul(h, self._p(params, "dec_mean_w")) \
            + self._p(params, "dec_mean_b")
        std = None
        if self.decoder_std_head:
            std = T.softplus(T.matmul(h, self._p(params, "dec_std_w"))
                             + self._p(params, "dec_std_b"))
        return mean, std


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard bias-corrected Adam over a dict of parameter arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> bool:
        """Apply one update in place; refuse (and report) non-finite grads."""
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                return False
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * (g * g)
            mh = self.m[k] / bc1
            vh = self.v[k] / bc2
            params[k] = params[k] - lr * mh / (np.sqrt(vh) + self.eps)
        return True


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, bool]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, False
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, True


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    objective: ObjectiveSpec
    epochs: int
    latent_dim: int
    hidden: tuple = (200, 200, 200)
    learning_rate: float = 0.001
    batch_size: int = 300
    seed: int = 0
    eval_every: int = 0  # 0: log every step
    grad_clip: float = 100.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")


METRICS_COLUMNS = ("step", "objective", "kl_term", "loglik_term", "trS2",
                   "baggins_t_median")
METRICS_SCHEMA = "metrics-v1"


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    events: EventCounters = field(default_factory=EventCounters)

    def log(self, step: int, objective: float, parts: dict) -> None:
        self.rows.append((
            step,
            objective,
            parts.get("kl_term", float("nan")),
            parts.get("loglik_term", float("nan")),
            parts.get("tr_s2", float("nan")),
            parts.get("baggins_t_median", float("nan")),
        ))

    def column(self, name: str) -> np.ndarray:
        idx = METRICS_COLUMNS.index(name)
        return np.asarray([r[idx] for r in self.rows], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(f"# bilbo-kit {METRICS_SCHEMA}\n")
            f.write(",".join(METRICS_COLUMNS) + "\n")
            for row in self.rows:
                f.write(f"{row[0]}," + ",".join(f"{v:.17g}" for v in row[1:])
                        + "\n")


def _wants_encoder_std(spec: ObjectiveSpec) -> bool:
    return spec.mode == ObjectiveMode.ELBO_LEARNED


def _wants_decoder_std(spec: ObjectiveSpec) -> bool:
    return spec.likelihood.kind == LikelihoodKind.GAUSSIAN_LEARNED


def build_model_for(config: TrainConfig, data_dim: int,
                    rng: Rng | None = None) -> MlpVae:
    return MlpVae.build(
        data_dim, config.latent_dim, config.hidden,
        encoder_std_head=_wants_encoder_std(config.objective),
        decoder_std_head=_wants_decoder_std(config.objective),
        rng=rng)


def train(dataset: Dataset, config: TrainConfig,
          model: MlpVae | None = None) -> tuple[MlpVae, MetricsLog]:
    """Shuffled minibatch training of the configured objective.

    Per batch: encode, objective (the constant-variance modes fold the
    floating prior in), backward, global-norm clip, Adam.  Trailing batches
    smaller than two examples are dropped (the batch moment needs a batch).
    Raises TrainingDiverged after two consecutive non-finite objectives.
    """
    root = Rng(config.seed)
    init_rng, shuffle_rng, noise_rng = (root.spawn(0), root.spawn(1),
                                        root.spawn(2))
    if model is None:
        model = build_model_for(config, dataset.data_dim, init_rng)
    adam = Adam()
    log = MetricsLog()
    step = 0
    bad_streak = 0
    last_parts: dict = {}

    for _epoch in range(config.epochs):
        order = shuffle_rng.permutation(dataset.n_examples)
        for lo in range(0, dataset.n_examples, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            if idx.size < 2:
                continue
            batch = dataset.xs[idx]
            params = model.lift()
            parts: dict = {}
            bound = objective_value(batch, model, config.objective, noise_rng,
                                    params=params, events=log.events,
                                    parts=parts)
            value = float(value_of(bound))
            if not math.isfinite(value):
                bad_streak += 1
                log.events.bump("nonfinite_objective")
                if bad_streak >= 2:
                    raise TrainingDiverged(step, {
                        "last_value": value, "last_parts": last_parts,
                        "events": dict(log.events)})
                step += 1
                continue
            bad_streak = 0
            last_parts = parts
            loss = -bound
            backward(loss)
            grads = {k: node.grad if node.grad is not None
                     else np.zeros_like(model.params[k])
                     for k, node in params.items()}
            grads, clipped = clip_global_norm(grads, config.grad_clip)
            if clipped:
                log.events.bump("grad_clipped")
            if not adam.step(model.params, grads, config.learning_rate):
                log.events.bump("nan_grad_steps")
            if config.eval_every <= 0 or step % config.eval_every == 0:
                log.log(step, value, parts)
            step += 1
    return model, log


def evaluate_bound(model: MlpVae, dataset: Dataset, objective: ObjectiveSpec,
                   mc_samples: int, rng: Rng, eval_batch: int = 300) -> float:
    """Mean objective per example over the dataset, without gradients.

    Batch-coupled objectives (the constant-variance family) are evaluated in
    fixed-order batches of ``eval_batch`` examples and averaged with
    example-count weights.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    spec = ObjectiveSpec(mode=objective.mode, likelihood=objective.likelihood,
                         sigma_const=objective.sigma_const,
                         mc_samples=mc_samples)
    total, count = 0.0, 0
    for lo in range(0, dataset.n_examples, eval_batch):
        batch = dataset.xs[lo:lo + eval_batch]
        if batch.shape[0] < 2 and spec.mode != ObjectiveMode.ELBO_LEARNED:
            continue
        value = float(value_of(objective_value(batch, model, spec, rng)))
        total += value * batch.shape[0]
        count += batch.shape[0]
    return total / max(count, 1)


def reconstruction_rmse(model: MlpVae, dataset: Dataset,
                        batch: int = 1000) -> float:
    """Root mean squared reconstruction error at the posterior mean."""
    total, count = 0.0, 0
    for lo in range(0, dataset.n_examples, batch):
        xs = dataset.xs[lo:lo + batch]
        mu, _ = model.encode(xs)
        mean, _ = model.decode(value_of(mu))
        r = xs - value_of(mean)
        total += float(np.sum(r * r))
        count += xs.size
    return math.sqrt(total / max(count, 1))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MlpVae, path) -> None:
    """Versioned binary checkpoint.

    Layout (little-endian): magic "BVAE", u32 version, u32 data_dim,
    u32 latent_dim, u32 n_hidden, u32 per hidden size, u32 head flags,
    u64 parameter count, the flat parameter array as f64 in canonical
    (build) order, and a trailing CRC32 over all preceding bytes.
    """
    names = _canonical_param_names(model)
    flat = np.concatenate([model.params[k].ravel() for k in names]) \
        if names else np.zeros(0)
    head = struct.pack("<4sIIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                       model.data_dim, model.latent_dim, len(model.hidden))
    head += struct.pack(f"<{len(model.hidden)}I", *model.hidden)
    flags = (_FLAG_ENC_STD if model.encoder_std_head else 0) \
        | (_FLAG_DEC_STD if model.decoder_std_head else 0)
    head += struct.pack("<IQ", flags, flat.size)
    body = flat.astype("<f8").tobytes()
    crc = zlib.crc32(head + body) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(head + body + struct.pack("<I", crc))


def load_checkpoint(path) -> MlpVae:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 24 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise ValueError("checkpoint CRC mismatch")
    version, data_dim, latent_dim, n_hidden = struct.unpack_from("<IIII", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 20
    hidden = struct.unpack_from(f"<{n_hidden}I", raw, off)
    off += 4 * n_hidden
    flags, count = struct.unpack_from("<IQ", raw, off)
    off += 12
    flat = np.frombuffer(raw, dtype="<f8", count=count, offset=off).copy()
    model = MlpVae(data_dim, latent_dim, hidden,
                   encoder_std_head=bool(flags & _FLAG_ENC_STD),
                   decoder_std_head=bool(flags & _FLAG_DEC_STD))
    shapes = _canonical_param_shapes(model)
    pos = 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        model.params[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    if pos != flat.size:
        raise ValueError("checkpoint parameter count mismatch")
    return model


def _canonical_param_shapes(model: MlpVae):
    shapes = []
    sizes = [model.data_dim, *model.hidden]
    for i in range(len(model.hidden)):
        shapes.append((f"enc{i}_w", (sizes[i], sizes[i + 1])))
        shapes.append((f"enc{i}_b", (sizes[i + 1],)))
    trunk = sizes[-1]
    shapes.append(("enc_mu_w", (trunk, model.latent_dim)))
    shapes.append(("enc_mu_b", (model.latent_dim,)))
    if model.encoder_std_head:
        shapes.append(("enc_std_w", (trunk, model.latent_dim)))
        shapes.append(("enc_std_b", (model.latent_dim,)))
    sizes = [model.latent_dim, *model.hidden]
    for i in range(len(model.hidden)):
        shapes.append((f"dec{i}_w", (sizes[i], sizes[i + 1])))
        shapes.append((f"dec{i}_b", (sizes[i + 1],)))
    trunk = sizes[-1]
    shapes.append(("dec_mean_w", (trunk, model.data_dim)))
    shapes.append(("dec_mean_b", (model.data_dim,)))
    if model.decoder_std_head:
        shapes.append(("dec_std_w", (trunk, model.data_dim)))
        shapes.append(("dec_std_b", (model.data_dim,)))
    return shapes


def _canonical_param_names(model: MlpVae):
    return [name for name, _ in _canonical_param_shapes(model)]
