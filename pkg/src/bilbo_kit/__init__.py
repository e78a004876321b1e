"""Constant-posterior-variance VAE objectives with a closed-form theory oracle.

Three layers:

* numeric core: ``tensor`` (float64 arrays + reverse-mode tape + RNG) and
  ``gaussian`` (diagonal Gaussians, reparameterized sampling, likelihoods);
* training stack: ``objectives`` (ELBO / BILBO / BAGGINS variants),
  ``model`` (MLP encoder/decoder, Adam, training loop, checkpoints), and
  ``data`` (IDX ingestion, synthetic generators with analytic ground truth);
* verification: ``oracle`` (closed-form identities checked by independent
  numerics) and ``suite`` (the pass/fail identity suite behind
  ``bilbo-kit verify``).
"""

__version__ = "0.1.0"

from . import data, gaussian, model, objectives, oracle, suite, tensor  # noqa: F401
from .data import Dataset, SyntheticSpec, gen_synthetic, load_idx  # noqa: F401
from .gaussian import DiagGaussian, LikelihoodKind, LikelihoodSpec  # noqa: F401
from .model import MlpVae, TrainConfig, evaluate_bound, train  # noqa: F401
from .objectives import ObjectiveMode, ObjectiveSpec  # noqa: F401
from .suite import run_suite  # noqa: F401
from .tensor import Node, Rng, backward  # noqa: F401
