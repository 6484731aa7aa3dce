"""
Training objectives and the flow sampler.

* next-token cross entropy over text positions,
* flow matching on latents along ``z_t = (1 - t) z0 + t z1`` with velocity
  target ``z1 - z0``,
* their weighted sum, and
* an explicit Euler integrator that runs the learned velocity field from
  noise (t = 1) back to data (t = 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError, ParameterError, ShapeError, ValidationError
from .model import Image, Mode, ModalityTag, UnifiedModel, build_sequence
from .tensor import Tensor, log_softmax, no_grad


@dataclass(frozen=True)
class LossWeights:
    """``total = w_ce * ntp + w_mse * flow``; with w_ce = 1, w_mse is the flow coefficient alpha."""

    w_ce: float = 0.25
    w_mse: float = 1.0

    def __post_init__(self):
        if self.w_ce < 0 or self.w_mse < 0:
            raise ParameterError("loss weights must be nonnegative")
        if self.w_ce == 0 and self.w_mse == 0:
            raise ParameterError("loss weights cannot both be zero")

    @property
    def alpha(self) -> float:
        """Flow coefficient after rescaling the text weight to 1."""
        return self.w_mse / self.w_ce if self.w_ce else math.inf


@dataclass
class FlowPair:
    z_t: np.ndarray
    t: float
    v_target: np.ndarray
    z0: np.ndarray
    z1: np.ndarray


def ntp_loss(logits: Tensor, targets, ignore: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits`` (n x V).

    Positions flagged in ``ignore`` are excluded from the mean.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, vocab = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target ids must lie in [0, {vocab})")
    keep = np.ones(n, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    rows = np.flatnonzero(keep)
    if len(rows) == 0:
        raise ContractError("ntp_loss has no positions left after masking")
    logp = log_softmax(logits, axis=-1)
    return -(logp[rows, targets[rows]].sum()) * (1.0 / len(rows))


def make_flow_pair(z0, t: float, noise_seed: int | None = None, z1=None) -> FlowPair:
    """Noise ``z0`` to time ``t``; ``z1`` ~ N(0, I) from ``noise_seed`` unless given."""
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"flow time must lie in [0, 1], got {t}")
    z0 = np.asarray(z0, dtype=np.float64)
    if z1 is None:
        z1 = np.random.default_rng(noise_seed).standard_normal(z0.shape)
    z1 = np.asarray(z1, dtype=np.float64)
    if z1.shape != z0.shape:
        raise ShapeError(f"noise shape {z1.shape} != latent shape {z0.shape}")
    z_t = (1.0 - t) * z0 + t * z1
    return FlowPair(z_t=z_t, t=float(t), v_target=z1 - z0, z0=z0, z1=z1)


def flow_loss(v_pred: Tensor, v_target) -> Tensor:
    target = v_target.data if isinstance(v_target, Tensor) else np.asarray(v_target, dtype=np.float64)
    if v_pred.shape != target.shape:
        raise ShapeError(f"velocity shape {v_pred.shape} != target shape {target.shape}")
    diff = v_pred - Tensor(target)
    return (diff * diff).sum() * (1.0 / diff.size)


def combined_loss(l_ntp, l_flow, w: LossWeights):
    """``w.w_ce * l_ntp + w.w_mse * l_flow``; accepts floats or scalar tensors."""
    for name, val in (("ntp", l_ntp), ("flow", l_flow)):
        raw = val.data if isinstance(val, Tensor) else val
        if not np.all(np.isfinite(raw)):
            raise NumericError(f"{name} loss is not finite")
    return l_ntp * w.w_ce + l_flow * w.w_mse


# -- sampling -----------------------------------------------------------------

def velocity_field(model: UnifiedModel, cond_text, cond_image: Image | None = None):
    """The generation expert's velocity ``v(z, t)`` under a fixed condition, as a plain function."""
    with no_grad():
        zv = model.vit_encode(cond_image) if cond_image is not None else None
    mode = Mode.INTERLEAVED if zv is not None else Mode.GENERATE
    cfg = model.config

    def field(z: np.ndarray, t: float) -> np.ndarray:
        with no_grad():
            seq = build_sequence(cond_text, zv, Tensor(z), mode, flow_time=t,
                                 mask_policy=cfg.mask_policy, position_scheme=cfg.position_scheme)
            hidden = model.forward(seq)
            return model.predict_velocity(hidden, seq.positions_of(ModalityTag.VAE), t).data

    return field


def euler_integrate(field, z1: np.ndarray, steps: int) -> np.ndarray:
    """Integrate ``dz/dt = field(z, t)`` from t = 1 down to t = 0 in ``steps`` Euler steps."""
    if steps < 1:
        raise ParameterError("need at least one sampling step")
    z = np.array(z1, dtype=np.float64)
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        v = np.asarray(field(z, t), dtype=np.float64)
        z = z - dt * v
        if not np.isfinite(z).all():
            raise NumericError("non-finite latent during sampling", step=i)
    return z


def euler_sample_latent(model: UnifiedModel, cond_text, n_tokens: int, steps: int = 50,
                        seed: int = 0, cond_image: Image | None = None) -> np.ndarray:
    z1 = np.random.default_rng(seed).standard_normal((n_tokens, model.config.latent_dim))
    return euler_integrate(velocity_field(model, cond_text, cond_image), z1, steps)


def euler_sample(model: UnifiedModel, cond_text, shape: tuple[int, int], steps: int = 50,
                 seed: int = 0, cond_image: Image | None = None, modality_label: str = "") -> Image:
    """Generate an image of ``shape`` (height, width) conditioned on text (and optionally an image)."""
    height, width = shape
    lp = model.config.latent_patch
    if height % lp or width % lp:
        raise ValidationError(f"image shape {shape} is not divisible by latent patch {lp}")
    n_tokens = (height // lp) * (width // lp)
    z = euler_sample_latent(model, cond_text, n_tokens, steps, seed, cond_image)
    return model.vae_decode(z, height, width, modality_label)
