"""Training objectives: logit-sampled BCE, cold-posterior ELBO and label smoothing."""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .activations import sigmoid_mean
from .errors import ConfigError, NumericalError
from .gaussian import DTYPE, GaussianTensor

UNIFORM_LABEL = 0.5


class LossMode(str, enum.Enum):
    BASE = "base"
    VARIATIONAL = "variational"
    SMOOTH = "smooth"
    UA_SMOOTH = "ua-smooth"
    FIXED_SMOOTH = "fixed-smooth"

    @classmethod
    def parse(cls, value) -> "LossMode":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(
                f"loss mode must be one of {[m.value for m in cls]}, got {value!r}"
            ) from None


def smoothing_alpha(logit: GaussianTensor) -> torch.Tensor:
    """|sig(E[logit]) - E[sig(logit)]|: distance between MAP and Bayes predictions."""
    y_map = torch.sigmoid(logit.mean)
    y_bayes = sigmoid_mean(logit.mean, logit.var)
    return (y_map - y_bayes).abs()


def smooth_labels(y_true, alpha) -> torch.Tensor:
    """alpha * 0.5 + (1 - alpha) * y_true; alpha outside [0, 1] is clamped with a warning."""
    y = torch.as_tensor(y_true, dtype=DTYPE)
    a = torch.as_tensor(alpha, dtype=DTYPE)
    if bool(((a < 0) | (a > 1)).any()):
        warnings.warn("smoothing probability outside [0, 1]; clamping", RuntimeWarning, stacklevel=2)
        a = a.clamp(0.0, 1.0)
    return a * UNIFORM_LABEL + (1.0 - a) * y


@dataclass
class SmoothedTarget:
    y_smooth: torch.Tensor
    alpha: torch.Tensor
    y_true: torch.Tensor


def batch_mean_alpha(alphas) -> torch.Tensor:
    a = torch.as_tensor(alphas, dtype=DTYPE)
    if a.numel() == 0:
        raise ValueError("batch_mean_alpha: empty batch")
    return a.mean()


def logit_noise(shape, n_samples: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randn((n_samples, *shape), generator=generator, dtype=DTYPE)


def sampled_bce(logit: GaussianTensor, target, n_samples: int = 10, seed: int | None = None,
                noise: torch.Tensor | None = None) -> torch.Tensor:
    """Elementwise mean over z_k ~ N(E, V) of BCE(sig(z_k), target).

    Pathwise: z_k = E + sqrt(V) u_k with standard-normal ``noise`` u (drawn from
    ``seed`` when not given), so gradients reach both logit moments.
    """
    if noise is None:
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
        noise = logit_noise(logit.shape, n_samples, gen)
    t = torch.as_tensor(target, dtype=DTYPE)
    pos = logit.var > 0
    sd = torch.sqrt(torch.where(pos, logit.var, torch.ones_like(logit.var))) * pos  # 0 slope at V = 0
    z = logit.mean + sd * noise
    return (F.softplus(z) - t * z).mean(0)


@dataclass
class LossBreakdown:
    nll: torch.Tensor
    kl: torch.Tensor
    cold_factor: float
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("nll", "kl", "total")}


def elbo_loss(nll, kl, c: float) -> LossBreakdown:
    """Negative ELBO in minimization form: nll + c * kl."""
    if c < 0:
        raise ConfigError(f"cold posterior factor must be >= 0, got {c}")
    nll = torch.as_tensor(nll, dtype=DTYPE)
    kl = torch.as_tensor(kl, dtype=DTYPE)
    if not (torch.isfinite(nll) and torch.isfinite(kl)):
        raise NumericalError(f"non-finite loss terms: nll={float(nll)}, kl={float(kl)}")
    return LossBreakdown(nll, kl, c, nll + c * kl)


def make_targets(logits: GaussianTensor, labels: torch.Tensor, mode: LossMode,
                 fixed_alpha: float = 0.1) -> SmoothedTarget:
    """Per-sample, per-task training targets; alpha never carries gradient."""
    y = torch.as_tensor(labels, dtype=DTYPE)
    if mode in (LossMode.BASE, LossMode.VARIATIONAL):
        alpha = torch.zeros_like(y)
    elif mode is LossMode.FIXED_SMOOTH:
        alpha = torch.full_like(y, fixed_alpha)
    else:
        alpha = smoothing_alpha(logits.detach())
        if mode is LossMode.SMOOTH:
            alpha = batch_mean_alpha(alpha).expand_as(y)
    return SmoothedTarget(smooth_labels(y, alpha), alpha, y)


def objective(logits: GaussianTensor, labels, mode: LossMode, kl: torch.Tensor | None,
              c: float, noise: torch.Tensor, fixed_alpha: float = 0.1) -> tuple[LossBreakdown, SmoothedTarget]:
    """Batch loss: mean over samples of the task-summed sampled BCE, plus c * KL.

    The base mode ignores KL (point-estimate network).
    """
    target = make_targets(logits, labels, mode, fixed_alpha)
    nll = sampled_bce(logits, target.y_smooth, noise=noise).sum(-1).mean()
    if mode is LossMode.BASE or kl is None:
        kl = torch.zeros((), dtype=DTYPE)
    return elbo_loss(nll, kl, c), target
