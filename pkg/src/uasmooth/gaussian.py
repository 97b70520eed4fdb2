"""Element-wise independent normal random variables as paired mean/variance tensors.

Every stochastic quantity in the network (inputs, pre-activations, activations,
logits) is a :class:`GaussianTensor`. Operations here are the closed-form
moment rules for independent normals; nonlinear rules live in
:mod:`uasmooth.activations`.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

DTYPE = torch.float64

# Floor applied to variances before any division or square root.
VAR_FLOOR = 1e-12


class ClampCounter:
    """Counts negative variances zeroed at construction (cancellation diagnostics)."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.events = 0
        self.elements = 0

    def record(self, n: int) -> None:
        with self._lock:
            self.events += 1
            self.elements += n

    def reset(self) -> None:
        with self._lock:
            self.events = 0
            self.elements = 0


clamp_counter = ClampCounter()


def _as_tensor(x, device=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype=DTYPE) if x.dtype != DTYPE else x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE, device=device)


def _clamp_var(var: torch.Tensor) -> torch.Tensor:
    if var.device.type != "meta":
        n = int((var < 0).sum())
        if n:
            clamp_counter.record(n)
    return var.clamp_min(0.0)


@dataclass(frozen=True)
class GaussianTensor:
    """Independent normals with elementwise ``mean`` and ``var`` of identical shape."""

    mean: torch.Tensor
    var: torch.Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.var.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != variance shape {tuple(self.var.shape)}"
            )
        object.__setattr__(self, "var", _clamp_var(self.var))

    @property
    def shape(self) -> torch.Size:
        return self.mean.shape

    @property
    def variance(self) -> torch.Tensor:
        return self.var

    def apply(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "GaussianTensor":
        """Apply a structural op (reshape, permute, slice) to both moments."""
        return GaussianTensor(fn(self.mean), fn(self.var))

    def detach(self) -> "GaussianTensor":
        return GaussianTensor(self.mean.detach(), self.var.detach())

    def __getitem__(self, idx) -> "GaussianTensor":
        return GaussianTensor(self.mean[idx], self.var[idx])


def lift(x) -> GaussianTensor:
    """Deterministic values as a zero-variance GaussianTensor."""
    mean = _as_tensor(x)
    if mean.device.type != "meta" and not bool(torch.isfinite(mean).all()):
        raise ValueError("lift: input contains non-finite values")
    return GaussianTensor(mean, torch.zeros_like(mean))


def _broadcast(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as err:
        raise ValueError(
            f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}"
        ) from err


def add(a: GaussianTensor, b: GaussianTensor) -> GaussianTensor:
    _broadcast(a.mean, b.mean, "add")
    return GaussianTensor(a.mean + b.mean, a.var + b.var)


def scale(a: GaussianTensor, c) -> GaussianTensor:
    c = _as_tensor(c, device=a.mean.device)
    _broadcast(a.mean, c, "scale")
    return GaussianTensor(c * a.mean, c * c * a.var)


def product(a: GaussianTensor, b: GaussianTensor) -> GaussianTensor:
    """Moments of the product of independent normals.

    Var = (Ea^2 + Va)(Eb^2 + Vb) - Ea^2 Eb^2, evaluated in the expanded form
    Va Vb + Va Eb^2 + Vb Ea^2 which has no cancellation.
    """
    _broadcast(a.mean, b.mean, "product")
    ma2 = a.mean * a.mean
    mb2 = b.mean * b.mean
    var = a.var * b.var + a.var * mb2 + b.var * ma2
    return GaussianTensor(a.mean * b.mean, var)


def second_moment(a: GaussianTensor) -> torch.Tensor:
    return a.var + a.mean * a.mean
