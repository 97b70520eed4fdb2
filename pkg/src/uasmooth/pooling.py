"""Local and global pooling of Gaussian activations.

Local pooling works on non-overlapping windows without padding; trailing rows
or columns that do not fill a window are dropped.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError
from .gaussian import GaussianTensor
from .layers import RHO_INIT, VariationalDense


@dataclass(frozen=True)
class PoolWindow:
    height: int = 2
    width: int = 2

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"pool window must be positive, got {self.height}x{self.width}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return h // self.height, w // self.width


class AttentionHead(nn.Module):
    """Variational dense map from a feature vector to one attention energy."""

    def __init__(self, features: int, rho_init: float = RHO_INIT, generator=None, device=None):
        super().__init__()
        self.energy_layer = VariationalDense(features, 1, rho_init=rho_init,
                                             generator=generator, device=device)

    def energies(self, means: torch.Tensor) -> torch.Tensor:
        """Mean energies for feature vectors along the last axis."""
        layer = self.energy_layer
        e = means @ layer.weight_mean[:, 0]
        if layer.bias_mean is not None:
            e = e + layer.bias_mean[0]
        return e


def _windows(t: torch.Tensor, w: PoolWindow) -> torch.Tensor:
    """(N, C, H, W) -> (N, C, H', W', window elements) in row-major window order."""
    n, c, h, wd = t.shape
    ho, wo = w.output_size(h, wd)
    if ho == 0 or wo == 0:
        raise ValueError(f"pool: spatial size {(h, wd)} smaller than window {(w.height, w.width)}")
    t = t[:, :, : ho * w.height, : wo * w.width]
    t = t.reshape(n, c, ho, w.height, wo, w.width).permute(0, 1, 2, 4, 3, 5)
    return t.reshape(n, c, ho, wo, w.height * w.width)


_selection_log: list | None = None


@contextmanager
def record_selections():
    """Collect the window indices chosen by every max_co_pool call inside the block."""
    global _selection_log
    prev, _selection_log = _selection_log, []
    try:
        yield _selection_log
    finally:
        _selection_log = prev


def max_co_pool(x: GaussianTensor, w: PoolWindow = PoolWindow()) -> GaussianTensor:
    """Forward both moments of the window element with the largest mean.

    Ties go to the first element in row-major window order. Gradients reach
    only the selected element.
    """
    mean = _windows(x.mean, w)
    var = _windows(x.var, w)
    idx = mean.argmax(dim=-1, keepdim=True)
    if _selection_log is not None:
        _selection_log.append(idx.detach().clone())
    return GaussianTensor(mean.gather(-1, idx).squeeze(-1), var.gather(-1, idx).squeeze(-1))


def attention_weights(energies: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(energies, dim=dim)


def attentive_local_pool(x: GaussianTensor, w: PoolWindow, head: AttentionHead) -> GaussianTensor:
    """Softmax-weighted average within each window.

    Energies come from the channel vector of mean activations at each window
    position; the same head is shared by every window.
    """
    mean = _windows(x.mean, w)  # (N, C, H', W', T)
    var = _windows(x.var, w)
    e = head.energies(mean.permute(0, 2, 3, 4, 1))  # (N, H', W', T)
    p = attention_weights(e).unsqueeze(1)  # (N, 1, H', W', T)
    return GaussianTensor((p * mean).sum(-1), (p * p * var).sum(-1))


def attentive_average(seq: GaussianTensor, head: AttentionHead) -> GaussianTensor:
    """Attention-weighted average of a (N, T, D) sequence -> (N, D)."""
    p = attention_weights(head.energies(seq.mean), dim=-1).unsqueeze(-1)  # (N, T, 1)
    return GaussianTensor((p * seq.mean).sum(-2), (p * p * seq.var).sum(-2))


def multi_head_global_pool(seq: GaussianTensor, heads) -> GaussianTensor:
    """Concatenate per-head attentive averages: (N, T, D) -> (N, heads * D)."""
    if seq.shape[-2] < 1:
        raise ValueError("global pool: zero-length sequence")
    if len(heads) == 0:
        raise ValueError("global pool: no attention heads")
    outs = [attentive_average(seq, h) for h in heads]
    return GaussianTensor(torch.cat([o.mean for o in outs], -1), torch.cat([o.var for o in outs], -1))
