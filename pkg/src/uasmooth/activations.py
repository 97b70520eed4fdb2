"""Moment-matched ReLU and sigmoid for Gaussian pre-activations."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import special

from .gaussian import VAR_FLOOR, GaussianTensor

# Constants of the fast-dropout approximation sig(x)^2 ~ sig(a (x - b)).
SIGMOID_ALPHA = 4.0 - 2.0 * math.sqrt(2.0)
SIGMOID_BETA = -math.log(math.sqrt(2.0) - 1.0)

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def relu_moments(pre: GaussianTensor) -> GaussianTensor:
    """Exact mean and variance of max(0, X) for X ~ N(mean, var).

    Zero-variance elements take the deterministic branch max(0, mean).
    """
    mu, lam = pre.mean, pre.var
    lam_f = lam.clamp_min(VAR_FLOOR)
    sd = torch.sqrt(lam_f)
    z = mu / sd
    cdf = special.ndtr(z)
    pdf = torch.exp(-0.5 * z * z) * _INV_SQRT_2PI
    m = mu * cdf + sd * pdf
    second = (mu * mu + lam_f) * cdf + mu * sd * pdf
    det = lam <= 0
    mean = torch.where(det, F.relu(mu), m)
    var = torch.where(det, torch.zeros_like(mu), second - m * m)
    return GaussianTensor(mean, var)


def sigmoid_mean(mean: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    """Probit-style approximation of E[sig(X)], X ~ N(mean, var)."""
    return torch.sigmoid(mean / torch.sqrt(1.0 + math.pi * var / 8.0))


def sigmoid_moments(pre: GaussianTensor) -> GaussianTensor:
    """Approximate mean and variance of sig(X) for X ~ N(mean, var).

    E[sig(X)^2] uses sig(a (x - b)) with the probit scaling; the residual of that
    surrogate at zero variance, sig(a (mu - b)) - sig(mu)^2, is subtracted so the
    variance vanishes exactly for deterministic inputs. Result clipped to [0, 1/4].
    """
    mu, lam = pre.mean, pre.var
    a, b = SIGMOID_ALPHA, SIGMOID_BETA
    theta = sigmoid_mean(mu, lam)
    e_sq = torch.sigmoid(a * (mu - b) / torch.sqrt(1.0 + math.pi * a * a * lam / 8.0))
    e_sq0 = torch.sigmoid(a * (mu - b))
    sig0 = torch.sigmoid(mu)
    var = (e_sq - theta * theta) - (e_sq0 - sig0 * sig0)
    return GaussianTensor(theta, var.clamp_max(0.25))
