"""Variational dense and convolutional layers under local reparameterization.

Weights are N(mu, rho * mu^2) with one positive ``rho`` per layer, stored
unconstrained and mapped through softplus. Biases carry their own ``rho``.
Forward passes propagate means and variances in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .gaussian import DTYPE, VAR_FLOOR, GaussianTensor, second_moment

RHO_INIT = 1e-4


def inverse_softplus(y: float) -> float:
    if y <= 0:
        raise ConfigError(f"rho must be positive, got {y}")
    return y + math.log(-math.expm1(-y))


class VariationalLayer(nn.Module):
    """Shared parameterization: weight means, layer rho, bias means, bias rho.

    The ``stochastic`` buffer multiplies every rho; setting it to 0 turns the
    layer into its point-estimate counterpart.
    """

    weight_mean: nn.Parameter

    def __init__(self, weight_shape, fan_in: int, out_features: int, bias: bool = True,
                 rho_init: float = RHO_INIT, generator: torch.Generator | None = None,
                 device=None):
        super().__init__()
        bound = math.sqrt(6.0 / fan_in)
        w = torch.empty(weight_shape, dtype=DTYPE, device=device)
        if w.device.type != "meta":
            w.uniform_(-bound, bound, generator=generator)
        self.weight_mean = nn.Parameter(w)
        raw = inverse_softplus(rho_init)
        self.rho_raw = nn.Parameter(torch.tensor(raw, dtype=DTYPE, device=device))
        if bias:
            self.bias_mean = nn.Parameter(torch.zeros(out_features, dtype=DTYPE, device=device))
            self.bias_rho_raw = nn.Parameter(torch.tensor(raw, dtype=DTYPE, device=device))
        else:
            self.register_parameter("bias_mean", None)
            self.register_parameter("bias_rho_raw", None)
        self.register_buffer("stochastic", torch.tensor(1.0, dtype=DTYPE, device=device))

    @property
    def rho(self) -> torch.Tensor:
        return F.softplus(self.rho_raw) * self.stochastic

    @property
    def bias_rho(self) -> torch.Tensor:
        return F.softplus(self.bias_rho_raw) * self.stochastic

    @property
    def is_stochastic(self) -> bool:
        return bool(self.stochastic.item() != 0) if self.stochastic.device.type != "meta" else True

    def set_rho(self, value: float, bias_value: float | None = None) -> None:
        """Set rho directly; ``value == 0`` switches the layer to point estimates."""
        with torch.no_grad():
            if value == 0:
                self.stochastic.fill_(0.0)
                return
            self.stochastic.fill_(1.0)
            self.rho_raw.fill_(inverse_softplus(value))
            if self.bias_rho_raw is not None:
                self.bias_rho_raw.fill_(inverse_softplus(bias_value if bias_value is not None else value))

    def weight_variance(self) -> torch.Tensor:
        return self.rho * self.weight_mean ** 2

    def bias_moments(self) -> tuple[torch.Tensor, torch.Tensor] | None:
        if self.bias_mean is None:
            return None
        return self.bias_mean, self.bias_rho * self.bias_mean ** 2

    def _mixed_input(self, x: GaussianTensor) -> torch.Tensor:
        # V mu^2 + rho mu^2 E[h^2] == ((1 + rho) V + rho E^2) mu^2 under a shared rho
        rho = self.rho
        return x.var + rho * second_moment(x)


class VariationalDense(VariationalLayer):
    """Dense layer, weight means laid out (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rho_init: float = RHO_INIT, generator=None, device=None):
        super().__init__((in_features, out_features), in_features, out_features, bias,
                         rho_init, generator, device)
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x: GaussianTensor) -> GaussianTensor:
        return forward_dense(x, self)


class VariationalConv2d(VariationalLayer):
    """2-D convolution over NCHW inputs, weight means laid out (out, in, kh, kw)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: str = "same", bias: bool = True,
                 rho_init: float = RHO_INIT, generator=None, device=None):
        if padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")
        if padding == "same" and stride != 1:
            raise ConfigError("'same' padding requires stride 1")
        fan_in = in_channels * kernel_size * kernel_size
        super().__init__((out_channels, in_channels, kernel_size, kernel_size), fan_in,
                         out_channels, bias, rho_init, generator, device)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding

    def forward(self, x: GaussianTensor) -> GaussianTensor:
        return forward_conv2d(x, self)


def forward_dense(x: GaussianTensor, layer: VariationalDense) -> GaussianTensor:
    if x.shape[-1] != layer.in_features:
        raise ValueError(
            f"dense: input last dimension {x.shape[-1]} != in_features {layer.in_features}"
        )
    mu = layer.weight_mean
    mean = x.mean @ mu
    var = layer._mixed_input(x) @ (mu * mu)
    bias = layer.bias_moments()
    if bias is not None:
        mean = mean + bias[0]
        var = var + bias[1]
    return GaussianTensor(mean, var)


def forward_conv2d(x: GaussianTensor, layer: VariationalConv2d) -> GaussianTensor:
    if x.mean.dim() != 4:
        raise ValueError(f"conv2d: expected (N, C, H, W) input, got shape {tuple(x.shape)}")
    if x.shape[1] != layer.in_channels:
        raise ValueError(
            f"conv2d: input has {x.shape[1]} channels, layer expects {layer.in_channels}"
        )
    k = layer.kernel_size
    if layer.padding == "valid" and (x.shape[2] < k or x.shape[3] < k):
        raise ValueError(f"conv2d: spatial size {tuple(x.shape[2:])} smaller than kernel {k}")
    mu = layer.weight_mean
    mean = F.conv2d(x.mean, mu, stride=layer.stride, padding=layer.padding)
    var = F.conv2d(layer._mixed_input(x), mu * mu, stride=layer.stride, padding=layer.padding)
    bias = layer.bias_moments()
    if bias is not None:
        mean = mean + bias[0].view(1, -1, 1, 1)
        var = var + bias[1].view(1, -1, 1, 1)
    return GaussianTensor(mean, var)


@dataclass
class PriorSpec:
    """Zero-mean Gaussian (ARD) prior over each weight group of a layer.

    Groups are ``"weight"`` and ``"bias"`` per layer. With ``empirical_bayes`` the
    group variance is the group mean of mu^2 + sigma^2, recomputed at every
    evaluation; otherwise ``variances`` must name a fixed tau^2 per group.
    """

    empirical_bayes: bool = True
    variances: dict[str, float] = field(default_factory=dict)
    floor: float = VAR_FLOOR

    def __post_init__(self) -> None:
        for name, v in self.variances.items():
            if not v > 0:
                raise ConfigError(f"prior variance for group {name!r} must be positive, got {v}")
        if not self.empirical_bayes and not self.variances:
            raise ConfigError("fixed prior requires group variances")


def gaussian_kl(mu: torch.Tensor, sigma2: torch.Tensor, tau2: torch.Tensor) -> torch.Tensor:
    """Elementwise KL(N(mu, sigma2) || N(0, tau2))."""
    return 0.5 * (torch.log(tau2) - torch.log(sigma2) + (sigma2 + mu * mu) / tau2 - 1.0)


def _group_kl(mu: torch.Tensor, rho: torch.Tensor, prior: PriorSpec, group: str) -> torch.Tensor:
    sigma2 = (rho * mu * mu).clamp_min(prior.floor)
    if prior.empirical_bayes:
        tau2 = (mu * mu + sigma2).mean()
    else:
        if group not in prior.variances:
            raise ConfigError(f"no prior variance for group {group!r}")
        tau2 = torch.as_tensor(prior.variances[group], dtype=mu.dtype)
    return gaussian_kl(mu, sigma2, tau2).sum()


def kl_to_prior(layer: VariationalLayer, prior: PriorSpec) -> torch.Tensor:
    for t in (layer.weight_mean, layer.rho_raw):
        if not bool(torch.isfinite(t).all()):
            raise ValueError("kl_to_prior: non-finite variational parameters")
    kl = _group_kl(layer.weight_mean, layer.rho, prior, "weight")
    if layer.bias_mean is not None:
        kl = kl + _group_kl(layer.bias_mean, layer.bias_rho, prior, "bias")
    return kl


def sample_weights(layer: VariationalLayer, seed: int | torch.Generator,
                   n: int | None = None, noise_dtype=DTYPE) -> dict[str, torch.Tensor]:
    """Draw point weights w ~ N(mu, rho mu^2); ``n`` adds a leading sample axis.

    ``noise_dtype`` sets the precision of the standard-normal draws (results are float64).
    """
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    lead = () if n is None else (n,)

    def draw(mu: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
        mu = mu.detach()
        eps = torch.randn(lead + tuple(mu.shape), generator=gen, dtype=noise_dtype).to(DTYPE)
        return mu + torch.sqrt(rho.detach()) * mu.abs() * eps

    out = {"weight": draw(layer.weight_mean, layer.rho)}
    if layer.bias_mean is not None:
        out["bias"] = draw(layer.bias_mean, layer.bias_rho)
    return out
