"""Moment-propagating SE-ResNet with local and multi-head global attention pooling."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .activations import relu_moments, sigmoid_moments
from .errors import ConfigError, ShapeError
from .gaussian import DTYPE, GaussianTensor, add, lift, product
from .layers import RHO_INIT, PriorSpec, VariationalConv2d, VariationalDense, VariationalLayer, kl_to_prior
from .pooling import (AttentionHead, PoolWindow, attentive_local_pool, max_co_pool,
                      multi_head_global_pool)

POOLING_KINDS = ("max", "attentive")
BLOCK_KINDS = ("conv", "se")


@dataclass
class StageSpec:
    block: str
    filters: int
    repeats: int = 1
    pool: bool = True


def canonical_stages() -> list[StageSpec]:
    return [
        StageSpec("conv", 64, 1, True),
        StageSpec("se", 64, 2, True),
        StageSpec("se", 128, 3, True),
        StageSpec("se", 256, 5, True),
        StageSpec("se", 512, 2, True),
        StageSpec("conv", 1024, 1, False),
    ]


@dataclass
class ArchitectureConfig:
    input_shape: tuple[int, int] = (300, 128)
    stages: list[StageSpec] = field(default_factory=canonical_stages)
    pooling: str = "max"
    heads: int = 4
    tasks: int = 1
    se_reduction: int = 16
    pool_window: tuple[int, int] = (2, 2)
    rho_init: float = RHO_INIT

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.pool_window = tuple(int(v) for v in self.pool_window)
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]

    @classmethod
    def canonical(cls, **overrides) -> "ArchitectureConfig":
        return cls(**overrides)

    @classmethod
    def miniature(cls, **overrides) -> "ArchitectureConfig":
        """Desk-scale variant: 32x16 input, three pooling stages, narrow widths."""
        kw = dict(
            input_shape=(32, 16),
            stages=[
                StageSpec("conv", 4, 1, True),
                StageSpec("se", 8, 1, True),
                StageSpec("se", 8, 1, True),
                StageSpec("conv", 8, 1, False),
            ],
            heads=2,
            se_reduction=4,
        )
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def oracle_scale(cls, **overrides) -> "ArchitectureConfig":
        """Smallest network that still exercises every block type (MC-oracle sized)."""
        kw = dict(
            input_shape=(8, 8),
            stages=[
                StageSpec("conv", 2, 1, True),
                StageSpec("se", 4, 1, True),
                StageSpec("conv", 2, 1, False),
            ],
            heads=2,
            se_reduction=2,
        )
        kw.update(overrides)
        return cls(**kw)

    def validate(self) -> list[tuple[int, ...]]:
        """Check the config and return the (H, W, C) shape after each stage."""
        if self.pooling not in POOLING_KINDS:
            raise ConfigError(f"pooling must be one of {POOLING_KINDS}, got {self.pooling!r}")
        if self.heads < 1 or self.tasks < 1 or self.se_reduction < 1:
            raise ConfigError("heads, tasks and se_reduction must be positive")
        if not self.stages:
            raise ConfigError("at least one stage required")
        window = PoolWindow(*self.pool_window)
        h, w = self.input_shape
        shapes = []
        for i, s in enumerate(self.stages, 1):
            if s.block not in BLOCK_KINDS:
                raise ConfigError(f"stage {i}: block must be one of {BLOCK_KINDS}, got {s.block!r}")
            if s.filters < 1 or s.repeats < 1:
                raise ConfigError(f"stage {i}: filters and repeats must be positive")
            if s.pool:
                h, w = window.output_size(h, w)
            if h < 1 or w < 1:
                raise ConfigError(f"stage {i}: spatial size collapses to {(h, w)}")
            shapes.append((h, w, s.filters))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["pool_window"] = list(self.pool_window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


class ConvBlock(nn.Module):
    """conv -> ReLU -> conv -> ReLU on Gaussian activations."""

    def __init__(self, in_ch: int, out_ch: int, rho_init: float, generator=None, device=None):
        super().__init__()
        self.conv1 = VariationalConv2d(in_ch, out_ch, rho_init=rho_init, generator=generator, device=device)
        self.conv2 = VariationalConv2d(out_ch, out_ch, rho_init=rho_init, generator=generator, device=device)

    def forward(self, x: GaussianTensor) -> GaussianTensor:
        return relu_moments(self.conv2(relu_moments(self.conv1(x))))


def squeeze(x: GaussianTensor) -> GaussianTensor:
    """Spatial average of independent normals: (N, C, H, W) -> (N, C)."""
    n = x.shape[2] * x.shape[3]
    return GaussianTensor(x.mean.mean(dim=(2, 3)), x.var.sum(dim=(2, 3)) / (n * n))


class SEBlock(nn.Module):
    """Residual squeeze-and-excitation block.

    residual = ReLU(conv(ReLU(conv(x)))); excitation = sigmoid(dense(ReLU(dense(squeeze))));
    output = residual * excitation + skip, where skip is a 1x1 projection when the
    channel count changes.
    """

    def __init__(self, in_ch: int, out_ch: int, reduction: int, rho_init: float,
                 generator=None, device=None):
        super().__init__()
        hidden = max(1, out_ch // reduction)
        kw = dict(rho_init=rho_init, generator=generator, device=device)
        self.conv1 = VariationalConv2d(in_ch, out_ch, **kw)
        self.conv2 = VariationalConv2d(out_ch, out_ch, **kw)
        self.squeeze_dense = VariationalDense(out_ch, hidden, **kw)
        self.excite_dense = VariationalDense(hidden, out_ch, **kw)
        self.project = (VariationalConv2d(in_ch, out_ch, kernel_size=1, padding="valid", **kw)
                        if in_ch != out_ch else None)

    def residual(self, x: GaussianTensor) -> GaussianTensor:
        return relu_moments(self.conv2(relu_moments(self.conv1(x))))

    def excitation(self, r: GaussianTensor) -> GaussianTensor:
        return sigmoid_moments(self.excite_dense(relu_moments(self.squeeze_dense(squeeze(r)))))

    def forward(self, x: GaussianTensor, excitation: GaussianTensor | None = None) -> GaussianTensor:
        r = self.residual(x)
        e = self.excitation(r) if excitation is None else excitation
        scaled = product(r, e.apply(lambda t: t[:, :, None, None]))
        skip = self.project(x) if self.project is not None else x
        return add(scaled, skip)


class Stage(nn.Module):
    def __init__(self, spec: StageSpec, in_ch: int, config: ArchitectureConfig,
                 generator=None, device=None):
        super().__init__()
        blocks = []
        ch = in_ch
        for _ in range(spec.repeats):
            if spec.block == "conv":
                blocks.append(ConvBlock(ch, spec.filters, config.rho_init, generator, device))
            else:
                blocks.append(SEBlock(ch, spec.filters, config.se_reduction, config.rho_init,
                                      generator, device))
            ch = spec.filters
        self.blocks = nn.ModuleList(blocks)
        self.spec = spec
        self.window = PoolWindow(*config.pool_window)
        self.pool_kind = config.pooling if spec.pool else None
        self.pool_head = (AttentionHead(spec.filters, config.rho_init, generator, device)
                          if self.pool_kind == "attentive" else None)

    def forward(self, x: GaussianTensor, probes: dict | None = None, prefix: str = "") -> GaussianTensor:
        for j, block in enumerate(self.blocks, 1):
            x = block(x)
            if probes is not None:
                probes[f"{prefix}.block{j}"] = x
        if self.pool_kind == "max":
            x = max_co_pool(x, self.window)
        elif self.pool_kind == "attentive":
            x = attentive_local_pool(x, self.window, self.pool_head)
        return x


def to_sequence(x: GaussianTensor) -> GaussianTensor:
    """(N, C, H, W) -> (N, H, W * C): time-major frames of width-major features."""
    def f(t):
        n, c, h, w = t.shape
        return t.permute(0, 2, 3, 1).reshape(n, h, w * c)
    return x.apply(f)


class SEResNet(nn.Module):
    """Sample-free variational SE-ResNet producing one Gaussian logit per task."""

    def __init__(self, config: ArchitectureConfig, seed: int = 0, device=None):
        super().__init__()
        self.stage_shapes = config.validate()
        self.config = config
        gen = None
        if device is None or torch.device(device).type != "meta":
            gen = torch.Generator().manual_seed(seed)
        stages = []
        ch = 1
        for spec in config.stages:
            stages.append(Stage(spec, ch, config, gen, device))
            ch = spec.filters
        self.stages = nn.ModuleList(stages)
        t, w, c = self.stage_shapes[-1]
        self.seq_len, self.embed_dim = t, w * c
        self.heads = nn.ModuleList(AttentionHead(self.embed_dim, config.rho_init, gen, device)
                                   for _ in range(config.heads))
        pooled = config.heads * self.embed_dim
        self.outputs = nn.ModuleList(VariationalDense(pooled, 1, rho_init=config.rho_init,
                                                      generator=gen, device=device)
                                     for _ in range(config.tasks))

    def variational_layers(self):
        for name, m in self.named_modules():
            if isinstance(m, VariationalLayer):
                yield name, m

    def set_stochastic(self, on: bool) -> None:
        for _, m in self.variational_layers():
            m.stochastic.fill_(1.0 if on else 0.0)

    def set_rho(self, value: float) -> None:
        for _, m in self.variational_layers():
            m.set_rho(value)

    def kl(self, prior: PriorSpec | None = None) -> torch.Tensor:
        """Sum of layer KL terms; point-estimate layers contribute nothing."""
        prior = prior or PriorSpec()
        total = torch.zeros((), dtype=DTYPE)
        for _, m in self.variational_layers():
            if m.is_stochastic:
                total = total + kl_to_prior(m, prior)
        return total

    def _input(self, x) -> GaussianTensor:
        g = x if isinstance(x, GaussianTensor) else lift(x)
        if g.mean.dim() == 2:
            g = g.apply(lambda t: t.unsqueeze(0))
        if g.mean.dim() == 3:
            g = g.apply(lambda t: t.unsqueeze(1))
        if tuple(g.shape[2:]) != self.config.input_shape or g.shape[1] != 1:
            raise ShapeError(
                f"input: expected (N, {self.config.input_shape[0]}, {self.config.input_shape[1]}),"
                f" got {tuple(g.shape)}"
            )
        return g

    def forward(self, x, probes: dict | None = None) -> GaussianTensor:
        g = self._input(x)
        for i, stage in enumerate(self.stages, 1):
            name = f"stage{i}"
            try:
                g = stage(g, probes, name)
            except (ValueError, RuntimeError) as err:
                raise ShapeError(f"{name} ({stage.spec.block} @ {stage.spec.filters}): {err}") from err
            expected = self.stage_shapes[i - 1]
            got = (g.shape[2], g.shape[3], g.shape[1])
            if got != expected:
                raise ShapeError(f"{name}: produced {got}, expected {expected}")
            if probes is not None:
                probes[name] = g
        seq = to_sequence(g)
        pooled = multi_head_global_pool(seq, self.heads)
        logits = [out(pooled) for out in self.outputs]
        out = GaussianTensor(torch.cat([l.mean for l in logits], -1), torch.cat([l.var for l in logits], -1))
        if probes is not None:
            probes["reshape"] = seq
            probes["global_pool"] = pooled
            probes["logits"] = out
        return out

    def shape_trace(self, x=None) -> list[tuple[str, tuple[int, ...]]]:
        """Per-row shapes of a forward pass (batch axis dropped, (H, W, C) for maps)."""
        if x is None:
            x = torch.zeros((1, *self.config.input_shape), dtype=DTYPE,
                            device=next(self.parameters()).device)
        probes: dict = {}
        self.forward(x, probes)
        rows = [("input", tuple(self.config.input_shape))]
        for i in range(1, len(self.stages) + 1):
            t = probes[f"stage{i}"].shape
            rows.append((f"stage{i}", (t[2], t[3], t[1])))
        rows.append(("reshape", tuple(probes["reshape"].shape[1:])))
        rows.append(("global_pool", tuple(probes["global_pool"].shape[1:])))
        rows.append(("logits", tuple(probes["logits"].shape[1:])))
        return rows
