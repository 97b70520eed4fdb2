"""Point-estimate forward pass of the SE-ResNet with ordinary tensor ops.

Shares parameters with :class:`~uasmooth.model.SEResNet` but none of the moment
rules: convs, ReLU, max-pooling, sigmoid and softmax act on plain values. With
``weights`` holding per-sample draws (leading axis S) every sample gets its own
network, which is what the Monte-Carlo oracle needs.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .layers import VariationalLayer, sample_weights
from .model import ConvBlock, SEBlock, SEResNet


def _params(layer: VariationalLayer, name: str, weights: dict | None):
    if weights is not None and name in weights:
        w = weights[name]
        return w["weight"], w.get("bias")
    return layer.weight_mean.detach(), None if layer.bias_mean is None else layer.bias_mean.detach()


def conv(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None, padding: str) -> torch.Tensor:
    if w.dim() == 4:
        return F.conv2d(x, w, b, padding=padding)
    # per-sample kernels (S, O, C, kh, kw): patch views contracted sample by sample
    s, o, c, kh, kw = w.shape
    if x.shape[0] != s:
        raise ValueError(f"per-sample conv: {x.shape[0]} inputs for {s} weight draws")
    if padding == "same":
        top, left = (kh - 1) // 2, (kw - 1) // 2
        x = F.pad(x, (left, kw - 1 - left, top, kh - 1 - top))
    patches = x.unfold(2, kh, 1).unfold(3, kw, 1)  # (S, C, H', W', kh, kw)
    y = torch.einsum("sockl,schwkl->sohw", w, patches)
    if b is not None:
        y = y + b[:, :, None, None]
    return y


def dense(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None) -> torch.Tensor:
    if w.dim() == 2:
        y = x @ w
        return y if b is None else y + b
    s = w.shape[0]
    lead = x.shape[1:-1]
    y = torch.bmm(x.reshape(s, -1, x.shape[-1]), w).reshape(s, *lead, w.shape[-1])
    if b is not None:
        y = y + b.reshape(s, *([1] * len(lead)), b.shape[-1])
    return y


class PointNet:
    """Callable point-estimate view of an :class:`SEResNet`."""

    def __init__(self, model: SEResNet, weights: dict | None = None):
        self.model = model
        self.weights = weights
        self.names = {id(m): n for n, m in model.named_modules()}

    def p(self, layer):
        return _params(layer, self.names[id(layer)], self.weights)

    def conv_layer(self, layer, x):
        w, b = self.p(layer)
        return conv(x, w, b, layer.padding)

    def dense_layer(self, layer, x):
        w, b = self.p(layer)
        return dense(x, w, b)

    def conv_block(self, block: ConvBlock, x):
        return F.relu(self.conv_layer(block.conv2, F.relu(self.conv_layer(block.conv1, x))))

    def se_block(self, block: SEBlock, x):
        r = F.relu(self.conv_layer(block.conv2, F.relu(self.conv_layer(block.conv1, x))))
        s = r.mean(dim=(2, 3))
        e = torch.sigmoid(self.dense_layer(block.excite_dense, F.relu(self.dense_layer(block.squeeze_dense, s))))
        skip = self.conv_layer(block.project, x) if block.project is not None else x
        return r * e[:, :, None, None] + skip

    def energies(self, head, feats):
        w, b = self.p(head.energy_layer)
        return dense(feats, w, b)[..., 0]

    def pool(self, stage, x):
        kh, kw = stage.window.height, stage.window.width
        if stage.pool_kind == "max":
            return F.max_pool2d(x, (kh, kw))
        n, c, h, w = x.shape
        ho, wo = h // kh, w // kw
        win = x[:, :, : ho * kh, : wo * kw].reshape(n, c, ho, kh, wo, kw)
        win = win.permute(0, 2, 4, 3, 5, 1).reshape(n, ho, wo, kh * kw, c)
        p = torch.softmax(self.energies(stage.pool_head, win), dim=-1)
        return (p.unsqueeze(-1) * win).sum(-2).permute(0, 3, 1, 2)

    def __call__(self, x: torch.Tensor, probes: dict | None = None) -> torch.Tensor:
        if x.dim() == 2:
            x = x.unsqueeze(0)
        x = x.unsqueeze(1)
        for i, stage in enumerate(self.model.stages, 1):
            for j, block in enumerate(stage.blocks, 1):
                x = self.conv_block(block, x) if isinstance(block, ConvBlock) else self.se_block(block, x)
                if probes is not None:
                    probes[f"stage{i}.block{j}"] = x
            if stage.pool_kind is not None:
                x = self.pool(stage, x)
            if probes is not None:
                probes[f"stage{i}"] = x
        n, c, h, w = x.shape
        seq = x.permute(0, 2, 3, 1).reshape(n, h, w * c)
        pooled = []
        for head in self.model.heads:
            p = torch.softmax(self.energies(head, seq), dim=-1)
            pooled.append((p.unsqueeze(-1) * seq).sum(-2))
        pooled = torch.cat(pooled, -1)
        logits = torch.cat([self.dense_layer(out, pooled) for out in self.model.outputs], -1)
        if probes is not None:
            probes["reshape"] = seq
            probes["global_pool"] = pooled
            probes["logits"] = logits
        return logits


@torch.no_grad()
def point_forward(model: SEResNet, x: torch.Tensor, weights: dict | None = None,
                  probes: dict | None = None) -> torch.Tensor:
    return PointNet(model, weights)(x, probes)


def sample_network(model: SEResNet, gen: torch.Generator, n: int, noise_dtype=torch.float64) -> dict:
    """One independent weight draw per sample for every variational layer."""
    return {name: sample_weights(layer, gen, n, noise_dtype) for name, layer in model.variational_layers()}
