"""Optimization loop, early stopping, evaluation and gradient checking."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .activations import sigmoid_mean
from .audio import spec_augment
from .config import ExperimentConfig
from .errors import NumericalError
from .gaussian import DTYPE, GaussianTensor
from .io import Checkpoint, save_checkpoint, write_history
from .layers import PriorSpec
from .losses import LossMode, SmoothedTarget, elbo_loss, logit_noise, make_targets, objective, sampled_bce
from .metrics import EvalReport
from .model import ArchitectureConfig, SEResNet
from .pooling import record_selections
from .synthetic import Dataset, Partition

log = logging.getLogger(__name__)


class EarlyStopping:
    """Stop once ``patience`` epochs pass without strict improvement of the tracked metric."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.wait = 0

    def step(self, epoch: int, metric: float) -> bool:
        """Record ``metric``; return True when it is a new best."""
        if metric > self.best:
            self.best, self.best_epoch, self.wait = metric, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


@dataclass
class TrialRecord:
    seed: int
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_validation: float | None = None
    test: EvalReport | None = None

    def summary(self) -> dict:
        return {"seed": self.seed, "best_epoch": self.best_epoch, "best_validation_au_pr": self.best_validation,
                "epochs": len(self.history), "test": self.test.to_dict() if self.test else None}


def prior_of(cfg: ExperimentConfig) -> PriorSpec:
    return PriorSpec(cfg.loss.empirical_bayes, dict(cfg.loss.prior_variances))


def build_model(arch: ArchitectureConfig, mode: LossMode, seed: int) -> SEResNet:
    model = SEResNet(arch, seed=seed)
    if mode is LossMode.BASE:
        model.set_stochastic(False)
    return model


def batch_loss(model: SEResNet, x, y, cfg: ExperimentConfig, noise: torch.Tensor,
               target: SmoothedTarget | None = None):
    """Total loss of one batch. A given ``target`` replaces the one built from this pass."""
    mode = cfg.loss.loss_mode
    logits = model(torch.as_tensor(x, dtype=DTYPE))
    kl = None if mode is LossMode.BASE else model.kl(prior_of(cfg))
    if target is None:
        return objective(logits, y, mode, kl, cfg.loss.cold_factor, noise, cfg.loss.fixed_alpha)
    nll = sampled_bce(logits, target.y_smooth, noise=noise).sum(-1).mean()
    kl = torch.zeros((), dtype=DTYPE) if kl is None else kl
    return elbo_loss(nll, kl, cfg.loss.cold_factor), target


@torch.no_grad()
def predict(model: SEResNet, x: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Bayes probabilities (mean of the sigmoid of the logit) and logit variances."""
    probs, vars_ = [], []
    for i in range(0, len(x), batch_size):
        out = model(torch.as_tensor(x[i: i + batch_size], dtype=DTYPE))
        probs.append(sigmoid_mean(out.mean, out.var).numpy())
        vars_.append(out.var.numpy())
    return np.concatenate(probs), np.concatenate(vars_)


def evaluate(model: SEResNet, part: Partition, batch_size: int = 64) -> EvalReport:
    want = model.config.input_shape
    if tuple(part.x.shape[1:]) != tuple(want):
        raise ValueError(f"data clips are {tuple(part.x.shape[1:])}, model expects {tuple(want)}")
    if part.y.shape[1] != model.config.tasks:
        raise ValueError(f"data has {part.y.shape[1]} tasks, model has {model.config.tasks}")
    p, _ = predict(model, part.x, batch_size)
    return EvalReport.from_predictions(p, part.y)


def _check_dataset(data: Dataset) -> None:
    for name in ("train", "devel", "test"):
        if name not in data.partitions or len(data[name]) == 0:
            raise ValueError(f"partition {name!r} is missing or empty")


def _augment(x: np.ndarray, cfg: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    seeds = rng.integers(0, 2 ** 63, size=len(x))
    return np.stack([spec_augment(c, int(s), cfg.frontend) for c, s in zip(x, seeds)])


def _state(model: SEResNet) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _dump(out_dir, model, optimizer, epoch, cfg) -> Path:
    path = Path(out_dir or ".") / "nan_dump.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, Checkpoint(_state(model), cfg.to_dict(), epoch, None, optimizer.state_dict()))
    return path


def train(cfg: ExperimentConfig, data: Dataset, out_dir=None, seed: int | None = None):
    """Fit one trial; returns (Checkpoint at the best validation epoch, TrialRecord)."""
    _check_dataset(data)
    tc = cfg.trainer
    seed = tc.seed if seed is None else seed
    mode = cfg.loss.loss_mode
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    model = build_model(cfg.architecture, mode, seed)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=tc.betas, eps=tc.eps)
    rng = np.random.default_rng(seed)
    noise_gen = torch.Generator().manual_seed(seed)
    train_part = data["train"]
    stopper = EarlyStopping(tc.patience)
    record = TrialRecord(seed)
    best_state, best_opt = _state(model), copy.deepcopy(opt.state_dict())

    for epoch in range(1, tc.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train_part))
        sums = {"nll": 0.0, "kl": 0.0, "total": 0.0, "alpha": 0.0, "logit_var": 0.0}
        batches = 0
        for i in range(0, len(order), tc.batch_size):
            idx = order[i: i + tc.batch_size]
            x = train_part.x[idx]
            if tc.augment:
                x = _augment(x, cfg, rng)
            y = torch.as_tensor(train_part.y[idx], dtype=DTYPE)
            noise = logit_noise((len(idx), cfg.architecture.tasks), cfg.loss.logit_samples, noise_gen)
            try:
                loss, target = batch_loss(model, x, y, cfg, noise)
            except NumericalError as err:
                path = _dump(out_dir, model, opt, epoch, cfg)
                raise NumericalError(f"epoch {epoch}: {err}; state written to {path}") from err
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            batches += 1
            for k, v in loss.as_floats().items():
                sums[k] += v
            sums["alpha"] += float(target.alpha.mean())
        model.eval()
        val = evaluate(model, data["devel"], tc.eval_batch_size)
        metric = val.selection_metric()
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items() if k != "logit_var"}}
        row.update({f"val_{k}": (math.nan if v is None else v) for k, v in val.aggregates.items()})
        record.history.append(row)
        log.info("epoch %d loss %.5f val au_pr %.4f", epoch, row["total"], metric)
        if stopper.step(epoch, metric):
            best_state, best_opt = _state(model), copy.deepcopy(opt.state_dict())
        if stopper.should_stop:
            break

    model.load_state_dict(best_state)
    record.best_epoch = stopper.best_epoch
    record.best_validation = stopper.best if math.isfinite(stopper.best) else None
    record.test = evaluate(model, data["test"], tc.eval_batch_size)
    ckpt = Checkpoint(best_state, cfg.to_dict(), stopper.best_epoch, record.best_validation, best_opt,
                      {"seed": seed})
    if out_dir is not None:
        write_outputs(out_dir, ckpt, record)
    return ckpt, record


def write_outputs(out_dir, ckpt: Checkpoint, record: TrialRecord) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.ckpt", ckpt)
    write_history(out / "history.csv", record.history)
    if record.test is not None:
        (out / "metrics.json").write_text(record.test.to_json())
        (out / "metrics.txt").write_text(record.test.to_text())


def model_from_checkpoint(ckpt: Checkpoint) -> SEResNet:
    arch = ArchitectureConfig.from_dict(ckpt.config["architecture"])
    model = SEResNet(arch)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model


def gradients(model: SEResNet, x, y, cfg: ExperimentConfig, noise: torch.Tensor,
              target: SmoothedTarget | None = None) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of the batch loss for every parameter (smoothing targets held fixed)."""
    model.zero_grad()
    loss, _ = batch_loss(model, x, y, cfg, noise, target)
    loss.total.backward()
    return {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            for n, p in model.named_parameters()}


@dataclass
class GradCheckResult:
    relative_errors: np.ndarray
    names: list[str]
    floor: float
    kinks: list[str] = field(default_factory=list)  # stencils straddling a non-differentiable point

    @property
    def worst(self) -> float:
        return float(self.relative_errors.max()) if self.relative_errors.size else 0.0

    def fraction_below(self, tol: float) -> float:
        return float((self.relative_errors < tol).mean()) if self.relative_errors.size else 1.0


# Central differences in float64 carry ~1e-12 roundoff at unit loss scale; gradients
# below this floor are compared absolutely.
GRAD_FLOOR = 1e-8


def gradcheck_problem(cfg: ExperimentConfig, seed: int = 0, batch: int = 2, rho: float = 0.05):
    """Model, inputs, labels and logit noise for a gradient check.

    Bias means are drawn away from their zero initialization so they are
    exercised like any other parameter.
    """
    model = build_model(cfg.architecture, cfg.loss.loss_mode, seed)
    gen = torch.Generator().manual_seed(seed)
    if cfg.loss.loss_mode is not LossMode.BASE:
        model.set_rho(rho)
    with torch.no_grad():
        for _, layer in model.variational_layers():
            if layer.bias_mean is not None:
                layer.bias_mean.copy_(0.1 * torch.randn(layer.bias_mean.shape, generator=gen, dtype=DTYPE))
    x = torch.randn((batch, *cfg.architecture.input_shape), generator=gen, dtype=DTYPE)
    y = (torch.rand((batch, cfg.architecture.tasks), generator=gen) < 0.5).to(DTYPE)
    noise = logit_noise(y.shape, cfg.loss.logit_samples, gen)
    return model, x, y, noise


def _loss_and_selection(model, x, y, cfg, noise, target) -> tuple[float, list]:
    with record_selections() as sel:
        loss = float(batch_loss(model, x, y, cfg, noise, target)[0].total)
    return loss, sel


def gradcheck(model: SEResNet, x, y, cfg: ExperimentConfig, noise: torch.Tensor,
              h: float = 1e-4, floor: float = GRAD_FLOOR) -> GradCheckResult:
    """Central finite differences against autograd for every scalar parameter.

    The smoothing target is frozen at the unperturbed pass, matching the
    gradient contract in which alpha carries no derivative. Two kinds of stencil
    straddle a point of non-differentiability and are listed in ``kinks`` instead
    of ``relative_errors``: those whose +-h evaluations select different max-pool
    elements than the centre, and, while a KL term is active, those that move a
    weight or bias mean across zero (the KL contains log(rho mu^2)).
    """
    kl_active = cfg.loss.loss_mode is not LossMode.BASE and cfg.loss.cold_factor > 0
    with torch.no_grad():
        _, target = batch_loss(model, x, y, cfg, noise)
        _, centre = _loss_and_selection(model, x, y, cfg, noise, target)
    target = SmoothedTarget(target.y_smooth.detach(), target.alpha.detach(), target.y_true)
    grads = gradients(model, x, y, cfg, noise, target)
    same = lambda sel: all(torch.equal(a, b) for a, b in zip(sel, centre))
    errs, names, kinks = [], [], []
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            g = grads[name].view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                label = f"{name}[{i}]"
                if kl_active and name.endswith("_mean") and abs(orig) < h:
                    kinks.append(label)
                    continue
                flat[i] = orig + h
                up, sel_up = _loss_and_selection(model, x, y, cfg, noise, target)
                flat[i] = orig - h
                down, sel_down = _loss_and_selection(model, x, y, cfg, noise, target)
                flat[i] = orig
                if not (same(sel_up) and same(sel_down)):
                    kinks.append(label)
                    continue
                fd = (up - down) / (2 * h)
                ad = float(g[i])
                errs.append(abs(fd - ad) / max(abs(fd), abs(ad), floor))
                names.append(label)
    return GradCheckResult(np.array(errs), names, floor, kinks)
