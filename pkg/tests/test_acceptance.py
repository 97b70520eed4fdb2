"""Acceptance criteria 1-10 at their stated tolerances.

Each test appends one PASS/FAIL line to the terminal summary. Run alone with
``pytest -m acceptance -s``.
"""
import math
import time

import numpy as np
import pytest
import torch

from oracles import SPECIES, au_pr_brute, au_roc_brute, ece_brute, ece_value, f1_brute, random_layout, \
    random_scored_set, relu_quadrature, weighted_brute
from test_metrics import thirty_task_fixture
from test_model import CANONICAL_TRACE
from test_segmentation import check_invariants
from uasmooth.activations import relu_moments
from uasmooth.config import miniature_experiment
from uasmooth.gaussian import DTYPE, GaussianTensor
from uasmooth.losses import LossMode, logit_noise, objective, smoothing_alpha
from uasmooth.metrics import EvalReport, au_pr, au_roc, ece, macro_f1
from uasmooth.model import ArchitectureConfig, SEResNet
from uasmooth.oracle import INSTANCE_KINDS, check_instance, z_threshold
from uasmooth.reference import point_forward
from uasmooth.segmentation import segment_corpus, segment_recording
from uasmooth.synthetic import synthetic_corpus
from uasmooth.train import gradcheck, gradcheck_problem, train

pytestmark = [pytest.mark.acceptance]


# 1. Moment propagation vs Monte Carlo

ORACLE_INSTANCES, ORACLE_SAMPLES = 100, 200_000


@pytest.mark.slow
@pytest.mark.parametrize("kind", INSTANCE_KINDS)
def test_c1_moments_match_monte_carlo(kind, criterion):
    results = [check_instance(kind, seed, ORACLE_SAMPLES) for seed in range(ORACLE_INSTANCES)]
    thr = z_threshold(2 * sum(r.elements for r in results))
    worst = max(r.worst() for r in results)
    failing = sum(r.worst() > thr for r in results)
    ok = criterion(1, worst <= thr,
                   f"{kind}: worst |z| {worst:.2f} vs {thr:.2f}, {failing}/{len(results)} instances over, "
                   f"max err mean {max(r.err_mean for r in results):.2e} var {max(r.err_var for r in results):.2e}, "
                   f"{sum(r.seconds for r in results):.0f}s")
    assert ok


# 2. ReLU moments vs quadrature

def test_c2_relu_vs_quadrature(criterion):
    phis = np.linspace(-6, 6, 121)
    lams = [0.01, 0.1, 1.0, 4.0, 10.0]
    grid = [(p, l) for p in phis for l in lams]
    out = relu_moments(GaussianTensor(torch.tensor([g[0] for g in grid], dtype=DTYPE),
                                      torch.tensor([g[1] for g in grid], dtype=DTYPE)))
    worst = 0.0
    for i, (p, l) in enumerate(grid):
        m, v = relu_quadrature(p, l)
        worst = max(worst, abs(float(out.mean[i]) - m), abs(float(out.var[i]) - v))
    assert criterion(2, worst < 1e-8, f"max abs error {worst:.2e} over {len(grid)} grid points")


# 3. Smoothing-probability surface

def alpha(e, v):
    e, v = torch.broadcast_tensors(torch.as_tensor(e, dtype=DTYPE), torch.as_tensor(v, dtype=DTYPE))
    return smoothing_alpha(GaussianTensor(e.clone(), v.clone()))


def test_c3_alpha_surface(criterion):
    es = torch.linspace(-8, 8, 161, dtype=DTYPE)
    vs = torch.linspace(0, 10, 201, dtype=DTYPE)
    at_v0 = bool((alpha(es, 0.0) == 0).all())
    at_e0 = float(alpha(0.0, vs).abs().max())
    mono = all(bool((alpha(s * e, vs).diff() >= 0).all()) for e in (1.0, 2.0, 4.0) for s in (1, -1))
    far = float(alpha(6.0, 4.0)) > float(alpha(0.0, 4.0))
    ok = at_v0 and at_e0 <= 1e-12 and mono and far
    assert criterion(3, ok, f"alpha(V=0)==0: {at_v0}, max alpha(E=0) {at_e0:.1e}, monotone in V: {mono}, "
                            f"alpha(6,4) {float(alpha(6.0, 4.0)):.4f} > alpha(0,4) {float(alpha(0.0, 4.0)):.1e}")


# 4. Gradient check

@pytest.mark.slow
@pytest.mark.parametrize("pooling", ["max", "attentive"])
def test_c4_gradient_check(pooling, criterion):
    cfg = miniature_experiment()
    cfg.architecture = ArchitectureConfig.miniature(pooling=pooling)
    model, x, y, noise = gradcheck_problem(cfg, seed=0)
    n = sum(p.numel() for p in model.parameters())
    res = gradcheck(model, x, y, cfg, noise)
    ok = n <= 5000 and res.fraction_below(1e-3) >= 0.99 and res.worst < 1e-2
    assert criterion(4, ok, f"{pooling} pooling: {n} parameters, {res.fraction_below(1e-3):.2%} below 1e-3, "
                            f"worst {res.worst:.2e}, {len(res.kinks)} non-differentiable stencils skipped")


# 5. Metrics vs brute force

def test_c5_metrics_exact(criterion):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        s, y = random_scored_set(rng)
        terms = au_pr_brute(s, y)
        roc = au_roc_brute(s, y)
        mismatches += au_pr(s, y) != (None if terms is None else math.fsum(float(t) for t in terms))
        mismatches += au_roc(s, y) != (None if roc is None else float(roc))
        mismatches += macro_f1(s, y) != float(f1_brute(s, y))
        mismatches += ece(s, y) != ece_value(ece_brute(s, y), len(s))
    scores, labels = thirty_task_fixture()
    report = EvalReport.from_predictions(scores, labels)
    counts = labels.sum(0).tolist()
    agg_err = 0.0
    for name, fn in (("au_pr", au_pr), ("au_roc", au_roc), ("f1", macro_f1), ("ece", ece)):
        per = [fn(scores[:, t], labels[:, t]) for t in range(30)]
        agg_err = max(agg_err, abs(report.aggregates[name] - float(weighted_brute(per, counts))))
    ok = mismatches == 0 and agg_err <= 1e-15
    assert criterion(5, ok, f"{mismatches} mismatches over 1000 sets x 4 metrics, "
                            f"30-task aggregation error {agg_err:.1e}")


# 6. Deterministic limit

def test_c6_deterministic_limit(criterion):
    gen = torch.Generator().manual_seed(6)
    worst, nonzero_var, loss_gap = 0.0, False, 0.0
    cases = [(ArchitectureConfig.miniature(pooling=p, tasks=3), 4) for p in ("max", "attentive")]
    cases.append((ArchitectureConfig.canonical(), 1))
    for arch, batch in cases:
        model = SEResNet(arch, seed=3)
        with torch.no_grad():
            for _, layer in model.variational_layers():
                if layer.bias_mean is not None:
                    layer.bias_mean.normal_(0, 0.1, generator=gen)
        model.set_stochastic(False)
        x = torch.randn((batch, *arch.input_shape), generator=gen, dtype=DTYPE)
        with torch.no_grad():
            out = model(x)
        worst = max(worst, float((out.mean - point_forward(model, x)).abs().max()))
        nonzero_var |= bool((out.var != 0).any())
        y = (torch.rand(out.shape, generator=gen) < 0.5).to(DTYPE)
        noise = logit_noise(out.shape, 10, gen)
        base = float(objective(out, y, LossMode.BASE, None, 1e-10, noise)[0].total)
        for mode in (LossMode.VARIATIONAL, LossMode.SMOOTH, LossMode.UA_SMOOTH):
            total = float(objective(out, y, mode, torch.zeros((), dtype=DTYPE), 1e-10, noise)[0].total)
            loss_gap = max(loss_gap, abs(total - base))
    ok = worst <= 1e-6 and not nonzero_var and loss_gap == 0.0
    assert criterion(6, ok, f"max |forward - reference| {worst:.1e} (miniature x2, canonical), "
                            f"nonzero variance: {nonzero_var}, max loss-mode gap {loss_gap:.1e}")


# 7. Canonical shape trace

def test_c7_canonical_shape_trace(criterion):
    trace = SEResNet(ArchitectureConfig.canonical(), device="meta").shape_trace()
    ok = trace == CANONICAL_TRACE
    assert criterion(7, ok, " ".join(f"{n}{s}" for n, s in trace))


# 8 and 10. Synthetic end-to-end training and reproducibility

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_runs")
    cache = {}

    def run(mode: str, seed: int, tag: str = ""):
        key = (mode, seed, tag)
        if key not in cache:
            cfg = miniature_experiment()
            cfg.loss.mode = mode
            data = synthetic_corpus(cfg.data.synthetic)
            out = root / f"{mode}-{seed}{tag}"
            t0 = time.perf_counter()
            _, record = train(cfg, data, out, seed=seed)
            cache[key] = (record, out, time.perf_counter() - t0)
        return cache[key]

    return run


@pytest.mark.slow
def test_c8_synthetic_end_to_end(trained, criterion):
    stats, ok = {}, True
    for mode in ("ua-smooth", "variational"):
        for seed in SEEDS:
            record, _, seconds = trained(mode, seed)
            roc, cal = record.test.aggregates["au_roc"], record.test.aggregates["ece"]
            stats.setdefault(mode, []).append(cal)
            ok &= roc >= 0.95 and cal <= 0.15 and seconds < 15 * 60
            print(f"  {mode:<12} seed {seed}: test AU-ROC {roc:.4f} ECE {cal:.4f} "
                  f"best epoch {record.best_epoch} {seconds:.0f}s")
    ua, var = np.mean(stats["ua-smooth"]), np.mean(stats["variational"])
    ok &= ua <= var + 0.05
    assert criterion(8, ok, f"mean test ECE ua-smooth {ua:.4f} vs variational {var:.4f} "
                            f"(all seeds AU-ROC >= 0.95, ECE <= 0.15, < 15 min: {ok})")


@pytest.mark.slow
def test_c10_bit_identical_reruns(trained, criterion):
    _, first, _ = trained("ua-smooth", 0)
    _, second, _ = trained("ua-smooth", 0, "-rerun")
    same = {name: (first / name).read_bytes() == (second / name).read_bytes()
            for name in ("history.csv", "checkpoint.ckpt", "metrics.json")}
    assert criterion(10, all(same.values()), ", ".join(f"{k} identical: {v}" for k, v in same.items()))


# 9. Segmentation invariants

def test_c9_segmentation_invariants(criterion):
    rng = np.random.default_rng(99)
    recordings = [random_layout(rng, f"rec{i:03d}") for i in range(200)]
    violations = 0
    for i, rec in enumerate(recordings):
        try:
            check_invariants(rec, segment_recording(rec, SPECIES, seed=i))
        except AssertionError:
            violations += 1
    clips = segment_corpus(recordings, SPECIES, seed=9)
    owner = {}
    for c in clips:
        owner.setdefault(c.recording_id, set()).add(c.partition)
    disjoint = all(len(p) == 1 for p in owner.values())
    ok = violations == 0 and disjoint
    assert criterion(9, ok, f"{violations} of 200 layouts violate an invariant, {len(clips)} corpus clips, "
                            f"recording-disjoint partitions: {disjoint}")
