"""Independent reference computations used by the tests (quadrature, brute force)."""
import math
from fractions import Fraction

import numpy as np
from scipy import integrate, stats

SIGMA_SPAN = 14.0


def _expect(fn, mean, var, lower=-math.inf):
    """E[fn(X)], X ~ N(mean, var), by adaptive quadrature over +-14 sd (clipped at ``lower``)."""
    sd = math.sqrt(var)
    a = max(mean - SIGMA_SPAN * sd, lower)
    b = mean + SIGMA_SPAN * sd
    if b <= a:
        return 0.0
    pts = [p for p in (0.0, mean) if a < p < b]
    val, _ = integrate.quad(lambda x: fn(x) * stats.norm.pdf(x, mean, sd), a, b,
                            points=pts or None, epsabs=1e-14, epsrel=1e-13, limit=400)
    return val


def relu_quadrature(mean, var):
    if var == 0:
        return max(mean, 0.0), 0.0
    m1 = _expect(lambda x: x, mean, var, lower=0.0)
    m2 = _expect(lambda x: x * x, mean, var, lower=0.0)
    return m1, m2 - m1 * m1


def _sig(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


def sigmoid_quadrature(mean, var):
    if var == 0:
        s = _sig(mean)
        return s, 0.0
    m1 = _expect(_sig, mean, var)
    m2 = _expect(lambda x: _sig(x) ** 2, mean, var)
    return m1, m2 - m1 * m1


def neg_log_sigmoid_quadrature(mean, var):
    """E[-log sig(Z)] = E[softplus(-Z)]."""
    return _expect(lambda z: math.log1p(math.exp(-z)) if z > -30 else -z, mean, var)


# Brute-force metric oracles: every threshold or pair enumerated, exact rationals.

def au_pr_brute(scores, labels):
    pos = sum(labels)
    if pos == 0:
        return None
    terms, prev_tp = [], 0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        k = sum(1 for s in scores if s >= t)
        if tp > prev_tp:
            terms.append(Fraction(tp - prev_tp, pos) * Fraction(tp, k))
        prev_tp = tp
    return terms


def au_roc_brute(scores, labels):
    p = [s for s, y in zip(scores, labels) if y == 1]
    n = [s for s, y in zip(scores, labels) if y == 0]
    if not p or not n:
        return None
    wins = sum(Fraction(1) if a > b else Fraction(1, 2) if a == b else Fraction(0) for a in p for b in n)
    return wins / (len(p) * len(n))


def f1_brute(scores, labels, threshold=0.5):
    out = []
    for cls in (1, 0):
        tp = sum(1 for s, y in zip(scores, labels) if (s >= threshold) == (cls == 1) and y == cls)
        fp = sum(1 for s, y in zip(scores, labels) if (s >= threshold) == (cls == 1) and y != cls)
        fn = sum(1 for s, y in zip(scores, labels) if (s >= threshold) != (cls == 1) and y == cls)
        out.append(Fraction(0) if tp == 0 else Fraction(2 * tp, 2 * tp + fp + fn))
    return (out[0] + out[1]) / 2


def ece_brute(scores, labels, buckets=10):
    """Per-bucket enumeration with edges at the doubles nearest 0.5 + b/20.

    Buckets are right-inclusive and the first one is closed.
    """
    n = len(scores)
    if n == 0:
        return []
    edges = [float(Fraction(1, 2) + Fraction(b, 2 * buckets)) for b in range(buckets + 1)]
    terms = []
    for b in range(buckets):
        members = []
        for s, y in zip(scores, labels):
            conf = max(s, 1.0 - s)
            inside = (edges[b] <= conf if b == 0 else edges[b] < conf) and conf <= edges[b + 1]
            if inside:
                members.append((conf, int((s >= 0.5) == (y == 1))))
        if members:
            correct = sum(k for _, k in members)
            terms.append((correct, [c for c, _ in members]))
    return terms


def ece_value(terms, n):
    return math.fsum(abs(c - math.fsum(confs)) / n for c, confs in terms)


def weighted_brute(values, counts):
    pairs = [(Fraction(c), Fraction(v)) for v, c in zip(values, counts) if v is not None and c > 0]
    total = sum(c for c, _ in pairs)
    return sum(c * v for c, v in pairs) / total


def random_scored_set(rng: np.random.Generator, max_size=50):
    n = int(rng.integers(1, max_size + 1))
    # coarse grids make ties common; exact 0.5 and bucket edges appear too
    kind = rng.integers(0, 3)
    if kind == 0:
        s = rng.integers(0, 21, size=n) / 20
    elif kind == 1:
        s = rng.integers(0, 5, size=n) / 4
    else:
        s = rng.random(n)
    y = (rng.random(n) < rng.random()).astype(int)
    return s.tolist(), y.tolist()


# Random annotation layouts for the segmentation invariants.

SPECIES = ("owl", "frog", "bat")


def random_layout(rng: np.random.Generator, rec_id="rec", length=3.0):
    from uasmooth.segmentation import Annotation, Recording

    duration = float(rng.choice([rng.uniform(length, 12.0), rng.uniform(12.0, 90.0)]))
    calls = []
    for _ in range(int(rng.integers(0, 9))):
        kind = rng.random()
        if kind < 0.6:
            d = rng.uniform(0.05, length)
        elif kind < 0.7:
            d = length
        else:
            d = rng.uniform(length, min(4 * length, duration))
        d = min(d, duration)
        start = float(rng.uniform(0.0, duration - d))
        species = str(rng.choice(SPECIES + ("noise",)))
        calls.append(Annotation(rec_id, start, min(start + d, duration), species))
    return Recording(rec_id, duration, calls)
