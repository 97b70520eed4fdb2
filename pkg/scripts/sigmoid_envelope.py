"""Measure the sigmoid moment approximation against adaptive quadrature.

Reports the largest absolute mean and variance errors over a grid of input
means and variances; these bound the envelope used by the Monte-Carlo oracle.

    python scripts/sigmoid_envelope.py [--phi 6] [--lam 10]
"""
import argparse

import numpy as np
import torch
from scipy import integrate, special

from uasmooth.activations import sigmoid_moments
from uasmooth.gaussian import DTYPE, GaussianTensor
from uasmooth.oracle import SIGMOID_ENVELOPE


def quadrature(mean: float, var: float) -> tuple[float, float]:
    if var == 0:
        s = special.expit(mean)
        return s, 0.0
    sd = np.sqrt(var)

    def moment(k):
        f = lambda z: special.expit(mean + sd * z) ** k * np.exp(-z * z / 2) / np.sqrt(2 * np.pi)
        return integrate.quad(f, -14, 14, epsabs=1e-14, limit=200)[0]

    m1 = moment(1)
    return m1, moment(2) - m1 * m1


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--phi", type=float, default=6.0, help="means span [-phi, phi]")
    p.add_argument("--lam", type=float, default=10.0, help="variances span [0, lam]")
    p.add_argument("--points", type=int, default=41)
    args = p.parse_args()
    phis = np.linspace(-args.phi, args.phi, args.points)
    lams = np.linspace(0, args.lam, args.points)
    grid = np.array([(a, b) for a in phis for b in lams])
    out = sigmoid_moments(GaussianTensor(torch.tensor(grid[:, 0], dtype=DTYPE), torch.tensor(grid[:, 1], dtype=DTYPE)))
    ref = np.array([quadrature(a, b) for a, b in grid])
    err_m = np.abs(out.mean.numpy() - ref[:, 0])
    err_v = np.abs(out.var.numpy() - ref[:, 1])
    for name, err in (("mean", err_m), ("var", err_v)):
        i = int(err.argmax())
        print(f"max |{name} error| {err[i]:.5f} at phi={grid[i, 0]:+.2f} lam={grid[i, 1]:.2f} "
              f"(envelope {SIGMOID_ENVELOPE[name]})")


if __name__ == "__main__":
    main()
