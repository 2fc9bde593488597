"""Convergence of the path-integral cost estimates on the 1D quadratic problem.

Prints the Monte Carlo RMS error against the closed form for sample counts
over several decades (with the fitted log-log slope), and the grid
discretisation error of the exact chain solver as the spacing shrinks.

    python scripts/path_integral_convergence.py --seeds 30
"""

import argparse
import sys

import numpy as np

from klcontrol import chain, pathint


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--alpha", type=float, default=1.0)
    ap.add_argument("--horizon", type=int, default=3)
    ap.add_argument("--x0", type=float, default=0.5)
    ap.add_argument("--seeds", type=int, default=30)
    args = ap.parse_args(argv)
    dyn = pathint.ContinuousDynamics(pathint.linear_drift(dimension=1), np.eye(1))
    cost = pathint.quadratic_cost(args.horizon, terminal=args.alpha)
    exact = pathint.quadratic_terminal_optimal_cost(args.alpha, args.horizon, args.x0)
    print(f"closed form -log Z = {exact:.6f}")

    sizes = [100, 1000, 10_000, 100_000]
    rms = []
    for n in sizes:
        err = [pathint.mc_optimal_cost(dyn, cost, [args.x0], n, s).value - exact for s in range(args.seeds)]
        rms.append(float(np.sqrt(np.mean(np.square(err)))))
        print(f"samples {n:>7}: rms error {rms[-1]:.2e}")
    slope = np.polyfit(np.log10(sizes), np.log10(rms), 1)[0]
    print(f"log-log slope {slope:.3f} (expected -0.5)")

    for h in (0.8, 0.4, 0.2, 0.1, 0.05):
        prob, start = pathint.discretize_1d(dyn, cost, args.x0, pathint.uniform_grid(args.x0, 10.0, h))
        value = chain.solve(prob, start).optimal_cost
        print(f"grid spacing {h:<5}: -log Z = {value:.6f}, error {abs(value - exact):.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
