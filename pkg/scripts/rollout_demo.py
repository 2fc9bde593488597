"""Receding-horizon stacking rollout with marginal grids written as CSV and PGM.

    python scripts/rollout_demo.py problems/blocks_stack.yaml -o out/rollout
    python scripts/rollout_demo.py problems/blocks_demo_large.yaml -o out/large --max-steps 3

The second form is the large CVM demo; a full run takes many hours.
"""

import argparse
import logging
import os
import sys

from klcontrol import blocks, problemfile
from klcontrol.cli import atomic_write


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("problem")
    ap.add_argument("-o", "--output", required=True)
    ap.add_argument("--max-steps", type=int, default=None)
    ap.add_argument("--solver", choices=("exact", "cvm"), default=None)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    config = problemfile.build_blocks(problemfile.load(args.problem), args.solver)
    os.makedirs(args.output, exist_ok=True)
    trace = blocks.receding_horizon_rollout(config, args.max_steps)
    atomic_write(os.path.join(args.output, "rollout.csv"), trace.to_csv())
    # posterior grids of the first plan, one column per slice
    if trace.steps:
        first = trace.steps[0].plan
        for name, grid in blocks.marginal_grids(first).items():
            start = 0 if name == "expected_heights" else 1
            atomic_write(os.path.join(args.output, f"plan_{name}.csv"),
                         blocks.grid_to_csv(grid, range(1, grid.shape[0] + 1), start))
            atomic_write(os.path.join(args.output, f"plan_{name}.pgm"), blocks.grid_to_pgm(grid))
    print(f"{trace.num_moves} moves, final state {trace.states[-1]}, goal reached: {trace.reached_goal}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
