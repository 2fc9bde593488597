"""Command-line runner: ``klcontrol run|rollout|sample|compare``.

Exit codes: 0 ok, 1 error (invalid input, solver failure), 2 usage error,
3 solver finished without converging.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import resource
import sys
import tempfile
import time
from typing import Optional

import numpy as np

from klcontrol import __version__, blocks, chain, cvm, pathint, problemfile
from klcontrol.errors import ValidationError
from klcontrol.factored import auxiliary_marginals, export_factor_graph, flatten, variable_name

log = logging.getLogger("klcontrol")

EXIT_OK, EXIT_ERROR, EXIT_NONCONVERGED = 0, 1, 3


def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to a temp file next to ``path`` and rename it into place."""
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def marginals_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variable", "t", "value", "probability"])
    for var, t, value, prob in rows:
        w.writerow([var, t, value, repr(float(prob))])
    return buf.getvalue()


def read_marginals(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return {(r["variable"], int(r["t"]), r["value"]): float(r["probability"]) for r in csv.DictReader(fh)}


class Result:
    """What a solve produced: status, cost and named text artifacts."""

    def __init__(self, solver: str, options: Optional[dict] = None):
        self.solver = solver
        self.options = options or {}
        self.status = "ok"
        self.diagnostic = ""
        self.cost: Optional[float] = None
        self.extra: dict = {}
        self.artifacts: dict[str, str] = {}


# -- per-kind runners -------------------------------------------------------------


def _run_chain(pf, args) -> Result:
    prob, start = problemfile.build_chain(pf)
    res = Result("exact")
    sol = chain.solve(prob, start)
    res.cost = sol.optimal_cost
    marg = chain.state_marginals(sol)
    res.artifacts["solution.csv"] = sol.to_csv()
    res.artifacts["messages.csv"] = chain.backward_pass(chain.build_potentials(prob)).to_csv()
    res.artifacts["marginals.csv"] = marginals_csv(
        ("x", t, x, marg[t, x]) for t in range(marg.shape[0]) for x in range(marg.shape[1])
    )
    return res


def _cvm_solve(fg, options: cvm.DoubleLoopOptions, res: Result):
    out = cvm.solve_factor_graph(fg, options)
    res.status = "ok" if out.converged else "non-converged"
    res.diagnostic = out.diagnostic
    res.cost = out.free_energy - fg.log_offset
    res.extra.update(outer_iterations=out.outer_iterations, max_violation=out.max_violation)
    res.artifacts["trace.csv"] = "iteration,free_energy\n" + "".join(
        f"{i},{v!r}\n" for i, v in enumerate(out.trace))
    return out


def _run_factored(pf, args) -> Result:
    prob = problemfile.build_factored(pf)
    solver = args.solver or pf.data.get("solver", "exact")
    names = prob.names + [a.name for a in prob.auxiliaries]
    T = prob.horizon
    if solver == "exact":
        res = Result("exact")
        flat = flatten(prob)
        sol = chain.solve(flat.chain, flat.index(prob.initial_state))
        res.cost = sol.optimal_cost
        comp = flat.component_marginals(chain.state_marginals(sol))
        pm = chain.pair_marginals(sol)
        rows = []
        aux = {a.name: auxiliary_marginals(flat, pm, (a.name,)) for a in prob.auxiliaries}
        for t in range(1, T + 1):
            for name, m in zip(prob.names, comp):
                rows += [(name, t, v, p) for v, p in enumerate(m[t])]
            for name, m in aux.items():
                rows += [(name, t, v, p) for v, p in enumerate(m[t - 1])]
    elif solver == "cvm":
        opts = problemfile.cvm_options(pf)
        res = Result("cvm", vars(opts))
        fg = export_factor_graph(prob)
        res.artifacts["factor_graph.json"] = fg.to_json() + "\n"
        out = _cvm_solve(fg, opts, res)
        rows = []
        for t in range(1, T + 1):
            for name in names:
                m, _ = cvm.marginals(out.beliefs, variable_name(name, t))
                rows += [(name, t, v, p) for v, p in enumerate(m)]
    else:
        raise ValidationError(f"unknown solver {solver!r}")
    res.artifacts["marginals.csv"] = marginals_csv(rows)
    return res


def _plan_artifacts(p: blocks.Plan, res: Result, prefix: str = "") -> None:
    n = p.moves.shape[1]
    grids = blocks.marginal_grids(p)
    labels = {
        "p_k": [f"k={k}" for k in range(1, n + 1)],
        "p_l": [f"l={l:+d}" for l in blocks.DIRECTIONS],
        "expected_heights": [f"x{i}" for i in range(1, n + 1)],
    }
    for name, grid in grids.items():
        first = 0 if name == "expected_heights" else 1
        res.artifacts[f"{prefix}{name}.csv"] = blocks.grid_to_csv(grid, labels[name], first)
        res.artifacts[f"{prefix}{name}.pgm"] = blocks.grid_to_pgm(grid)


def _run_blocks(pf, args) -> Result:
    config = problemfile.build_blocks(pf, args.solver)
    res = Result(config.solver, vars(config.cvm_options) if config.solver == "cvm" else {})
    p = blocks.plan(config)
    res.status = "ok" if p.status == "ok" else "non-converged"
    res.diagnostic = p.diagnostic
    res.cost = p.cost
    res.artifacts["marginals.csv"] = marginals_csv(blocks.marginal_rows(p))
    _plan_artifacts(p, res)
    return res


def _run_path_integral(pf, args) -> Result:
    setup = problemfile.build_path_integral(pf, args.seed)
    res = Result("monte-carlo", {"num_samples": setup.num_samples, "block": pathint.BLOCK})
    est = pathint.mc_optimal_cost(setup.dynamics, setup.cost, setup.x0, setup.num_samples, setup.seed,
                                  args.threads)
    res.cost = est.value
    res.extra["standard_error"] = est.standard_error
    rows = [("optimal_cost", est)]
    if setup.schedule is not None:
        ec = pathint.expected_cost(setup.schedule, setup.dynamics, setup.cost, setup.x0,
                                   setup.num_samples, setup.seed, args.threads)
        rows.append(("expected_cost_of_schedule", ec))
        if ec.num_nonfinite:
            res.diagnostic = f"{ec.num_nonfinite} sampled paths had non-finite cost"
    text = "quantity,estimate,standard_error,num_samples,num_nonfinite\n" + "".join(
        f"{q},{e.value!r},{e.standard_error!r},{e.num_samples},{e.num_nonfinite}\n" for q, e in rows)
    res.artifacts["estimate.csv"] = text
    return res


RUNNERS = {
    "chain": _run_chain,
    "factored": _run_factored,
    "blocks": _run_blocks,
    "path-integral": _run_path_integral,
}


def _rollout(pf, args) -> Result:
    if pf.kind != "blocks":
        raise ValidationError(f"rollout needs a blocks problem, got kind {pf.kind!r}")
    config = problemfile.build_blocks(pf, args.solver)
    res = Result(config.solver, vars(config.cvm_options) if config.solver == "cvm" else {})
    trace = blocks.receding_horizon_rollout(config, getattr(args, "max_steps", None))
    res.status = trace.status
    if trace.status != "ok":
        res.diagnostic = "; ".join(f"t={s.t}: {s.plan.diagnostic}" for s in trace.steps if s.plan.status != "ok")
    res.cost = None
    res.extra.update(num_moves=trace.num_moves, reached_goal=trace.reached_goal,
                     final_state=list(trace.states[-1]))
    res.artifacts["rollout.csv"] = trace.to_csv()
    if trace.steps:
        # one column per executed step: the first-slice marginals it was chosen from
        pk = np.stack([s.plan.p_k[0] for s in trace.steps], axis=1)
        pl = np.stack([s.plan.p_l[0] for s in trace.steps], axis=1)
        heights = np.array(trace.states, dtype=float).T
        n = config.n
        res.artifacts["rollout_p_k.csv"] = blocks.grid_to_csv(pk, [f"k={k}" for k in range(1, n + 1)])
        res.artifacts["rollout_p_l.csv"] = blocks.grid_to_csv(pl, [f"l={l:+d}" for l in blocks.DIRECTIONS])
        res.artifacts["rollout_heights.csv"] = blocks.grid_to_csv(heights, [f"x{i}" for i in range(1, n + 1)], 0)
        res.artifacts["rollout_p_k.pgm"] = blocks.grid_to_pgm(pk, vmax=1.0)
        res.artifacts["rollout_p_l.pgm"] = blocks.grid_to_pgm(pl, vmax=1.0)
        res.artifacts["rollout_heights.pgm"] = blocks.grid_to_pgm(heights, vmax=config.m)
    return res


def _sample(pf, args) -> Result:
    if pf.kind != "path-integral":
        raise ValidationError(f"sample needs a path-integral problem, got kind {pf.kind!r}")
    res = _run_path_integral(pf, args)
    setup = problemfile.build_path_integral(pf, args.seed)
    costs = pathint.sample_path_costs(setup.dynamics, setup.cost, setup.x0, setup.num_samples,
                                      setup.seed, None, args.threads)
    res.artifacts["samples.csv"] = "path,state_cost\n" + "".join(f"{i},{c!r}\n" for i, c in enumerate(costs))
    return res


# -- manifest ---------------------------------------------------------------------


def _peak_memory_mb() -> float:
    kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return kb / 1024.0 if platform.system() == "Linux" else kb / 2 ** 20


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return str(v)
    return v


def execute(command: str, args) -> int:
    start = time.perf_counter()
    os.makedirs(args.output, exist_ok=True)
    manifest = {
        "command": command,
        "problem_file": os.path.abspath(args.problem),
        "input_digest": None,
        "kind": None,
        "solver": None,
        "solver_options": {},
        "status": "error",
        "diagnostic": "",
        "cost": None,
        "artifacts": [],
        "seed": args.seed,
        "threads": args.threads,
        "version": __version__,
    }
    code = EXIT_ERROR
    try:
        pf = problemfile.load(args.problem, strict=args.strict)
        manifest["input_digest"] = "sha256:" + pf.digest
        manifest["kind"] = pf.kind
        if pf.warnings:
            manifest["warnings"] = pf.warnings
        runner = {"run": RUNNERS.get(pf.kind), "rollout": _rollout, "sample": _sample}[command]
        res = runner(pf, args)
        for name, text in sorted(res.artifacts.items()):
            atomic_write(os.path.join(args.output, name), text)
        manifest.update(
            solver=res.solver, solver_options={k: _jsonable(v) for k, v in res.options.items()},
            status=res.status, diagnostic=res.diagnostic,
            cost=_jsonable(res.cost) if res.cost is not None else None,
            artifacts=sorted(res.artifacts), **{k: _jsonable(v) for k, v in res.extra.items()},
        )
        code = EXIT_OK if res.status == "ok" else EXIT_NONCONVERGED
        if code == EXIT_NONCONVERGED and not res.diagnostic:
            manifest["diagnostic"] = "solver did not converge"
    except (ValidationError, ValueError, RuntimeError, OSError) as exc:
        manifest["diagnostic"] = f"{type(exc).__name__}: {exc}"
        print(f"error: {exc}", file=sys.stderr)
    manifest["wall_seconds"] = time.perf_counter() - start
    manifest["peak_memory_mb"] = _peak_memory_mb()
    atomic_write(os.path.join(args.output, "manifest.json"), json.dumps(manifest, indent=2) + "\n")
    print(json.dumps({k: manifest[k] for k in ("status", "cost", "diagnostic")}))
    return code


def compare(exact_manifest: str, approx_manifest: str) -> dict:
    """Largest absolute single-variable marginal error, over all slices and over the first slice."""
    maps = []
    for path in (exact_manifest, approx_manifest):
        with open(path, encoding="utf-8") as fh:
            man = json.load(fh)
        if "marginals.csv" not in man.get("artifacts", []):
            raise ValidationError(f"{path} does not reference a marginals.csv artifact")
        maps.append(read_marginals(os.path.join(os.path.dirname(path), "marginals.csv")))
    a, b = maps
    if set(a) != set(b):
        only = sorted(set(a) ^ set(b))[:5]
        raise ValidationError(f"marginal variable sets differ, e.g. {only}")
    first = min(t for _, t, _ in a)
    err = {k: abs(a[k] - b[k]) for k in a}
    return {
        "max_error": max(err.values()),
        "max_error_first_slice": max(v for k, v in err.items() if k[1] == first),
        "first_slice": first,
        "num_entries": len(err),
    }


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(prog="klcontrol", description="KL control solvers and experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("run", "solve a problem file"), ("rollout", "receding-horizon blocks rollout"),
                        ("sample", "dump path-integral samples")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("problem")
        p.add_argument("-o", "--output", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--solver", choices=("exact", "cvm"), default=None)
        if name == "rollout":
            p.add_argument("--max-steps", type=int, default=None, help="stop after this many re-plans")
        mode = p.add_mutually_exclusive_group()
        mode.add_argument("--strict", dest="strict", action="store_true", default=True,
                          help="reject unknown fields (default)")
        mode.add_argument("--lenient", dest="strict", action="store_false", help="warn on unknown fields")
    p = sub.add_parser("compare", help="marginal errors between two run manifests")
    p.add_argument("exact")
    p.add_argument("approx")
    p.add_argument("-o", "--output", default=None, help="write the report as JSON here")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "compare":
        try:
            report = compare(args.exact, args.approx)
        except (ValidationError, OSError, KeyError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ERROR
        text = json.dumps(report, indent=2) + "\n"
        if args.output:
            atomic_write(args.output, text)
        sys.stdout.write(text)
        return EXIT_OK
    if args.threads < 1:
        parser.error("--threads must be positive")
    return execute(args.command, args)


if __name__ == "__main__":
    sys.exit(main())
