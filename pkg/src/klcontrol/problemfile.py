"""YAML problem files.

Every file is a mapping with a ``kind`` field (``chain``, ``factored``,
``blocks`` or ``path-integral``).  Unknown fields are errors in strict mode
and warnings otherwise; all messages carry the field path and line number.
See ``problems/README.md`` for the schema of each kind.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from klcontrol import blocks, cvm, pathint
from klcontrol.chain import ChainProblem
from klcontrol.errors import ValidationError
from klcontrol.factored import Auxiliary, ComponentSpec, CostFactor, FactoredProblem, assemble

log = logging.getLogger(__name__)

KINDS = ("chain", "factored", "blocks", "path-integral")

CVM_FIELDS = {
    "inner_iterations", "outer_tolerance", "max_outer", "damping", "inner_tolerance",
    "consistency_tolerance", "retry_rounds",
}
SCHEMA: dict[str, dict] = {
    "chain": {
        "kind": None, "name": None, "horizon": None, "kernel": None, "state_cost": None, "start": None,
        "num_states": None,
    },
    "factored": {
        "kind": None, "name": None, "horizon": None, "initial_state": None, "solver": None,
        "absorb_forbidden": None, "cvm": CVM_FIELDS,
        "components": {"name", "cardinality", "kernel", "selectors", "mixture"},
        "auxiliaries": {"name", "cardinality", "table", "parents"},
        "factors": {"scope", "table", "times"},
    },
    "blocks": {
        "kind": None, "name": None, "n": None, "m": None, "horizon": None, "strength": None,
        "initial_state": None, "solver": None, "first_move_override": None, "cvm": CVM_FIELDS,
    },
    "path-integral": {
        "kind": None, "name": None, "dimension": None, "horizon": None, "noise_covariance": None,
        "x0": None, "num_samples": None, "seed": None, "controls": None,
        "drift": {"type", "A", "b"},
        "cost": {"type", "terminal", "running", "target"},
    },
}
REQUIRED = {
    "chain": ("horizon", "kernel", "state_cost", "start"),
    "factored": ("horizon", "components", "initial_state"),
    "blocks": ("n", "m", "horizon", "strength", "initial_state"),
    "path-integral": ("horizon", "noise_covariance", "x0"),
}


@dataclass
class ProblemFile:
    kind: str
    data: dict
    lines: dict = field(default_factory=dict)
    digest: str = ""
    warnings: list = field(default_factory=list)

    def line(self, *path) -> Optional[int]:
        return self.lines.get(tuple(path))

    def error(self, message: str, *path) -> ValidationError:
        where = "/".join(str(p) for p in path) or "<root>"
        ln = self.line(*path)
        return ValidationError(f"{where}{f' (line {ln})' if ln else ''}: {message}")


def _construct(node, path: tuple, lines: dict):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = yaml.safe_load(yaml.serialize(k)) if not isinstance(k, yaml.ScalarNode) else k.value
            out[key] = _construct(v, path + (key,), lines)
            lines[path + (key,)] = k.start_mark.line + 1
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_construct(v, path + (i,), lines) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def parse(text: str, strict: bool = True) -> ProblemFile:
    """Parse and schema-check a problem file without building the model."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise ValidationError(f"not valid YAML: {exc}") from exc
    lines: dict = {}
    data = _construct(node, (), lines) if node is not None else None
    if not isinstance(data, dict):
        raise ValidationError("problem file must be a mapping")
    pf = ProblemFile(str(data.get("kind")), data, lines, hashlib.sha256(text.encode()).hexdigest())
    if pf.kind not in KINDS:
        raise pf.error(f"unknown kind {data.get('kind')!r}; expected one of {', '.join(KINDS)}", "kind")
    schema = SCHEMA[pf.kind]

    def unknown(msg, *path):
        if strict:
            raise pf.error(msg, *path)
        text = str(pf.error(msg, *path))
        pf.warnings.append(text)
        log.warning("%s", text)

    for key, value in data.items():
        if key not in schema:
            unknown("unknown field", key)
            continue
        sub = schema[key]
        if sub is None:
            continue
        items = enumerate(value) if isinstance(value, list) else [(None, value)]
        for i, item in items:
            if not isinstance(item, dict):
                raise pf.error("expected a mapping", *([key] if i is None else [key, i]))
            for k2 in item:
                if k2 not in sub:
                    unknown("unknown field", *([key, k2] if i is None else [key, i, k2]))
    for key in REQUIRED[pf.kind]:
        if key not in data:
            raise pf.error(f"missing required field {key!r}")
    return pf


def load(path: str, strict: bool = True) -> ProblemFile:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), strict)


# -- builders -------------------------------------------------------------------


def _array(pf: ProblemFile, value, *path, ndim=None) -> np.ndarray:
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise pf.error(f"expected a numeric array ({exc})", *path) from exc
    if ndim is not None and a.ndim not in ((ndim,) if isinstance(ndim, int) else ndim):
        raise pf.error(f"expected an array of rank {ndim}, got rank {a.ndim}", *path)
    return a


def _int(pf: ProblemFile, value, *path) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise pf.error(f"expected an integer, got {value!r}", *path)
    return value


def _wrap(pf: ProblemFile, fn, *path):
    try:
        return fn()
    except ValidationError as exc:
        raise pf.error(str(exc), *path) from exc


def cvm_options(pf: ProblemFile) -> cvm.DoubleLoopOptions:
    opts = dict(pf.data.get("cvm") or {})
    defaults = cvm.DoubleLoopOptions()
    for k, v in opts.items():
        # YAML 1.1 reads "1e-5" as a string, so coerce to the option's type
        try:
            opts[k] = type(getattr(defaults, k))(v)
        except (TypeError, ValueError) as exc:
            raise pf.error(f"bad value {v!r}", "cvm", k) from exc
    return _wrap(pf, lambda: cvm.DoubleLoopOptions(**opts), "cvm")


def build_chain(pf: ProblemFile) -> tuple[ChainProblem, int]:
    d = pf.data
    T = _int(pf, d["horizon"], "horizon")
    kernel = _array(pf, d["kernel"], "kernel", ndim=(2, 3))
    cost = _array(pf, d["state_cost"], "state_cost", ndim=(1, 2))
    if kernel.ndim == 2:
        kernel = np.broadcast_to(kernel, (T,) + kernel.shape)
    if cost.ndim == 1:
        cost = np.broadcast_to(cost, (T + 1,) + cost.shape)
    if "num_states" in d and _int(pf, d["num_states"], "num_states") != kernel.shape[-1]:
        raise pf.error(f"num_states {d['num_states']} differs from kernel size {kernel.shape[-1]}", "num_states")
    prob = _wrap(pf, lambda: ChainProblem(np.array(kernel), np.array(cost)), "kernel")
    start = _int(pf, d["start"], "start")
    _wrap(pf, lambda: prob._check_state(start), "start")
    return prob, start


def build_factored(pf: ProblemFile) -> FactoredProblem:
    d = pf.data
    T = _int(pf, d["horizon"], "horizon")
    auxs = []
    for i, a in enumerate(d.get("auxiliaries") or []):
        auxs.append(_wrap(pf, lambda: Auxiliary(a["name"], int(a["cardinality"]), _array(pf, a["table"], "auxiliaries", i, "table"),
                                                tuple(a.get("parents", ()))), "auxiliaries", i))
    comps = []
    for i, c in enumerate(d["components"]):
        kw = {}
        if "kernel" in c:
            kw["kernel"] = _array(pf, c["kernel"], "components", i, "kernel")
        if "mixture" in c:
            kw["mixture"] = _array(pf, c["mixture"], "components", i, "mixture")
        comps.append(_wrap(pf, lambda: ComponentSpec(c["name"], int(c["cardinality"]),
                                                     selectors=tuple(c.get("selectors", ())), **kw),
                           "components", i))
    factors = []
    for i, f in enumerate(d.get("factors") or []):
        factors.append(_wrap(pf, lambda: CostFactor(tuple(f["scope"]), _array(pf, f["table"], "factors", i, "table"),
                                                    f.get("times")), "factors", i))
    return _wrap(pf, lambda: assemble(comps, auxs, factors, T, d["initial_state"],
                                      bool(d.get("absorb_forbidden", False))), "components")


def build_blocks(pf: ProblemFile, solver: Optional[str] = None) -> blocks.BlocksConfig:
    d = pf.data
    n, m = _int(pf, d["n"], "n"), _int(pf, d["m"], "m")
    x0 = d["initial_state"]
    if x0 == "symmetric":
        x0 = _wrap(pf, lambda: blocks.symmetric_initial_state(n, m), "initial_state")
    override = d.get("first_move_override")
    return _wrap(pf, lambda: blocks.BlocksConfig(
        n, m, _int(pf, d["horizon"], "horizon"), float(d["strength"]), tuple(x0),
        solver or d.get("solver", "exact"),
        tuple(override) if override is not None else None,
        cvm_options(pf),
    ))


@dataclass(frozen=True)
class PathIntegralSetup:
    dynamics: pathint.ContinuousDynamics
    cost: pathint.PathCostSpec
    x0: np.ndarray
    num_samples: int
    seed: int
    schedule: Optional[pathint.ControlSchedule]


def build_path_integral(pf: ProblemFile, seed: Optional[int] = None) -> PathIntegralSetup:
    d = pf.data
    T = _int(pf, d["horizon"], "horizon")
    nu = _array(pf, d["noise_covariance"], "noise_covariance", ndim=2)
    n = int(d.get("dimension", nu.shape[0]))
    drift = d.get("drift") or {"type": "linear"}
    if drift.get("type", "linear") != "linear":
        raise pf.error(f"unknown drift type {drift.get('type')!r}; built-in: linear", "drift", "type")
    f = pathint.linear_drift(drift.get("A"), drift.get("b"), n)
    spec = d.get("cost") or {"type": "quadratic"}
    if spec.get("type", "quadratic") != "quadratic":
        raise pf.error(f"unknown cost type {spec.get('type')!r}; built-in: quadratic", "cost", "type")
    cost = pathint.quadratic_cost(T, spec.get("terminal"), spec.get("running"), spec.get("target"), n)
    dyn = _wrap(pf, lambda: pathint.ContinuousDynamics(f, nu), "noise_covariance")
    sched = None
    if d.get("controls") is not None:
        sched = _wrap(pf, lambda: pathint.ControlSchedule(_array(pf, d["controls"], "controls")), "controls")
    return PathIntegralSetup(
        dyn, cost, _array(pf, d["x0"], "x0", ndim=1),
        _int(pf, d.get("num_samples", 10000), "num_samples"),
        int(seed if seed is not None else d.get("seed", 0)), sched,
    )
