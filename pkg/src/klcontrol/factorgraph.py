"""Discrete factor graphs and their JSON text format.

The format is a single JSON object::

    {
      "format": "klcontrol-factor-graph/1",
      "log_offset": -0.0,
      "variables": [{"name": "x1@1", "cardinality": 3}, ...],
      "factors": [{"scope": ["x1@1", "x1@2"], "table": [...]}, ...]
    }

Tables are nonnegative potentials flattened in row-major (C) order over
``scope``.  The product of all factor tables times ``exp(log_offset)`` is the
unnormalised distribution the graph represents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from klcontrol.errors import ValidationError

FORMAT_TAG = "klcontrol-factor-graph/1"


@dataclass(frozen=True)
class Factor:
    scope: tuple[str, ...]
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        object.__setattr__(self, "scope", tuple(self.scope))
        if table.ndim != len(self.scope):
            raise ValidationError(f"factor over {self.scope} has table of rank {table.ndim}")
        if len(set(self.scope)) != len(self.scope):
            raise ValidationError(f"factor scope {self.scope} repeats a variable")
        if np.any(table < 0) or not np.all(np.isfinite(table)):
            raise ValidationError(f"factor over {self.scope} has negative or non-finite entries")
        object.__setattr__(self, "table", table)


@dataclass
class FactorGraph:
    cardinalities: dict[str, int]
    factors: list[Factor] = field(default_factory=list)
    log_offset: float = 0.0

    def __post_init__(self):
        for f in self.factors:
            self._check(f)

    def _check(self, f: Factor) -> None:
        for v, c in zip(f.scope, f.table.shape):
            if v not in self.cardinalities:
                raise ValidationError(f"factor references undeclared variable {v!r}")
            if self.cardinalities[v] != c:
                raise ValidationError(
                    f"variable {v!r} has cardinality {self.cardinalities[v]}, factor axis has {c}"
                )

    def add(self, scope, table) -> None:
        f = Factor(tuple(scope), table)
        self._check(f)
        self.factors.append(f)

    @property
    def variables(self) -> list[str]:
        return list(self.cardinalities)

    def log_weight(self, assignment: dict[str, int]) -> float:
        """Log of the unnormalised weight of a full assignment (``-inf`` for zeros)."""
        total = self.log_offset
        for f in self.factors:
            v = f.table[tuple(assignment[name] for name in f.scope)]
            if v == 0:
                return -np.inf
            total += np.log(v)
        return float(total)

    def to_json(self) -> str:
        doc = {
            "format": FORMAT_TAG,
            "log_offset": self.log_offset,
            "variables": [{"name": k, "cardinality": int(v)} for k, v in self.cardinalities.items()],
            "factors": [
                {"scope": list(f.scope), "table": [float(v) for v in f.table.ravel()]}
                for f in self.factors
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FactorGraph":
        doc = json.loads(text)
        if doc.get("format") != FORMAT_TAG:
            raise ValidationError(f"unknown factor graph format {doc.get('format')!r}")
        cards = {v["name"]: int(v["cardinality"]) for v in doc["variables"]}
        fg = cls(cards, [], float(doc.get("log_offset", 0.0)))
        for i, f in enumerate(doc["factors"]):
            shape = tuple(cards[v] for v in f["scope"])
            table = np.asarray(f["table"], dtype=float)
            if table.size != int(np.prod(shape, dtype=int)):
                raise ValidationError(f"factor {i}: table has {table.size} entries, expected {shape}")
            fg.add(f["scope"], table.reshape(shape))
        return fg
