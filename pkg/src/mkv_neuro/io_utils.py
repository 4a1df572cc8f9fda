"""CSV and JSON emission with locale-independent, shortest round-trip
numeric formatting (repr of the Python float)."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        v = float(x)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(x)


def write_csv(path, header: str, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(fmt(x) for x in row) + "\n")


def write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def grid_measure_rows(mu):
    for wj, pj in zip(mu.w, mu.p):
        yield (wj, pj)


def lift_rows(lift):
    """Row-major dump of the 2-D invariant-density grid."""
    v = lift["v"]
    w = lift["w"]
    H = lift["density"]
    for i in range(v.size):
        for j in range(w.size):
            yield (v[i], w[j], H[i, j])


def rate_grid_rows(sol):
    """Simplex dump of a jump-rate solution: one row per (s, t), s <= t."""
    for a in range(sol.s_grid.size):
        for b in range(a, sol.t_grid.size):
            yield (sol.s_grid[a], sol.t_grid[b], sol.p[a, b], sol.r[a, b])
