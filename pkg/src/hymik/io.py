"""Graph and count-data files, bundled assets, and the JSON report format."""

from __future__ import annotations

import csv
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .likelihoods import ObservationSet
from .structures import Graph, StructureError

__all__ = [
    "ParseError",
    "AsymmetricAdjacency",
    "MissingCell",
    "NegativeCount",
    "load_graph",
    "write_graph",
    "load_counts",
    "write_counts",
    "data_path",
    "dumps_report",
    "loads_report",
]


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class AsymmetricAdjacency(ParseError):
    pass


class MissingCell(ValueError):
    pass


class NegativeCount(ValueError):
    pass


def data_path(name: str) -> Path:
    """Path of a bundled data file (``germany.graph``, ``covid.graph``, ``covid_sample.csv``)."""
    return Path(str(resources.files("hymik") / "data" / name))


def load_graph(path) -> Graph:
    """Read ``n`` then lines ``node_id degree nb_1 ... nb_degree`` (0-based ids)."""
    with open(path) as fh:
        lines = [(i + 1, ln.split()) for i, ln in enumerate(fh)]
    lines = [(i, t) for i, t in lines if t and not t[0].startswith("#")]
    if not lines:
        raise ParseError("empty graph file")
    try:
        ln, tok = lines[0]
        n = int(tok[0])
    except ValueError:
        raise ParseError("first line must hold the node count", lines[0][0]) from None
    if n <= 0:
        raise ParseError("node count must be positive", ln)
    nb = [None] * n
    for ln, tok in lines[1:]:
        try:
            vals = [int(t) for t in tok]
        except ValueError:
            raise ParseError("non-integer token", ln) from None
        if len(vals) < 2:
            raise ParseError("expected 'node_id degree neighbours...'", ln)
        node, deg, rest = vals[0], vals[1], vals[2:]
        if not 0 <= node < n:
            raise ParseError(f"node id {node} outside [0, {n})", ln)
        if deg != len(rest):
            raise ParseError(f"degree {deg} but {len(rest)} neighbours listed", ln)
        if nb[node] is not None:
            raise ParseError(f"node {node} listed twice", ln)
        if any(not 0 <= j < n for j in rest):
            raise ParseError("neighbour id out of range", ln)
        if node in rest:
            raise ParseError(f"node {node} lists itself", ln)
        nb[node] = rest
    missing = [i for i, v in enumerate(nb) if v is None]
    if missing:
        raise ParseError(f"{len(missing)} nodes have no line (first: {missing[0]})")
    sets = [set(v) for v in nb]
    for i, v in enumerate(sets):
        for j in v:
            if i not in sets[j]:
                raise AsymmetricAdjacency(f"edge {i} -> {j} has no reverse {j} -> {i}")
    try:
        return Graph(n, tuple(nb))
    except StructureError as err:
        raise ParseError(str(err)) from None


def write_graph(g: Graph, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{g.n_nodes}\n")
        for i, v in enumerate(g.neighbors):
            fh.write(" ".join(map(str, [i, len(v), *v.tolist()])) + "\n")


def load_counts(path, family: str = "poisson", cumulative: bool = False,
                n_S: int | None = None) -> ObservationSet:
    """Read ``time,region,count,exposure[,replicate]`` rows.

    Times are 1..n_T, regions 0-based. Every (time, region) cell must appear
    at least once. With ``cumulative=True`` each region's series (one row per
    cell) is differenced into daily counts and negative increments are set to 0.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"time", "region", "count", "exposure"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ParseError(f"header must contain {sorted(need)}", 1)
        for k, rec in enumerate(reader, start=2):
            try:
                t, s = int(rec["time"]), int(rec["region"])
                y, e = float(rec["count"]), float(rec["exposure"])
            except (TypeError, ValueError):
                raise ParseError("malformed row", k) from None
            if y < 0:
                raise NegativeCount(f"line {k}: count {y} < 0")
            if t < 1 or s < 0:
                raise ParseError("time must be >= 1 and region >= 0", k)
            rows.append((t, s, y, e))
    if not rows:
        raise ParseError("no data rows")
    arr = np.array(rows)
    t = arr[:, 0].astype(int) - 1
    s = arr[:, 1].astype(int)
    y, E = arr[:, 2], arr[:, 3]
    n_T = int(t.max()) + 1
    n_S = int(s.max()) + 1 if n_S is None else n_S
    if s.max() >= n_S:
        raise ParseError(f"region index {s.max()} outside graph with {n_S} nodes")
    present = np.zeros((n_T, n_S), dtype=bool)
    present[t, s] = True
    if not present.all():
        tt, ss = np.argwhere(~present)[0]
        raise MissingCell(f"no observation for time {tt + 1}, region {ss}")
    cell = t * n_S + s
    if cumulative:
        if np.bincount(cell, minlength=n_T * n_S).max() > 1:
            raise ParseError("cumulative series need exactly one row per cell")
        order = np.argsort(cell, kind="stable")
        Y = np.empty(n_T * n_S)
        Y[cell[order]] = y[order]
        Y = Y.reshape(n_T, n_S)
        daily = np.diff(Y, axis=0, prepend=0.0)
        y = np.maximum(daily, 0.0).ravel()[cell]
    return ObservationSet(y, E, cell, n_T, n_S, family)


def write_counts(path, obs: ObservationSet, replicate=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "region", "count", "exposure"] + (["replicate"] if replicate is not None else []))
        t, s = np.divmod(obs.cell, obs.n_S)
        for i in range(obs.n_obs):
            row = [int(t[i]) + 1, int(s[i]), int(obs.y[i]), _fmt(obs.E[i])]
            if replicate is not None:
                row.append(int(replicate[i]))
            w.writerow(row)


# -- report serialization ---------------------------------------------------------

def _fmt(x: float) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = "%.17g" % x
    if "." not in s and "e" not in s and "n" not in s:
        s += ".0"
    return s


def _dump(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, float, np.integer, np.floating)):
        return _fmt(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_dump(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)
               for v in obj):
            return "[" + ", ".join(_fmt(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _dump(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_report(doc: dict, indent: int = 1) -> str:
    """Deterministic JSON with floats written to 17 significant digits."""
    return _dump(doc, indent, 0) + "\n"


def loads_report(text: str) -> dict:
    return json.loads(text)
