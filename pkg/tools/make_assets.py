"""Regenerate the bundled data files in src/hymik/data.

germany.graph: a planar stand-in for the 544 German districts (Delaunay
triangulation of 544 seeded random points in the unit square; long hull
edges removed while the graph stays connected).
covid_sample.csv: a 500 day x 11 region cumulative count series in the
CLI's CSV format, with an 11-node chain-plus-chords graph.
"""

from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

DATA = Path(__file__).resolve().parents[1] / "src" / "hymik" / "data"


def write_graph(path, nb):
    with open(path, "w") as fh:
        fh.write(f"{len(nb)}\n")
        for i, v in enumerate(nb):
            v = sorted(v)
            fh.write(" ".join(map(str, [i, len(v), *v])) + "\n")


def germany(seed=544):
    rng = np.random.default_rng(seed)
    pts = rng.random((544, 2))
    tri = Delaunay(pts)
    edges = set()
    for simplex in tri.simplices:
        for a in range(3):
            i, j = sorted((simplex[a], simplex[(a + 1) % 3]))
            edges.add((i, j))
    length = {e: np.linalg.norm(pts[e[0]] - pts[e[1]]) for e in edges}
    nb = [set() for _ in range(544)]
    for i, j in edges:
        nb[i].add(j)
        nb[j].add(i)
    # thin the longest (hull) edges but keep every degree >= 2
    for (i, j) in sorted(edges, key=length.get, reverse=True)[:60]:
        if length[(i, j)] > 0.12 and len(nb[i]) > 2 and len(nb[j]) > 2:
            nb[i].discard(j)
            nb[j].discard(i)
    return nb


def covid(seed=11):
    n_T, n_S = 500, 11
    rng = np.random.default_rng(seed)
    pop = rng.integers(50_000, 1_200_000, n_S)
    t = np.arange(n_T)
    waves = 2.5 * np.exp(-((t - 120) / 40.0) ** 2) + 3.5 * np.exp(-((t - 380) / 55.0) ** 2)
    waves -= waves.mean()
    region = 0.3 * rng.standard_normal(n_S)
    region -= region.mean()
    # overall log-rate -9.42 once the time and region effects average out
    rate = np.exp(-9.42 + waves[:, None] + region[None, :]
                  + 0.15 * rng.standard_normal((n_T, n_S)))
    daily = rng.poisson(rate * pop[None, :])
    cum = np.cumsum(daily, axis=0)
    # reporting corrections: occasional downward revisions
    for _ in range(25):
        tt, ss = rng.integers(1, n_T), rng.integers(n_S)
        cum[tt, ss] = max(cum[tt - 1, ss] - rng.integers(1, 4), 0)
    with open(DATA / "covid_sample.csv", "w") as fh:
        fh.write("time,region,count,exposure\n")
        for i in range(n_T):
            for s in range(n_S):
                fh.write(f"{i + 1},{s},{cum[i, s]},{pop[s]}\n")
    nb = [set() for _ in range(n_S)]
    for a, b in [(k, k + 1) for k in range(n_S - 1)] + [(0, 5), (2, 8), (4, 10), (1, 7)]:
        nb[a].add(b)
        nb[b].add(a)
    write_graph(DATA / "covid.graph", nb)


if __name__ == "__main__":
    DATA.mkdir(parents=True, exist_ok=True)
    write_graph(DATA / "germany.graph", germany())
    covid()
