"""Shared hand-built fixtures.

The two-layer metro fixture mirrors a core city whose small CoCs sit inside
one MSA, plus CoCs that straddle MSA boundaries and unincorporated land:

* MSA ``M-STL`` = [0,10]x[0,10], ``M-2`` = [12,20]x[0,10].
* Nested CoCs N1..N5 inside ``M-STL``.
* S1 = [8,14]x[5,9] spans M-STL, the gap x in (10,12) and M-2.
* S2 = [-4,1]x[8,9.5] spans M-STL and land west of it.
* S3 = [15,24]x[2,4] spans M-2 and land east of it.

Hand allocation, 2011 (counts N1..N5 = 50, 30, 0, 12, 7; S1 = 100, S2 = 20, S3 = 33):

* S1 populations 100 + 300 in M-STL, 600 in the gap, 1000 in M-2 (total 2000):
  M-STL 100*400/2000 = 20, excluded 30, M-2 50.
* S2 populations 250 outside, 750 in M-STL: M-STL 15, excluded 5.
* S3 populations 10 + 20 in M-2, 30 outside: M-2 16.5, excluded 16.5.
* M-STL = 50 + 30 + 0 + 12 + 7 + 20 + 15 = 134; M-2 = 66.5; excluded 51.5.

2016 (every CoC 10, S3 excluded as a boundary change):

* M-STL = 5*10 + 2 + 7.5 = 59.5; M-2 = 5; excluded 3 + 2.5 = 5.5.
"""

import csv
import json
import warnings

import numpy as np

from homeless_atlas.geo import OverlapWarning, assign_points
from homeless_atlas.synthetic import grid_regions, random_points, square

MSAS = {"M-STL": square(0, 0, 10, 10), "M-2": square(12, 0, 20, 10)}
COCS = {
    "N1": square(1, 1, 3, 3), "N2": square(4, 1, 6, 3), "N3": square(7, 1, 9, 3),
    "N4": square(1, 5, 3, 7), "N5": square(4, 5, 6, 7),
    "S1": square(8, 5, 14, 9), "S2": square(-4, 8, 1, 9.5), "S3": square(15, 2, 24, 4),
}
BGS = [  # geoid, x, y, population
    ("g01", 2.0, 2.0, 100), ("g02", 1.5, 2.5, 300), ("g03", 5.0, 2.0, 200),
    ("g04", 8.0, 2.0, 150), ("g05", 2.0, 6.0, 1), ("g06", 2.5, 6.5, 2), ("g07", 1.5, 5.5, 3),
    ("g08", 5.0, 6.0, 500), ("g09", 5.5, 6.5, 0),
    ("g10", 9.0, 6.0, 100), ("g11", 9.5, 8.0, 300), ("g12", 11.0, 7.0, 600),
    ("g13", 13.0, 6.0, 1000),
    ("g14", -2.0, 9.0, 250), ("g15", 0.5, 9.0, 750),
    ("g16", 16.0, 3.0, 10), ("g17", 18.0, 3.5, 20), ("g18", 22.0, 3.0, 30),
    ("g19", 11.0, 1.0, 400), ("g20", 19.0, 9.0, 100),
]
COUNTS = {
    2011: {"N1": 50, "N2": 30, "N3": 0, "N4": 12, "N5": 7, "S1": 100, "S2": 20, "S3": 33},
    2016: {k: 10 for k in COCS},
}
EXCLUDE = {2016: ["S3"]}
EXPECTED = {
    2011: ({"M-STL": 134.0, "M-2": 66.5}, 51.5),
    2016: ({"M-STL": 59.5, "M-2": 5.0}, 5.5),
}


def _fc(polys):
    return {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"GEOID": k},
         "geometry": {"type": "Polygon", "coordinates": [[list(v) for v in ring]]}}
        for k, ring in polys.items()]}


def write_metro_fixture(directory):
    """Write geometry, points, counts and an interpolate config; returns the config path."""
    d = directory
    (d / "cocs.geojson").write_text(json.dumps(_fc(COCS)), encoding="utf-8")
    (d / "msas.geojson").write_text(json.dumps(_fc(MSAS)), encoding="utf-8")
    with (d / "bg.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["geoid", "x", "y", "population"])
        w.writerows(BGS)
    with (d / "pit.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id", "year", "count"])
        for y, c in COUNTS.items():
            for k, v in c.items():
                w.writerow([k, y, v])
    cfg = d / "config.yaml"
    cfg.write_text(
        "output_dir: out\n"
        "interpolate:\n"
        "  source: cocs.geojson\n  target: msas.geojson\n"
        "  points: bg.csv\n  counts: pit.csv\n"
        "  exclude: {2016: [S3]}\n",
        encoding="utf-8",
    )
    return cfg


def random_fixture(seed):
    rng = np.random.default_rng(seed)
    src = grid_regions(int(rng.integers(1, 5)), int(rng.integers(1, 5)), jitter=0.3,
                       seed=seed, prefix="C")
    tgt = grid_regions(int(rng.integers(1, 4)), int(rng.integers(1, 4)), jitter=0.2,
                       seed=seed + 1, prefix="M", origin=tuple(rng.uniform(-0.5, 0.5, 2)),
                       cell=float(rng.uniform(0.5, 1.5)))
    pts = random_points(int(rng.integers(5, 80)), (-0.5, -0.5, 4.5, 4.5), seed=seed + 2,
                        weight_range=(0, 100))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OverlapWarning)
        a = assign_points(pts, src)
    pop = np.bincount(a.region_index[a.region_index >= 0],
                      weights=pts.weights[a.region_index >= 0], minlength=len(src))
    totals = {r: (float(rng.uniform(0, 1000)) if p > 0 else 0.0) for r, p in zip(src.ids, pop)}
    return src, tgt, pts, totals
