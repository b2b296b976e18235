"""Synthetic geometry fixtures: jittered grid tessellations and random points."""

from __future__ import annotations

import math

import numpy as np

from .geo import PointSet, RegionPolygon, RegionSet


def grid_regions(nx, ny, *, jitter=0.0, subdivide=1, seed=0, name="grid", prefix="R",
                 origin=(0.0, 0.0), cell=1.0):
    """Tessellate a rectangle into ``nx * ny`` quadrilateral-ish cells.

    Interior grid vertices are jittered by up to ``jitter * cell`` so cells
    stay a partition (neighbours share the exact same edge vertices). Each
    cell edge is split into ``subdivide`` segments.
    """
    rng = np.random.default_rng(seed)
    gx = origin[0] + cell * np.arange(nx + 1, dtype=np.float64)
    gy = origin[1] + cell * np.arange(ny + 1, dtype=np.float64)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    if jitter:
        J = rng.uniform(-jitter * cell, jitter * cell, size=(2, nx + 1, ny + 1))
        J[:, [0, -1], :] = 0.0
        J[:, :, [0, -1]] = 0.0
        X = X + J[0]
        Y = Y + J[1]
    t = np.arange(subdivide, dtype=np.float64) / subdivide
    polys = []
    width = len(str(nx * ny))
    for i in range(nx):
        for j in range(ny):
            c = np.array([[X[i, j], Y[i, j]], [X[i + 1, j], Y[i + 1, j]],
                          [X[i + 1, j + 1], Y[i + 1, j + 1]], [X[i, j + 1], Y[i, j + 1]]])
            # each side split into `subdivide` segments, ring closed on the first corner
            sides = c[:, None, :] + t[None, :, None] * (np.roll(c, -1, axis=0) - c)[:, None, :]
            ring = np.vstack([sides.reshape(-1, 2), c[:1]])
            polys.append(RegionPolygon(f"{prefix}{i * ny + j:0{width}d}", [ring]))
    return RegionSet(name, None, polys)


def random_points(n, bbox, *, seed=0, weight_range=(0.0, 3000.0), prefix="BG"):
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = bbox
    xy = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    w = rng.uniform(*weight_range, n)
    width = len(str(n))
    return PointSet([f"{prefix}{i:0{width}d}" for i in range(n)], xy, w)


def square(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]


# --- demo inputs for the command-line pipeline ------------------------------------

DEMO_YEARS = (2011, 2016, 2020)
DEMO_DEFLATOR = {2011: 1.32, 2016: 1.42, 2020: 1.53}


def demo_panel(n_msas=150, *, seed=0, years=DEMO_YEARS, n_industries=10):
    """Raw MSA series plus shift-share inputs with a known asymmetric rent effect.

    Log chronic rates rise 1.7-for-1 with real rent increases and do not
    respond to decreases. Rent and employment changes load on the Bartik
    predictor interacted with the supply constraints. Returns
    ``(series, shares, growth, eta)`` frames.
    """
    import pandas as pd

    rng = np.random.default_rng(seed)
    width = len(str(n_msas))
    ids = [f"M{i:0{width}d}" for i in range(n_msas)]
    eta = pd.DataFrame({"msa_id": ids, "wri": rng.normal(0, 1, n_msas),
                        "elasticity": rng.uniform(0.8, 4.0, n_msas),
                        "undevelopable_share": rng.uniform(0.0, 0.6, n_msas)})
    naics = [f"{11 + 2 * k}" for k in range(n_industries)]
    share_rows, growth_rows = [], []
    base_years, end_years = years[:-1], years[1:]
    for y in end_years:
        g = rng.normal(0.02, 0.15, n_industries)
        growth_rows += [{"naics2": k, "year": y, "log_growth": float(v)} for k, v in zip(naics, g)]
    shares = {}
    for y in base_years:
        S = rng.dirichlet(np.full(n_industries, 0.7), n_msas)
        shares[y] = S
        for i, msa in enumerate(ids):
            share_rows += [{"msa_id": msa, "year": y, "naics2": k, "share": float(s)}
                           for k, s in zip(naics, S[i])]
    growth = pd.DataFrame(growth_rows)
    gmat = {y: growth[growth["year"] == y]["log_growth"].to_numpy() for y in end_years}

    pop = rng.uniform(2e5, 5e6, n_msas)
    rent = 700.0 * np.exp(rng.normal(0, 0.25, n_msas))  # real, base-year dollars
    chronic = np.exp(rng.normal(np.log(8e-4), 0.5, n_msas))
    crowded = np.exp(rng.normal(np.log(0.03), 0.3, n_msas))
    inc = 55000.0 * np.exp(rng.normal(0, 0.2, n_msas))
    pa = rng.uniform(1.0, 4.0, n_msas)
    unemp = rng.uniform(3.0, 9.0, n_msas)
    vac = rng.uniform(4.0, 12.0, n_msas)
    emp = pop * 0.45
    q = np.array([0.25, 0.55, 0.9, 1.35, 2.6])
    p = {5: 0.5, 15: 0.65, 25: 0.78, 50: 1.0}
    rows = []

    def emit(y, d):
        for i, msa in enumerate(ids):
            row = {"msa_id": msa, "year": y, "population": round(pop[i]),
                   "chronic_count": float(chronic[i] * pop[i]),
                   "median_rent": float(rent[i] * d), "crowded_units": float(crowded[i] * 1e5),
                   "total_units": 1e5, "median_hh_income": float(inc[i] * d),
                   "pct_public_assistance": float(pa[i]), "unemployment_rate": float(unemp[i]),
                   "vacancy_rate": float(vac[i]), "employment": float(emp[i])}
            for k in range(5):
                row[f"income_q{k + 1}"] = float(inc[i] * q[k] * d)
            for pct, f in p.items():
                row[f"rent_p{pct}"] = float(rent[i] * f * d * math.exp(rng.normal(0, 0.01)))
            rows.append(row)

    emit(years[0], DEMO_DEFLATOR.get(years[0], 1.0))
    for t0, t1 in zip(base_years, end_years):
        b = shares[t0] @ gmat[t1]
        v = rng.normal(0, 0.04, n_msas)
        d_rent = 2.0 * b * (1 + 0.5 * eta["wri"].to_numpy()) - 0.8 * b * eta["elasticity"].to_numpy() \
            + 0.01 + v
        d_emp = 0.8 * b + rng.normal(0, 0.02, n_msas)
        plus, minus = np.maximum(d_rent, 0), np.minimum(d_rent, 0)
        d_inc = rng.normal(0.02, 0.05, n_msas)
        d_pa = rng.normal(0, 0.3, n_msas)
        d_chronic = 1.7 * plus + 0.0 * minus - 0.2 * d_pa + 0.5 * v + rng.normal(0, 0.1, n_msas)
        rent, emp = rent * np.exp(d_rent), emp * np.exp(d_emp)
        inc, pa = inc * np.exp(d_inc), pa + d_pa
        chronic = chronic * np.exp(d_chronic)
        crowded = crowded * np.exp(0.8 * plus + rng.normal(0, 0.1, n_msas))
        unemp = unemp * np.exp(rng.normal(0, 0.2, n_msas))
        vac = vac * np.exp(-0.5 * d_rent + rng.normal(0, 0.1, n_msas))
        pop = pop * np.exp(rng.normal(0.02, 0.02, n_msas))
        emit(t1, DEMO_DEFLATOR.get(t1, 1.0))
    series = pd.DataFrame(rows)
    return series, pd.DataFrame(share_rows), growth, eta


def write_demo(directory, *, seed=0, n_msas=150):
    """Write a complete set of demo inputs and ``config.yaml`` into ``directory``.

    Geometry: a 7 x 5 grid of CoCs, a 3 x 2 grid of MSAs that leaves a rim
    of CoC territory outside every MSA, and 600 block-group points.
    """
    import csv
    from pathlib import Path

    import yaml

    from .geo import write_geojson

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cocs = grid_regions(7, 5, jitter=0.2, subdivide=2, seed=seed, name="cocs", prefix="CoC-")
    msas = grid_regions(3, 2, jitter=0.2, seed=seed + 1, name="msas", prefix="MSA-",
                        origin=(0.5, 0.5), cell=2.0)
    write_geojson(cocs, d / "cocs.geojson")
    write_geojson(msas, d / "msas.geojson")
    pts = random_points(600, (0.0, 0.0, 7.0, 5.0), seed=seed + 2, weight_range=(0.0, 3000.0))
    with (d / "block_groups.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["geoid", "x", "y", "population"])
        for pid, (x, y), wt in zip(pts.ids, pts.xy, pts.weights):
            w.writerow([pid, repr(float(x)), repr(float(y)), repr(float(wt))])
    with (d / "pit_counts.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "year", "count"])
        for y in DEMO_YEARS:
            for rid in cocs.ids:
                w.writerow([rid, y, int(rng.integers(0, 400))])

    series, shares, growth, eta = demo_panel(n_msas, seed=seed)
    opts = {"index": False, "lineterminator": "\n"}
    series.to_csv(d / "panel_variables.csv", **opts)
    shares.to_csv(d / "industry_shares.csv", **opts)
    growth.to_csv(d / "national_growth.csv", **opts)
    eta.to_csv(d / "supply_constraints.csv", **opts)
    with (d / "deflator.csv").open("w", encoding="utf-8") as fh:
        fh.write("year,deflator\n" + "".join(f"{y},{v}\n" for y, v in DEMO_DEFLATOR.items()))

    config = {
        "output_dir": "out",
        "seed": seed,
        "interpolate": {"source": "cocs.geojson", "target": "msas.geojson",
                        "points": "block_groups.csv", "counts": "pit_counts.csv",
                        "exclude": {2016: ["CoC-00"]}},
        "panel": {"variables": "panel_variables.csv", "deflator": "deflator.csv"},
        "estimate": {"presets": ["table3-col1", "table5-col1", "iv-main"]},
        "shiftshare": {"shares": "industry_shares.csv", "growth": "national_growth.csv",
                       "eta": "supply_constraints.csv"},
        "simulate": {"T": 8, "asymmetry_shift": 0.1, "market": {"n_agents": 2000,
                     "supply": {"prices": [20.0, 80.0], "quantities": [1200.0, 1800.0]}},
                     "bridge": {"n_markets": 100, "n_agents": 2000}},
        "validate": {"years": list(DEMO_YEARS)},
    }
    with (d / "config.yaml").open("w", encoding="utf-8") as fh:
        yaml.safe_dump(config, fh, sort_keys=False)
    return d / "config.yaml"
