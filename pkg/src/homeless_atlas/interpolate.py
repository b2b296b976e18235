"""Population-weighted, mass-preserving reallocation of counts between region systems.

Source totals are spread over weighted points in proportion to their weights,
then summed inside each target region. Mass landing outside every target
region is reported as ``excluded_mass`` rather than dropped silently.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geo import Assignment, PointSet, _as_pointset, assign_points, check_overlaps


class InterpolationError(ValueError):
    """Counts cannot be allocated without losing or fabricating mass."""


@dataclass
class PointAllocation:
    point_ids: np.ndarray
    values: np.ndarray

    def as_dict(self):
        return dict(zip(self.point_ids.tolist(), self.values.tolist()))


@dataclass
class TargetTotals:
    totals: dict
    excluded_mass: float = 0.0

    @property
    def total_mass(self):
        return math.fsum(self.totals.values()) + self.excluded_mass


def _group_fsum(values, groups, n_groups):
    """Exactly-rounded per-group sums (``math.fsum``) for integer group codes >= 0."""
    out = np.zeros(n_groups)
    if len(values) == 0:
        return out
    order = np.argsort(groups, kind="stable")
    g, v = groups[order], values[order]
    cuts = np.flatnonzero(np.diff(g)) + 1
    for gi, chunk in zip(g[np.concatenate([[0], cuts])], np.split(v, cuts)):
        out[gi] = math.fsum(chunk.tolist())
    return out


def disaggregate(totals, source_assign, points):
    """Spread each source total over its points in proportion to point weight.

    Points in no source region receive zero. A region with a positive total but
    no points, or only zero-weight points, raises :class:`InterpolationError`.
    """
    points = _as_pointset(points)
    if not np.array_equal(points.ids, source_assign.point_ids):
        raise InterpolationError("assignment and point set list different point ids")
    region_ids = source_assign.region_ids
    unknown = sorted(set(totals) - set(region_ids))
    if unknown:
        raise InterpolationError(f"totals reference regions absent from the source set: {unknown}")
    H = np.array([float(totals.get(r, 0.0)) for r in region_ids])
    if not np.all(np.isfinite(H)) or np.any(H < 0):
        bad = [r for r, h in zip(region_ids, H) if not (np.isfinite(h) and h >= 0)]
        raise InterpolationError(f"totals must be finite and nonnegative: {bad}")
    idx = source_assign.region_index
    inside = idx >= 0
    pop = _group_fsum(points.weights[inside], idx[inside], len(region_ids))
    dead = [r for r, h, p in zip(region_ids, H, pop) if h > 0 and p <= 0]
    if dead:
        raise InterpolationError(
            f"regions with a positive count but no populated points: {dead}"
        )
    values = np.zeros(len(points))
    k = idx[inside]
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(pop[k] > 0, points.weights[inside] / pop[k], 0.0)
    values[inside] = H[k] * share
    return PointAllocation(points.ids, values)


def aggregate(alloc, target_assign):
    """Sum point allocations inside each target region."""
    if not np.array_equal(alloc.point_ids, target_assign.point_ids):
        a, b = set(alloc.point_ids.tolist()), set(target_assign.point_ids.tolist())
        missing = sorted(a ^ b)
        if missing:
            raise InterpolationError(f"allocation and assignment disagree on point ids: {missing[:20]}")
        order = {pid: i for i, pid in enumerate(alloc.point_ids.tolist())}
        perm = np.array([order[p] for p in target_assign.point_ids.tolist()], dtype=np.intp)
        alloc = PointAllocation(alloc.point_ids[perm], alloc.values[perm])
    idx = target_assign.region_index
    inside = idx >= 0
    sums = _group_fsum(alloc.values[inside], idx[inside], len(target_assign.region_ids))
    excluded = math.fsum(alloc.values[~inside].tolist())
    return TargetTotals(dict(zip(target_assign.region_ids, sums.tolist())), excluded)


@dataclass
class InterpolationDiagnostics:
    source_point_counts: dict = field(default_factory=dict)
    target_point_counts: dict = field(default_factory=dict)
    zero_population_regions: list = field(default_factory=list)
    overlap_warnings: list = field(default_factory=list)
    excluded_mass_share: dict = field(default_factory=dict)
    excluded_regions: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "source_point_counts": dict(sorted(self.source_point_counts.items())),
            "target_point_counts": dict(sorted(self.target_point_counts.items())),
            "zero_population_regions": sorted(self.zero_population_regions),
            "overlap_warnings": self.overlap_warnings,
            "excluded_mass_share": {str(k): v for k, v in sorted(self.excluded_mass_share.items())},
            "excluded_regions": {str(k): sorted(v) for k, v in sorted(self.excluded_regions.items())},
        }


class PopulationWeightedInterpolator(TransformerMixin, BaseEstimator):
    """Fit point assignments once, then reallocate any number of yearly totals.

    Parameters
    ----------
    n_jobs : int
        Worker threads for point assignment. Results do not depend on it.
    exclude : dict or None
        ``{year: [source region ids]}`` dropped from that year's totals before
        allocation (boundary changes that cannot be harmonised).
    check_overlap : bool
        Run the sampled overlap check on both region sets during ``fit``.
    """

    def __init__(self, n_jobs=1, exclude=None, check_overlap=False):
        self.n_jobs = n_jobs
        self.exclude = exclude
        self.check_overlap = check_overlap

    def fit(self, points, source, target):
        points = _as_pointset(points)
        self.points_ = points
        self.source_assign_ = assign_points(points, source, n_jobs=self.n_jobs)
        self.target_assign_ = assign_points(points, target, n_jobs=self.n_jobs)
        overlaps = [
            {"layer": source.name, "point": str(p), "regions": r}
            for p, r in self.source_assign_.overlaps
        ] + [
            {"layer": target.name, "point": str(p), "regions": r}
            for p, r in self.target_assign_.overlaps
        ]
        if self.check_overlap:
            for layer in (source, target):
                for a, b in check_overlaps(layer):
                    overlaps.append({"layer": layer.name, "point": None, "regions": [a, b]})
        src_counts = self.source_assign_.counts()
        pop = _group_fsum(
            points.weights[self.source_assign_.region_index >= 0],
            self.source_assign_.region_index[self.source_assign_.region_index >= 0],
            len(source),
        )
        self.diagnostics_ = InterpolationDiagnostics(
            source_point_counts=src_counts,
            target_point_counts=self.target_assign_.counts(),
            zero_population_regions=[r for r, p in zip(source.ids, pop) if p <= 0],
            overlap_warnings=overlaps,
        )
        return self

    def transform(self, totals, year=None):
        """Reallocate one set of source totals; returns :class:`TargetTotals`."""
        check_is_fitted(self, "source_assign_")
        totals = dict(totals)
        dropped = []
        if self.exclude and year is not None:
            for rid in self.exclude.get(year, self.exclude.get(str(year), [])):
                if rid in totals:
                    dropped.append(rid)
                    totals.pop(rid)
        alloc = disaggregate(totals, self.source_assign_, self.points_)
        out = aggregate(alloc, self.target_assign_)
        if year is not None:
            mass = math.fsum(totals.values())
            self.diagnostics_.excluded_mass_share[year] = out.excluded_mass / mass if mass > 0 else 0.0
            if dropped:
                self.diagnostics_.excluded_regions[year] = dropped
        return out


def interpolate_counts(source, target, points, totals, years=None, *, exclude=None, n_jobs=1):
    """Reallocate per-year source totals onto ``target``.

    ``totals`` maps ``year -> {source_id: count}``. Returns
    ``({year: TargetTotals}, InterpolationDiagnostics)``.
    """
    years = sorted(totals) if years is None else list(years)
    model = PopulationWeightedInterpolator(n_jobs=n_jobs, exclude=exclude).fit(points, source, target)
    out = {y: model.transform(totals[y], year=y) for y in years}
    return out, model.diagnostics_


# --- I/O -------------------------------------------------------------------

def read_totals_csv(path):
    """Read ``region_id,year,count`` into ``{year: {region_id: count}}``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"counts file not found: {path}")
    out = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"region_id", "year", "count"} - set(reader.fieldnames or ())
        if missing:
            raise InterpolationError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            year = int(row["year"])
            bucket = out.setdefault(year, {})
            if row["region_id"] in bucket:
                raise InterpolationError(f"{path}: duplicate row for {row['region_id']} in {year}")
            bucket[row["region_id"]] = float(row["count"])
    return out


def write_totals_csv(results, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_id", "year", "count"])
        for year in sorted(results):
            for rid in sorted(results[year].totals):
                w.writerow([rid, year, repr(float(results[year].totals[rid]))])


def write_diagnostics_json(diagnostics, results, path):
    payload = {
        "schema_version": 1,
        "diagnostics": diagnostics.to_dict(),
        "excluded_mass": {str(y): results[y].excluded_mass for y in sorted(results)},
    }
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


__all__ = [
    "InterpolationError", "PointAllocation", "TargetTotals", "InterpolationDiagnostics",
    "PopulationWeightedInterpolator", "disaggregate", "aggregate", "interpolate_counts",
    "read_totals_csv", "write_totals_csv", "write_diagnostics_json", "Assignment", "PointSet",
]
