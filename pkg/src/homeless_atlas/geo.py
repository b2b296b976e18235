"""Planar geometry: polygons, point-in-polygon, a grid index and bulk point assignment.

Coordinates are used as given (lon/lat degrees or projected units); no geodesic
math is done. Containment follows the even-odd rule and a point lying exactly
on any ring edge counts as inside.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class GeometryError(ValueError):
    """Structural defect in a polygon or point set."""


class OverlapWarning(UserWarning):
    """A point fell inside more than one region of the same set."""


@dataclass(frozen=True)
class WeightedPoint:
    id: str
    x: float
    y: float
    weight: float


@dataclass
class PointSet:
    """Column-oriented storage for many :class:`WeightedPoint` records."""

    ids: np.ndarray
    xy: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=object)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = len(self.ids)
        if self.xy.shape[0] != n or self.weights.shape != (n,):
            raise GeometryError("ids, coordinates and weights must have the same length")
        if not np.all(np.isfinite(self.xy)):
            bad = int(np.flatnonzero(~np.isfinite(self.xy).all(axis=1))[0])
            raise GeometryError(f"point {self.ids[bad]!r} has non-finite coordinates")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            bad = int(np.flatnonzero(~(np.isfinite(self.weights) & (self.weights >= 0)))[0])
            raise GeometryError(f"point {self.ids[bad]!r} has invalid weight {self.weights[bad]!r}")
        if len(set(self.ids.tolist())) != n:
            raise GeometryError("point ids must be unique")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_points(cls, points):
        points = list(points)
        return cls(
            ids=[p.id for p in points],
            xy=np.array([[p.x, p.y] for p in points], dtype=np.float64).reshape(-1, 2),
            weights=[p.weight for p in points],
        )

    def __iter__(self):
        for i in range(len(self)):
            yield WeightedPoint(self.ids[i], float(self.xy[i, 0]), float(self.xy[i, 1]),
                                float(self.weights[i]))


def _as_pointset(points):
    if isinstance(points, PointSet):
        return points
    return PointSet.from_points(points)


@dataclass
class RegionPolygon:
    """One region: an exterior ring and optional holes, each closed (first == last).

    Multipart regions list the rings of every part; parity over all rings
    still gives the right answer because parts do not overlap.
    """

    id: str
    rings: list

    def __post_init__(self):
        self.id = str(self.id)
        self.rings = [np.asarray(r, dtype=np.float64) for r in self.rings]
        validate_polygon(self)
        self._edges = _ring_edges(self.rings)
        allv = np.concatenate(self.rings)
        self.bbox = (allv[:, 0].min(), allv[:, 1].min(), allv[:, 0].max(), allv[:, 1].max())

    @property
    def exterior(self):
        return self.rings[0]

    @property
    def interiors(self):
        return self.rings[1:]

    def contains(self, xy):
        """Vectorised containment for an ``(n, 2)`` array of points."""
        return contains_points(self, xy)


def validate_polygon(poly):
    if not poly.rings:
        raise GeometryError(f"polygon {poly.id!r}: no rings")
    for r, ring in enumerate(poly.rings):
        if ring.ndim != 2 or ring.shape[1] != 2:
            raise GeometryError(f"polygon {poly.id!r} ring {r}: expected (m, 2) vertices")
        if ring.shape[0] < 4:
            raise GeometryError(
                f"polygon {poly.id!r} ring {r}: {ring.shape[0]} vertices, need at least 4"
            )
        finite = np.isfinite(ring).all(axis=1)
        if not finite.all():
            raise GeometryError(
                f"polygon {poly.id!r} ring {r} vertex {int(np.flatnonzero(~finite)[0])}: "
                "non-finite coordinate"
            )
        if not np.array_equal(ring[0], ring[-1]):
            raise GeometryError(
                f"polygon {poly.id!r} ring {r} vertex {ring.shape[0] - 1}: ring is not closed"
            )


def _ring_edges(rings):
    starts = np.concatenate([r[:-1] for r in rings])
    ends = np.concatenate([r[1:] for r in rings])
    x1, y1 = starts[:, 0].copy(), starts[:, 1].copy()
    x2, y2 = ends[:, 0].copy(), ends[:, 1].copy()
    # per-edge constants reused by every containment query
    return (x1, y1, x2, y2, x2 - x1, y2 - y1,
            np.minimum(x1, x2), np.maximum(x1, x2), np.minimum(y1, y2), np.maximum(y1, y2))


def contains_points(poly, xy, *, chunk=65536):
    """Even-odd containment with on-edge points counted inside."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    out = np.zeros(len(xy), dtype=bool)
    if len(xy) == 0:
        return out
    x1, y1, x2, y2, ex, ey, xlo, xhi, ylo, yhi = poly._edges
    # bound the (points x edges) temporaries
    step = max(1, chunk // max(1, len(x1)))
    for lo in range(0, len(xy), step):
        px = xy[lo:lo + step, 0:1]
        py = xy[lo:lo + step, 1:2]
        straddle = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x1 + (py - y1) * ex / ey
        inside = np.count_nonzero(straddle & (px < x_cross), axis=1) % 2 == 1
        # the on-edge test only matters where parity says outside
        rest = np.flatnonzero(~inside)
        if len(rest):
            qx, qy = px[rest], py[rest]
            cross = ex * (qy - y1) - ey * (qx - x1)
            inside[rest] = (
                (cross == 0) & (qx >= xlo) & (qx <= xhi) & (qy >= ylo) & (qy <= yhi)
            ).any(axis=1)
        out[lo:lo + step] = inside
    return out


def point_in_polygon(p, poly):
    """Return True when ``p = (x, y)`` lies in ``poly`` (edges count as inside)."""
    return bool(contains_points(poly, np.asarray(p, dtype=np.float64).reshape(1, 2))[0])


def self_intersection_sample(poly, n_pairs=2000, seed=0):
    """Diagnostic: sample edge pairs of the exterior ring and report proper crossings.

    Returns a list of ``(i, j)`` edge index pairs found to intersect away from
    shared vertices. An empty list does not prove simplicity.
    """
    ring = poly.exterior
    m = len(ring) - 1
    if m < 4:
        return []
    rng = np.random.default_rng(seed)
    if m * (m - 1) // 2 <= n_pairs:
        i, j = np.triu_indices(m, k=2)
    else:
        i = rng.integers(0, m, n_pairs)
        j = rng.integers(0, m, n_pairs)
    keep = (np.abs(i - j) > 1) & ~((i == 0) & (j == m - 1)) & ~((j == 0) & (i == m - 1))
    i, j = i[keep], j[keep]
    a, b, c, d = ring[i], ring[i + 1], ring[j], ring[j + 1]

    def orient(p, q, r):
        return np.sign((q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1])
                       - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0]))

    hit = (orient(a, b, c) * orient(a, b, d) < 0) & (orient(c, d, a) * orient(c, d, b) < 0)
    return sorted({(int(min(p, q)), int(max(p, q))) for p, q in zip(i[hit], j[hit])})


@dataclass
class RegionSet:
    name: str
    vintage: int | None
    polygons: list = field(default_factory=list)

    def __post_init__(self):
        ids = [p.id for p in self.polygons]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise GeometryError(f"region set {self.name!r}: duplicate polygon ids {dupes}")
        # sorted order makes "lowest index" equal to "smallest id"
        self.polygons = sorted(self.polygons, key=lambda p: p.id)

    @property
    def ids(self):
        return [p.id for p in self.polygons]

    def __len__(self):
        return len(self.polygons)

    def __getitem__(self, region_id):
        for p in self.polygons:
            if p.id == region_id:
                return p
        raise KeyError(region_id)

    def subset(self, exclude):
        exclude = set(exclude)
        return RegionSet(self.name, self.vintage, [p for p in self.polygons if p.id not in exclude])


def check_overlaps(regions, samples_per_region=200, seed=0):
    """Probabilistic overlap check: sample points inside each polygon's bbox.

    Returns sorted ``(id_a, id_b)`` pairs whose interiors were both hit by a
    sampled point.
    """
    rng = np.random.default_rng(seed)
    pairs = set()
    for poly in regions.polygons:
        x0, y0, x1, y1 = poly.bbox
        pts = np.column_stack([rng.uniform(x0, x1, samples_per_region),
                               rng.uniform(y0, y1, samples_per_region)])
        pts = pts[poly.contains(pts)]
        if len(pts) == 0:
            continue
        for other in regions.polygons:
            if other.id == poly.id or not _bbox_overlap(poly.bbox, other.bbox):
                continue
            inside = other.contains(pts)
            # shared boundaries are legitimate; require a strictly interior hit
            if inside.any() and _strict_hits(other, pts[inside]):
                pairs.add(tuple(sorted((poly.id, other.id))))
    return sorted(pairs)


def _strict_hits(poly, pts):
    eps = 1e-9 * max(1.0, abs(poly.bbox[2] - poly.bbox[0]))
    for dx, dy in ((eps, 0), (-eps, 0), (0, eps), (0, -eps)):
        if not poly.contains(pts + np.array([dx, dy])).any():
            return False
    return True


def _bbox_overlap(a, b):
    return a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]


class SpatialIndex:
    """Uniform grid over polygon bounding boxes; read-only after construction.

    Candidate lookups return a superset of the polygons that can contain a point.
    """

    def __init__(self, regions, cells_per_polygon=4):
        self.regions = regions
        n = len(regions)
        if n == 0:
            self.bboxes = np.empty((0, 4))
            self.extent = None
            return
        self.bboxes = np.array([p.bbox for p in regions.polygons], dtype=np.float64)
        x0, y0 = self.bboxes[:, 0].min(), self.bboxes[:, 1].min()
        x1, y1 = self.bboxes[:, 2].max(), self.bboxes[:, 3].max()
        self.extent = (x0, y0, x1, y1)
        side = max(1, int(np.ceil(np.sqrt(cells_per_polygon * n))))
        self.nx = self.ny = side
        self.dx = (x1 - x0) / side or 1.0
        self.dy = (y1 - y0) / side or 1.0
        cells = [[] for _ in range(self.nx * self.ny)]
        for k, (bx0, by0, bx1, by1) in enumerate(self.bboxes):
            i0, j0 = self._cell(bx0, by0)
            i1, j1 = self._cell(bx1, by1)
            for i in range(i0, i1 + 1):
                for j in range(j0, j1 + 1):
                    cells[j * self.nx + i].append(k)
        counts = np.array([len(c) for c in cells], dtype=np.intp)
        self.cell_ptr = np.concatenate([[0], np.cumsum(counts)])
        self.cell_items = np.array([k for c in cells for k in c], dtype=np.intp)
        self.cell_ptr.setflags(write=False)
        self.cell_items.setflags(write=False)
        self.bboxes.setflags(write=False)

    def _cell(self, x, y):
        i = min(self.nx - 1, max(0, int((x - self.extent[0]) // self.dx)))
        j = min(self.ny - 1, max(0, int((y - self.extent[1]) // self.dy)))
        return i, j

    def _cells(self, xy):
        ix = np.clip(((xy[:, 0] - self.extent[0]) // self.dx).astype(np.intp), 0, self.nx - 1)
        iy = np.clip(((xy[:, 1] - self.extent[1]) // self.dy).astype(np.intp), 0, self.ny - 1)
        return iy * self.nx + ix

    def _inside_extent(self, xy):
        x0, y0, x1, y1 = self.extent
        return (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)

    def query(self, x, y):
        """Candidate region ids for one point."""
        if self.extent is None:
            return []
        pairs = self.candidate_pairs(np.array([[x, y]], dtype=np.float64))
        return [self.regions.polygons[k].id for k in pairs[1]]

    def candidate_pairs(self, xy):
        """Return ``(point_index, polygon_index)`` arrays whose bboxes contain the point."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        empty = (np.empty(0, np.intp), np.empty(0, np.intp))
        if self.extent is None or len(xy) == 0:
            return empty
        pts = np.flatnonzero(self._inside_extent(xy))
        if len(pts) == 0:
            return empty
        cell = self._cells(xy[pts])
        start = self.cell_ptr[cell]
        count = self.cell_ptr[cell + 1] - start
        pi = np.repeat(pts, count)
        offsets = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
        ki = self.cell_items[np.repeat(start, count) + offsets]
        b = self.bboxes[ki]
        px, py = xy[pi, 0], xy[pi, 1]
        keep = (px >= b[:, 0]) & (px <= b[:, 2]) & (py >= b[:, 1]) & (py <= b[:, 3])
        return pi[keep], ki[keep]


def build_index(regions):
    return SpatialIndex(regions)


@dataclass
class Assignment:
    """Point id -> region id (or None). ``region_index`` is -1 for unassigned points."""

    point_ids: np.ndarray
    region_ids: list
    region_index: np.ndarray
    overlaps: list = field(default_factory=list)

    def __len__(self):
        return len(self.point_ids)

    def as_dict(self):
        return {
            pid: (self.region_ids[k] if k >= 0 else None)
            for pid, k in zip(self.point_ids.tolist(), self.region_index.tolist())
        }

    def counts(self):
        """Number of points per region id (all regions listed)."""
        c = np.bincount(self.region_index[self.region_index >= 0], minlength=len(self.region_ids))
        return dict(zip(self.region_ids, c.tolist()))


def _assign_chunk(index, xy):
    n = len(xy)
    best = np.full(n, -1, dtype=np.intp)
    n_hits = np.zeros(n, dtype=np.intp)
    pi, ki = index.candidate_pairs(xy)
    if len(pi) == 0:
        return best, n_hits
    order = np.lexsort((pi, ki))
    pi, ki = pi[order], ki[order]
    bounds = np.concatenate([[0], np.flatnonzero(np.diff(ki)) + 1, [len(ki)]]).tolist()
    polygons = index.regions.polygons
    for a, b in zip(bounds[:-1], bounds[1:]):
        k = int(ki[a])
        p_idx = pi[a:b]
        inside = p_idx[contains_points(polygons[k], xy[p_idx])]
        n_hits[inside] += 1
        fresh = inside[best[inside] < 0]
        best[fresh] = k
        # polygons are visited in ascending index, so existing entries already hold the smaller id
    return best, n_hits


def assign_points(points, regions, *, n_jobs=1, index=None):
    """Map every point to its containing region, or to none.

    A point claimed by several polygons goes to the smallest region id and an
    :class:`OverlapWarning` is emitted. Output is independent of ``n_jobs``.
    """
    points = _as_pointset(points)
    if index is None:
        index = build_index(regions)
    n = len(points)
    if n == 0 or len(regions) == 0:
        return Assignment(points.ids, regions.ids, np.full(n, -1, dtype=np.intp))
    n_jobs = max(1, int(n_jobs))
    bounds = np.linspace(0, n, n_jobs + 1).astype(np.intp)
    slices = [slice(bounds[i], bounds[i + 1]) for i in range(n_jobs)]
    if n_jobs == 1:
        parts = [_assign_chunk(index, points.xy)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(lambda s: _assign_chunk(index, points.xy[s]), slices))
    best = np.concatenate([p[0] for p in parts])
    hits = np.concatenate([p[1] for p in parts])
    overlaps = []
    multi = np.flatnonzero(hits > 1)
    if len(multi):
        for i in multi.tolist():
            claim = [p.id for p in regions.polygons if p.contains(points.xy[i:i + 1])[0]]
            overlaps.append((points.ids[i], claim))
        msg = (f"{len(multi)} point(s) fall inside more than one region of {regions.name!r}; "
               "assigned to the smallest region id")
        warnings.warn(msg, OverlapWarning, stacklevel=2)
        logger.warning(msg)
    return Assignment(points.ids, regions.ids, best, overlaps)


# --- I/O -------------------------------------------------------------------

def _polygon_rings(geometry):
    kind = geometry.get("type")
    coords = geometry.get("coordinates")
    if kind == "Polygon":
        return [coords]
    if kind == "MultiPolygon":
        return list(coords)
    raise GeometryError(f"unsupported geometry type {kind!r}")


def read_geojson(path, *, id_property="GEOID", name=None, vintage=None):
    """Load a FeatureCollection of (Multi)Polygon features as a RegionSet."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"geometry file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("type") != "FeatureCollection":
        raise GeometryError(f"{path}: expected a GeoJSON FeatureCollection")
    polygons = []
    for n, feat in enumerate(data.get("features", [])):
        props = feat.get("properties") or {}
        if id_property not in props:
            raise GeometryError(f"{path}: feature {n} lacks property {id_property!r}")
        rings = [ring for part in _polygon_rings(feat["geometry"]) for ring in part]
        polygons.append(RegionPolygon(str(props[id_property]), rings))
    return RegionSet(name or path.stem, vintage, polygons)


def read_points_csv(path):
    """Read ``geoid,x,y,population`` rows."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"points file not found: {path}")
    ids, xy, w = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"geoid", "x", "y", "population"} - set(reader.fieldnames or ())
        if missing:
            raise GeometryError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            ids.append(row["geoid"])
            xy.append((float(row["x"]), float(row["y"])))
            w.append(float(row["population"]))
    return PointSet(ids, np.array(xy, dtype=np.float64).reshape(-1, 2), w)


def write_geojson(regions, path, *, id_property="GEOID"):
    features = []
    for p in regions.polygons:
        features.append({
            "type": "Feature",
            "properties": {id_property: p.id},
            "geometry": {"type": "Polygon", "coordinates": [r.tolist() for r in p.rings]},
        })
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh)
