"""Lane-segment road network: nearest queries, route enumeration, curvature."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

MIN_POINT_SPACING = 1e-6   # m, consecutive polyline points must be farther apart
MAX_GRAPH_POINTS = 10_000
DEFAULT_LANE_HALF_WIDTH = 1.85   # m
DEFAULT_MAX_ROUTES = 200
DEFAULT_MAX_ROUTE_LENGTH = 500.0  # m
COLLINEAR_TOL = 1e-9


@dataclass(eq=False)
class LaneSegment:
    """Directed lane centreline with graph links to other segments."""

    id: str
    polyline: np.ndarray                       # (P, 2) float64 metres
    ancestors: list[str] = field(default_factory=list)
    descendants: list[str] = field(default_factory=list)
    left_neighbour: str | None = None
    right_neighbour: str | None = None

    def __post_init__(self):
        self.polyline = np.asarray(self.polyline, dtype=float)
        if self.polyline.ndim != 2 or self.polyline.shape[1] != 2 or self.polyline.shape[0] < 2:
            raise ValueError(f"shape-error: segment {self.id} polyline must be (P>=2, 2)")
        steps = np.linalg.norm(np.diff(self.polyline, axis=0), axis=1)
        if np.any(steps <= MIN_POINT_SPACING):
            raise ValueError(f"shape-error: segment {self.id} has coincident consecutive points")
        self._arcs = np.concatenate([[0.0], np.cumsum(steps)])

    @property
    def length(self) -> float:
        return float(self._arcs[-1])

    @property
    def arcs(self) -> np.ndarray:
        return self._arcs


class NearestHit(NamedTuple):
    segment_id: str
    arc: float        # m along the segment polyline at the projection
    distance: float   # m from the query point to the projection


class Roadgraph:
    """Validated collection of lane segments with batched geometric queries."""

    def __init__(self, segments: Iterable[LaneSegment],
                 lane_half_width: float = DEFAULT_LANE_HALF_WIDTH):
        seg_list = sorted(segments, key=lambda s: s.id)
        self.segments: dict[str, LaneSegment] = {}
        for seg in seg_list:
            if seg.id in self.segments:
                raise ValueError(f"unknown-segment: duplicate id {seg.id}")
            self.segments[seg.id] = seg
        self.lane_half_width = float(lane_half_width)
        self.ids: list[str] = list(self.segments)
        self._index = {sid: k for k, sid in enumerate(self.ids)}
        self._validate_links()
        self.point_count = int(sum(s.polyline.shape[0] for s in self.segments.values()))
        if self.point_count > MAX_GRAPH_POINTS:
            raise ValueError(f"shape-error: {self.point_count} points exceeds {MAX_GRAPH_POINTS}")
        self._build_edge_table()

    def _validate_links(self):
        for seg in self.segments.values():
            for kind in ("ancestors", "descendants"):
                for other in getattr(seg, kind):
                    if other not in self.segments:
                        raise ValueError(f"unknown-segment: {seg.id} links to {other}")
            for other in (seg.left_neighbour, seg.right_neighbour):
                if other is not None and other not in self.segments:
                    raise ValueError(f"unknown-segment: {seg.id} links to {other}")
        for seg in self.segments.values():
            for child in seg.descendants:
                if seg.id not in self.segments[child].ancestors:
                    raise ValueError(
                        f"unknown-segment: {seg.id}->{child} missing reciprocal ancestor link")
            for parent in seg.ancestors:
                if seg.id not in self.segments[parent].descendants:
                    raise ValueError(
                        f"unknown-segment: {parent}->{seg.id} missing reciprocal descendant link")

    def _build_edge_table(self):
        starts, ends, seg_idx, arc0 = [], [], [], []
        for sid in self.ids:
            seg = self.segments[sid]
            starts.append(seg.polyline[:-1])
            ends.append(seg.polyline[1:])
            n_edges = seg.polyline.shape[0] - 1
            seg_idx.append(np.full(n_edges, self._index[sid]))
            arc0.append(seg.arcs[:-1])
        if starts:
            self._edge_a = np.concatenate(starts)
            self._edge_b = np.concatenate(ends)
            self._edge_seg = np.concatenate(seg_idx)
            self._edge_arc0 = np.concatenate(arc0)
            ev = self._edge_b - self._edge_a
            self._edge_len2 = np.einsum("ij,ij->i", ev, ev)
            self._edge_vec = ev
        else:
            self._edge_a = np.zeros((0, 2))

    def static_points(self) -> np.ndarray:
        """All polyline points stacked, ordered by segment id. Shape (P, 2)."""
        if not self.ids:
            return np.zeros((0, 2))
        return np.concatenate([self.segments[sid].polyline for sid in self.ids])

    def nearest_edges(self, points: np.ndarray):
        """Per query point: (segment index, arc, distance) of the closest edge.

        Edges are scanned grouped by ascending segment id with a strict
        comparison, so exact distance ties resolve to the smaller id.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if not self.ids:
            raise ValueError("empty-roadgraph")
        diff = points[:, None, :] - self._edge_a[None, :, :]
        t = np.einsum("qej,ej->qe", diff, self._edge_vec) / self._edge_len2[None, :]
        t = np.clip(t, 0.0, 1.0)
        proj = self._edge_a[None, :, :] + t[..., None] * self._edge_vec[None, :, :]
        d2 = np.sum((points[:, None, :] - proj) ** 2, axis=2)
        best = np.argmin(d2, axis=1)
        rows = np.arange(points.shape[0])
        arcs = self._edge_arc0[best] + t[rows, best] * np.sqrt(self._edge_len2[best])
        return self._edge_seg[best], arcs, np.sqrt(d2[rows, best])


def nearest_segment(rg: Roadgraph, point: np.ndarray) -> NearestHit:
    """Closest segment to a point; ties go to the smaller segment id."""
    seg_idx, arcs, dists = rg.nearest_edges(np.asarray(point, dtype=float)[None, :])
    return NearestHit(rg.ids[int(seg_idx[0])], float(arcs[0]), float(dists[0]))


def is_on_road(rg: Roadgraph, point: np.ndarray) -> bool:
    """True when the point lies within the lane half width of some centreline."""
    if not rg.ids:
        return False
    hit = nearest_segment(rg, point)
    return hit.distance <= rg.lane_half_width


@dataclass(frozen=True)
class Route:
    """Chain of segment ids connected by descendant links."""

    segment_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.segment_ids:
            raise ValueError("shape-error: empty route")


def route_is_valid(rg: Roadgraph, route: Route) -> bool:
    for sid in route.segment_ids:
        if sid not in rg.segments:
            return False
    for a, b in zip(route.segment_ids, route.segment_ids[1:]):
        if b not in rg.segments[a].descendants:
            return False
    return True


def enumerate_routes(rg: Roadgraph, start: str,
                     max_routes: int = DEFAULT_MAX_ROUTES,
                     max_length: float = DEFAULT_MAX_ROUTE_LENGTH) -> list[Route]:
    """Depth-first enumeration of descendant chains from a segment.

    Children are explored in ascending id order. A route stops growing when
    it has no descendants or its cumulative polyline length reaches
    max_length. At most max_routes routes are returned, in discovery order.
    """
    if start not in rg.segments:
        raise ValueError(f"unknown-segment: {start}")
    if max_routes < 1:
        raise ValueError("shape-error: max_routes must be positive")
    out: list[Route] = []

    def walk(path: list[str], length: float):
        if len(out) >= max_routes:
            return
        kids = sorted(rg.segments[path[-1]].descendants)
        if not kids or length >= max_length:
            out.append(Route(tuple(path)))
            return
        for kid in kids:
            if len(out) >= max_routes:
                return
            walk(path + [kid], length + rg.segments[kid].length)

    walk([start], rg.segments[start].length)
    return out


def segment_curvature(seg: LaneSegment) -> float:
    """Mean signed Menger curvature over interior polyline vertices.

    Left turns are positive. Triples collinear within tolerance contribute
    zero. Polylines with fewer than three points have zero curvature.
    """
    pts = seg.polyline
    if pts.shape[0] < 3:
        return 0.0
    a = pts[1:-1] - pts[:-2]
    b = pts[2:] - pts[1:-1]
    c = pts[2:] - pts[:-2]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    na, nb, nc = (np.linalg.norm(v, axis=1) for v in (a, b, c))
    denom = na * nb * nc
    curv = np.zeros(cross.shape)
    ok = (denom > 0) & (np.abs(cross) > COLLINEAR_TOL * na * nb)
    curv[ok] = 2.0 * cross[ok] / denom[ok]
    return float(np.mean(curv))


def branching_regions(rg: Roadgraph) -> set[str]:
    """Segments having at least one ancestor with two or more descendants."""
    out = set()
    for seg in rg.segments.values():
        for parent in seg.ancestors:
            if len(rg.segments[parent].descendants) >= 2:
                out.add(seg.id)
                break
    return out


class RoutePath:
    """Concatenated polyline of a route with arc-length parameterisation."""

    def __init__(self, rg: Roadgraph, route: Route):
        if not route_is_valid(rg, route):
            raise ValueError(f"unknown-segment: invalid route {route.segment_ids}")
        chunks = []
        for sid in route.segment_ids:
            poly = rg.segments[sid].polyline
            if chunks and np.linalg.norm(poly[0] - chunks[-1][-1]) <= MIN_POINT_SPACING:
                poly = poly[1:]
            if poly.shape[0]:
                chunks.append(poly)
        self.points = np.concatenate(chunks)
        steps = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.arcs = np.concatenate([[0.0], np.cumsum(steps)])
        self.length = float(self.arcs[-1])
        self.route = route

    def project(self, point: np.ndarray):
        """(arc, signed lateral offset, unit tangent) at the closest path point."""
        p = np.asarray(point, dtype=float)
        a, b = self.points[:-1], self.points[1:]
        ev = b - a
        len2 = np.einsum("ij,ij->i", ev, ev)
        t = np.clip(((p - a) * ev).sum(axis=1) / len2, 0.0, 1.0)
        proj = a + t[:, None] * ev
        d2 = np.sum((p - proj) ** 2, axis=1)
        j = int(np.argmin(d2))
        tangent = ev[j] / np.sqrt(len2[j])
        rel = p - proj[j]
        lateral = tangent[0] * rel[1] - tangent[1] * rel[0]
        arc = self.arcs[j] + t[j] * np.sqrt(len2[j])
        return float(arc), float(lateral), tangent

    def point_at(self, arc: float) -> np.ndarray:
        """Position at an arc length, clamped to the path ends."""
        s = float(np.clip(arc, 0.0, self.length))
        j = int(np.clip(np.searchsorted(self.arcs, s, side="right") - 1, 0,
                        self.points.shape[0] - 2))
        span = self.arcs[j + 1] - self.arcs[j]
        frac = (s - self.arcs[j]) / span
        return self.points[j] + frac * (self.points[j + 1] - self.points[j])

    def tangent_at(self, arc: float) -> np.ndarray:
        s = float(np.clip(arc, 0.0, self.length))
        j = int(np.clip(np.searchsorted(self.arcs, s, side="right") - 1, 0,
                        self.points.shape[0] - 2))
        ev = self.points[j + 1] - self.points[j]
        return ev / np.linalg.norm(ev)

    def subsample(self, n_points: int) -> np.ndarray:
        """Arc-uniform subsample over the full path, endpoints included."""
        arcs = np.linspace(0.0, self.length, n_points)
        return np.stack([self.point_at(s) for s in arcs])

    def distances(self, positions: np.ndarray) -> np.ndarray:
        """Unsigned distance from each position to the path."""
        pts = np.atleast_2d(np.asarray(positions, dtype=float))
        a, b = self.points[:-1], self.points[1:]
        ev = b - a
        len2 = np.einsum("ij,ij->i", ev, ev)
        diff = pts[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("qej,ej->qe", diff, ev) / len2[None, :], 0.0, 1.0)
        proj = a[None, :, :] + t[..., None] * ev[None, :, :]
        d2 = np.sum((pts[:, None, :] - proj) ** 2, axis=2)
        return np.sqrt(d2.min(axis=1))


def route_displacement_error(rg: Roadgraph, route: Route, positions: np.ndarray) -> float:
    """Mean distance from a position sequence to the route polyline."""
    path = RoutePath(rg, route)
    return float(np.mean(path.distances(positions)))


def route_bend_total(path: RoutePath) -> float:
    """Total absolute heading change along a route polyline."""
    v = np.diff(path.points, axis=0)
    h = np.arctan2(v[:, 1], v[:, 0])
    d = np.diff(h)
    d = (d + np.pi) % (2.0 * np.pi) - np.pi
    return float(np.abs(d).sum())


class RoutePathBatch:
    """Padded edge arrays for one route per observation row.

    Rows without a route are masked out and return zeros from every query.
    """

    def __init__(self, paths: list[RoutePath | None], goal_points: int):
        self.n_rows = len(paths)
        max_e = max((p.points.shape[0] - 1 for p in paths if p is not None), default=1)
        R, E = self.n_rows, max_e
        self.edge_a = np.zeros((R, E, 2))
        self.edge_v = np.zeros((R, E, 2))
        self.edge_len = np.full((R, E), 1.0)
        self.arc0 = np.zeros((R, E))
        self.edge_mask = np.zeros((R, E), dtype=bool)
        self.total = np.zeros(R)
        self.has_route = np.array([p is not None for p in paths])
        self.goal_pts = np.zeros((R, goal_points, 2))
        for r, path in enumerate(paths):
            if path is None:
                continue
            n_e = path.points.shape[0] - 1
            self.edge_a[r, :n_e] = path.points[:-1]
            self.edge_v[r, :n_e] = path.points[1:] - path.points[:-1]
            self.edge_len[r, :n_e] = np.linalg.norm(self.edge_v[r, :n_e], axis=1)
            self.arc0[r, :n_e] = path.arcs[:-1]
            self.edge_mask[r, :n_e] = True
            self.total[r] = path.length
            self.goal_pts[r] = path.subsample(goal_points)
        self._len2 = self.edge_len ** 2

    def project(self, pos: np.ndarray):
        """Batched projection: (arc, signed lateral, unit tangent) per row."""
        diff = pos[:, None, :] - self.edge_a
        t = np.clip(np.einsum("rej,rej->re", diff, self.edge_v) / self._len2, 0.0, 1.0)
        proj = self.edge_a + t[..., None] * self.edge_v
        d2 = np.sum((pos[:, None, :] - proj) ** 2, axis=2)
        d2[~self.edge_mask] = np.inf
        d2[~self.has_route] = 0.0
        j = np.argmin(d2, axis=1)
        rows = np.arange(self.n_rows)
        tangent = self.edge_v[rows, j] / self.edge_len[rows, j][:, None]
        arc = self.arc0[rows, j] + t[rows, j] * self.edge_len[rows, j]
        rel = pos - proj[rows, j]
        lateral = tangent[:, 0] * rel[:, 1] - tangent[:, 1] * rel[:, 0]
        off = ~self.has_route
        arc[off] = 0.0
        lateral[off] = 0.0
        tangent[off] = 0.0
        return arc, lateral, tangent

    def point_at(self, arc: np.ndarray):
        """Batched arc-to-point lookup, clamped; also returns the edge tangent."""
        s = np.clip(arc, 0.0, self.total)
        below = (self.arc0 <= s[:, None]) & self.edge_mask
        j = np.clip(below.sum(axis=1) - 1, 0, self.edge_a.shape[1] - 1)
        rows = np.arange(self.n_rows)
        frac_raw = (s - self.arc0[rows, j]) / self.edge_len[rows, j]
        frac = np.clip(frac_raw, 0.0, 1.0)
        q = self.edge_a[rows, j] + frac[:, None] * self.edge_v[rows, j]
        tangent = self.edge_v[rows, j] / self.edge_len[rows, j][:, None]
        interior = (frac_raw > 0.0) & (frac_raw < 1.0) & self.has_route
        q[~self.has_route] = 0.0
        tangent[~self.has_route] = 0.0
        return q, tangent, interior
