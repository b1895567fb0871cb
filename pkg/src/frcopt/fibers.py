"""Continuous fiber track extraction from a converged design field.

Tracks are marched through the implicit field with a fixed step: each
step follows the orientation sampled at the current point (sub-element
resolution), aligned with the previous heading so the pi-ambiguity of the
orientation cannot fold a track back on itself. Per-element fiber budgets
(the converged fiber density) are charged as segments are committed,
clipped to the elements they cross; tracing stops at the domain boundary,
at void elements, and at elements whose budget is spent.

Each element may seed several tracks. Repeat seeds are offset
perpendicular to the local orientation by the natural fiber spacing
(thickness / target density), so coexisting tracks tile the element
instead of coinciding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fea import StructuredGrid


@dataclass(frozen=True)
class ExtractionParams:
    """Tracing controls: fiber thickness and step size in mm, matrix
    density threshold below which an element counts as void, and a
    per-track point cap (default 10*(nelx+nely)) guarding rotational
    fields."""

    thickness: float = 0.1
    step: float = 0.5
    void_threshold: float = 0.5
    max_points: int | None = None

    def __post_init__(self):
        if self.thickness <= 0 or self.step <= 0:
            raise ValueError("thickness and step must be positive")
        if not 0.0 < self.void_threshold < 1.0:
            raise ValueError("void threshold must be in (0, 1)")

    def point_cap(self, grid: StructuredGrid) -> int:
        if self.max_points is not None:
            return self.max_points
        return 10 * (grid.nelx + grid.nely)


@dataclass
class FiberTrack:
    """Ordered polyline of one fiber; consecutive points are one step
    apart."""

    points: np.ndarray  # (m, 2) mm
    thickness: float

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


class ExtractionState:
    """Per-element bookkeeping during extraction."""

    def __init__(self, grid: StructuredGrid, rho_m: np.ndarray,
                 rho_f: np.ndarray):
        self.grid = grid
        self.rho_m = np.asarray(rho_m, dtype=np.float64)
        self.target = np.asarray(rho_f, dtype=np.float64)
        self.achieved = np.zeros(grid.n_elems)
        self.seeds_placed = np.zeros(grid.n_elems, dtype=np.int64)
        self.blocked = np.zeros(grid.n_elems, dtype=bool)


def segment_element_lengths(p: np.ndarray, q: np.ndarray,
                            grid: StructuredGrid) -> list[tuple[int, float]]:
    """Split the segment p->q at element boundaries.

    Returns (element, length) pairs for each piece; both endpoints must
    lie inside the domain.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d = q - p
    seg_len = float(np.hypot(d[0], d[1]))
    if seg_len == 0.0:
        return []
    ts = [0.0, 1.0]
    for axis, count in ((0, grid.nelx), (1, grid.nely)):
        if d[axis] == 0.0:
            continue
        lo, hi = sorted((p[axis], q[axis]))
        first = int(np.ceil(lo / grid.h))
        last = int(np.floor(hi / grid.h))
        for k in range(first, last + 1):
            t = (k * grid.h - p[axis]) / d[axis]
            if 0.0 < t < 1.0:
                ts.append(t)
    ts = sorted(set(ts))
    pieces = []
    for t0, t1 in zip(ts[:-1], ts[1:]):
        mid = p + 0.5 * (t0 + t1) * d
        e = int(grid.element_of_points(mid[None])[0])
        if e >= 0:
            pieces.append((e, seg_len * (t1 - t0)))
    return pieces


def density_increment(p: np.ndarray, q: np.ndarray, element: int,
                      grid: StructuredGrid, thickness: float) -> float:
    """Fiber area fraction the segment adds to one element:
    thickness * (length clipped to the element) / element area."""
    clipped = sum(ln for e, ln in segment_element_lengths(p, q, grid)
                  if e == element)
    return thickness * clipped / grid.elem_area


def _charge(state: ExtractionState, p: np.ndarray, q: np.ndarray,
            thickness: float) -> None:
    for e, ln in segment_element_lengths(p, q, state.grid):
        state.achieved[e] += thickness * ln / state.grid.elem_area


def trace_step(point: np.ndarray, heading: np.ndarray, theta_at,
               grid: StructuredGrid, params: ExtractionParams,
               state: ExtractionState):
    """One marching step from `point`.

    Returns (next_point, direction) or (None, None) on termination: the
    candidate leaves the domain, enters a void element, or enters an
    element whose budget is spent. The direction is theta at the current
    point, sign-flipped (theta vs theta + pi) to continue the previous
    heading.
    """
    th = float(theta_at(point))
    d = np.array([np.cos(th), np.sin(th)])
    if float(d @ heading) < 0.0:
        d = -d
    nxt = point + params.step * d
    e = int(grid.element_of_points(nxt[None])[0])
    if e < 0:
        return None, None
    if state.rho_m[e] < params.void_threshold:
        return None, None
    if state.achieved[e] >= state.target[e]:
        return None, None
    return nxt, d


def _trace_pass(seed: np.ndarray, sign: float, theta_at,
                grid: StructuredGrid, params: ExtractionParams,
                state: ExtractionState, cap: int) -> list[np.ndarray]:
    pts = [seed]
    th0 = float(theta_at(seed))
    heading = sign * np.array([np.cos(th0), np.sin(th0)])
    pos = seed
    while len(pts) < cap:
        nxt, d = trace_step(pos, heading, theta_at, grid, params, state)
        if nxt is None:
            break
        _charge(state, pos, nxt, params.thickness)
        pts.append(nxt)
        heading = d
        pos = nxt
    return pts


def _seed_point(state: ExtractionState, e: int, theta_at,
                params: ExtractionParams):
    """Seed position for the next track in element e, or None when the
    offset pattern is exhausted.

    Seed 0 sits at the element center; later seeds alternate +-k spacing
    units perpendicular to the local orientation, where the spacing
    thickness / target density is what parallel fibers need to tile the
    element to its target fraction.
    """
    grid = state.grid
    i, j = e % grid.nelx, e // grid.nelx
    center = np.array([(i + 0.5) * grid.h, (j + 0.5) * grid.h])
    k = int(state.seeds_placed[e])
    if k == 0:
        return center
    spacing = params.thickness / max(state.target[e], 1e-12)
    magnitude = ((k + 1) // 2) * spacing
    if magnitude > (grid.h - params.thickness) / 2.0:
        return None
    th = float(theta_at(center))
    perp = np.array([-np.sin(th), np.cos(th)])
    sign = 1.0 if k % 2 == 1 else -1.0
    return center + sign * magnitude * perp


def extract_fibers(field_query, grid: StructuredGrid,
                   params: ExtractionParams) -> list[FiberTrack]:
    """March fiber tracks until no element has remaining budget.

    `field_query` maps (m, 2) points to a dict with at least "rho_m",
    "rho_f" and "theta" arrays; the matrix and fiber densities are
    sampled once at element centers (targets and void test), while the
    orientation is queried continuously along each track.
    """
    centers = grid.element_centers()
    sampled = field_query(centers)
    state = ExtractionState(grid, sampled["rho_m"], sampled["rho_f"])

    def theta_at(point):
        return field_query(np.asarray(point, dtype=np.float64)[None])["theta"][0]

    cap = params.point_cap(grid)
    tracks: list[FiberTrack] = []
    for e in range(grid.n_elems):
        if state.rho_m[e] < params.void_threshold:
            continue
        while (not state.blocked[e]
               and state.achieved[e] < state.target[e] - 1e-12):
            seed = _seed_point(state, e, theta_at, params)
            state.seeds_placed[e] += 1
            if seed is None:
                state.blocked[e] = True
                break
            fwd = _trace_pass(seed, 1.0, theta_at, grid, params, state, cap)
            bwd = _trace_pass(seed, -1.0, theta_at, grid, params, state, cap)
            pts = list(reversed(bwd[1:])) + fwd
            if len(pts) < 2:
                state.blocked[e] = True
                break
            tracks.append(FiberTrack(np.array(pts), params.thickness))
    return tracks
