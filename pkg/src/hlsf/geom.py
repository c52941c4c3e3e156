"""Deterministic geometry and preprocessing.

Everything here is a pure function of its inputs; randomness enters only
through an explicitly passed ``numpy.random.Generator``.  Points are
``(N, 2)`` float64 arrays in meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from hlsf.errors import EmptyCandidateError, InvalidInputError

SEARCH_RADIUS = 10.0
LANE_LENGTH = 80.0
LANE_SPACING = 1.0
NUM_LANE_POINTS = 80

_COINCIDENT = 1e-9


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(a <= -np.pi, np.pi, a)


def as_points(points, min_len: int = 1) -> np.ndarray:
    """Validate and convert a point sequence to an ``(N, 2)`` float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError(f"expected (N, 2) points, got shape {arr.shape}")
    if len(arr) < min_len:
        raise InvalidInputError(f"need at least {min_len} points, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("points must be finite")
    return arr


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvalidInputError(f"non-finite point ({self.x}, {self.y})")

    def __array__(self, dtype=None, copy=None):
        return np.array([self.x, self.y], dtype=dtype or np.float64)


@dataclass(frozen=True)
class ProcessedHistory:
    """Rows of ``(x, y, speed, heading)`` sampled at ``psi`` Hz."""

    rows: np.ndarray
    psi: float

    def __len__(self):
        return len(self.rows)


@dataclass(frozen=True)
class ProcessedLane:
    """Rows of ``(x, y, tangent_x, tangent_y, direction)``."""

    rows: np.ndarray
    is_fake: bool = False
    gt: bool = False
    segment_ids: tuple = ()

    @classmethod
    def fake(cls, num_points: int = NUM_LANE_POINTS) -> "ProcessedLane":
        return cls(rows=np.zeros((num_points, 5)), is_fake=True)

    @property
    def points(self) -> np.ndarray:
        return self.rows[:, :2]


@dataclass(frozen=True)
class LaneCandidateSet:
    lanes: tuple
    gt_index: int | None = None

    def __len__(self):
        return len(self.lanes)

    @property
    def valid(self) -> np.ndarray:
        return np.array([not lane.is_fake for lane in self.lanes])

    @property
    def rows(self) -> np.ndarray:
        return np.stack([lane.rows for lane in self.lanes])

    @property
    def points(self) -> np.ndarray:
        return self.rows[..., :2]


# ---------------------------------------------------------------------------
# kinematics and lane features
# ---------------------------------------------------------------------------


def derive_kinematics(raw_track, psi: float) -> ProcessedHistory:
    """Append backward-difference speed and heading to each position.

    Zero displacements keep the previous heading (0 before any motion).  The
    first row copies the derived values of the second.
    """
    p = as_points(raw_track)
    if len(p) < 2:
        raise InvalidInputError("derive_kinematics needs at least 2 points")
    if not psi > 0:
        raise InvalidInputError(f"sampling rate must be positive, got {psi}")
    d = np.diff(p, axis=0)
    step = np.hypot(d[:, 0], d[:, 1])
    heading = np.empty(len(d))
    prev = 0.0
    for k in range(len(d)):
        if step[k] > _COINCIDENT:
            prev = float(wrap_angle(math.atan2(d[k, 1], d[k, 0])))
        heading[k] = prev
    rows = np.empty((len(p), 4))
    rows[:, :2] = p
    rows[1:, 2] = psi * step
    rows[1:, 3] = heading
    rows[0, 2:] = rows[1, 2:]
    return ProcessedHistory(rows=rows, psi=float(psi))


def derive_lane_geometry(centerline, num_points: int = NUM_LANE_POINTS,
                         rel_tol: float = 1e-6) -> ProcessedLane:
    """Tangent vectors and their directions for an equally spaced centerline."""
    p = as_points(centerline)
    if len(p) != num_points:
        raise InvalidInputError(f"lane must have {num_points} points, got {len(p)}")
    v = np.diff(p, axis=0)
    gaps = np.hypot(v[:, 0], v[:, 1])
    if gaps.min() <= _COINCIDENT:
        raise InvalidInputError("lane has coincident consecutive points")
    if (gaps.max() - gaps.min()) > rel_tol * gaps.mean():
        raise InvalidInputError("lane points are not equally spaced")
    rows = np.empty((len(p), 5))
    rows[:, :2] = p
    rows[1:, 2:4] = v
    rows[0, 2:4] = v[0]
    rows[:, 4] = wrap_angle(np.arctan2(rows[:, 3], rows[:, 2]))
    return ProcessedLane(rows=rows)


# ---------------------------------------------------------------------------
# polylines
# ---------------------------------------------------------------------------


def _dedupe(p: np.ndarray) -> np.ndarray:
    keep = np.ones(len(p), dtype=bool)
    keep[1:] = np.hypot(*np.diff(p, axis=0).T) > _COINCIDENT
    return p[keep]


def arc_length(p) -> float:
    p = as_points(p)
    return float(np.hypot(*np.diff(p, axis=0).T).sum()) if len(p) > 1 else 0.0


def resample_polyline(p, spacing: float = LANE_SPACING,
                      length: float = LANE_LENGTH) -> np.ndarray:
    """Walk the polyline emitting points exactly ``spacing`` apart (chord).

    The first output point is the first input point and
    ``round(length / spacing)`` points are produced.  Each new point is the
    first place along the polyline at Euclidean distance ``spacing`` from the
    previous one; past the end the final segment is extended as a ray.
    """
    if not spacing > 0:
        raise InvalidInputError(f"spacing must be positive, got {spacing}")
    pts = _dedupe(as_points(p))
    if len(pts) < 2:
        raise InvalidInputError("degenerate polyline (zero length)")
    n = max(int(round(length / spacing)), 1)
    a_all = pts[:-1]
    v_all = pts[1:] - pts[:-1]
    nseg = len(v_all)
    d2 = spacing * spacing
    out = np.empty((n, 2))
    out[0] = q = pts[0]
    seg, t0 = 0, 0.0
    for k in range(1, n):
        while True:
            last = seg == nseg - 1
            end = pts[seg + 1]
            if not last and (end[0] - q[0]) ** 2 + (end[1] - q[1]) ** 2 < d2:
                seg, t0 = seg + 1, 0.0
                continue
            a, v = a_all[seg], v_all[seg]
            w = a - q
            qa = v @ v
            qb = 2.0 * (v @ w)
            qc = w @ w - d2
            root = math.sqrt(max(qb * qb - 4.0 * qa * qc, 0.0))
            # larger root, written to avoid cancellation
            t = (-qb + root) / (2.0 * qa) if qb <= 0 else 2.0 * qc / (-qb - root)
            t = max(t, t0)
            if not last:
                t = min(t, 1.0)
            break
        q = a + t * v
        t0 = t
        out[k] = q
    return out


def project_to_polyline(point, p) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Closest point on a polyline by segment projection.

    Returns ``(distance, arc_position, closest_point, unit_tangent)``.
    """
    q = np.asarray(point, dtype=np.float64)
    pts = _dedupe(as_points(p))
    if len(pts) == 1:
        return float(np.hypot(*(pts[0] - q))), 0.0, pts[0], np.array([1.0, 0.0])
    a = pts[:-1]
    v = pts[1:] - a
    seg_len = np.hypot(v[:, 0], v[:, 1])
    t = np.clip(np.einsum("ij,ij->i", q - a, v) / seg_len**2, 0.0, 1.0)
    c = a + t[:, None] * v
    dist = np.hypot(*(c - q).T)
    i = int(np.argmin(dist))
    s = float(seg_len[:i].sum() + t[i] * seg_len[i])
    return float(dist[i]), s, c[i], v[i] / seg_len[i]


def polyline_distance(points, p) -> np.ndarray:
    """Distance from each query point to a polyline (segment projection)."""
    q = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pts = _dedupe(as_points(p))
    if len(pts) == 1:
        return np.hypot(*(q - pts[0]).T)
    a = pts[:-1]
    v = pts[1:] - a
    vv = np.einsum("ij,ij->i", v, v)
    rel = q[:, None, :] - a[None]
    t = np.clip(np.einsum("nij,ij->ni", rel, v) / vv, 0.0, 1.0)
    diff = rel - t[..., None] * v[None]
    return np.sqrt((diff**2).sum(-1)).min(axis=1)


def _slice_polyline(pts: np.ndarray, s0: float) -> np.ndarray:
    """Part of the polyline from arc position ``s0`` to its end."""
    seg_len = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    i = int(np.clip(np.searchsorted(cum, s0, side="right") - 1, 0, len(seg_len) - 1))
    t = 0.0 if seg_len[i] == 0 else (s0 - cum[i]) / seg_len[i]
    start = pts[i] + t * (pts[i + 1] - pts[i])
    out = _dedupe(np.vstack([start, pts[i + 1:]]))
    if len(out) < 2:
        # vehicle projects onto the chain end: continue along the last segment
        u = (pts[-1] - pts[-2]) / seg_len[-1]
        out = np.vstack([start, start + u])
    return out


# ---------------------------------------------------------------------------
# lane candidates
# ---------------------------------------------------------------------------


def _chain_paths(segments: Mapping[str, np.ndarray], succ: Mapping[str, Sequence[str]],
                 start: str, reach: float, max_depth: int = 64) -> list[tuple[str, ...]]:
    paths = []
    stack = [((start,), arc_length(segments[start]))]
    while stack:
        ids, total = stack.pop()
        nxt = [s for s in succ.get(ids[-1], ()) if s in segments and s not in ids]
        if total >= reach or not nxt or len(ids) >= max_depth:
            paths.append(ids)
            continue
        for s in sorted(nxt, reverse=True):
            stack.append((ids + (s,), total + arc_length(segments[s])))
    return paths


def _concat(segments: Mapping[str, np.ndarray], ids: Sequence[str]):
    parts, bounds, total = [], [], 0.0
    for sid in ids:
        seg = as_points(segments[sid], min_len=2)
        if parts and np.hypot(*(seg[0] - parts[-1][-1])) <= 0.5:
            seg = seg[1:] if len(seg) > 1 else seg
        seg_len = arc_length(np.vstack([parts[-1][-1:], seg])) if parts else arc_length(seg)
        bounds.append((total, total + seg_len))
        total += seg_len
        parts.append(seg)
    return _dedupe(np.vstack(parts)), bounds


def candidate_polylines(vmap, pose, *, radius: float = SEARCH_RADIUS,
                        length: float = LANE_LENGTH) -> list[tuple[tuple[str, ...], np.ndarray]]:
    """Centerline chains reachable from segments near ``pose``.

    ``vmap`` needs ``segments`` (id -> points), ``succ`` and ``pred``
    (id -> list of ids).  ``pose`` is ``(x, y, heading)``.  Each result is
    ``(segment_ids, polyline)`` with the polyline starting at the vehicle's
    projection onto the chain; results are sorted by segment ids.
    """
    x, y, heading = (float(v) for v in pose)
    q = np.array([x, y])
    fwd = np.array([math.cos(heading), math.sin(heading)])
    segments = {k: as_points(v, min_len=2) for k, v in vmap.segments.items()}
    starts = set()
    for sid, pts in segments.items():
        dist, _, _, tangent = project_to_polyline(q, pts)
        if dist <= radius and tangent @ fwd >= 0.0:
            starts.add(sid)
    # chains entering through an in-radius predecessor already cover these
    roots = sorted(s for s in starts
                   if not any(p in starts for p in vmap.pred.get(s, ())))
    if not roots and starts:
        roots = sorted(starts)
    found: dict[tuple[str, ...], np.ndarray] = {}
    for root in roots:
        _, s_root, _, _ = project_to_polyline(q, segments[root])
        for ids in _chain_paths(segments, vmap.succ, root, reach=s_root + length + 1.0):
            poly, bounds = _concat(segments, ids)
            _, s0, _, _ = project_to_polyline(q, poly)
            used = tuple(sid for sid, (lo, hi) in zip(ids, bounds)
                         if hi > s0 + 1e-9 and lo < s0 + length)
            if not used:
                used = ids[-1:]
            if used not in found:
                found[used] = _slice_polyline(poly, s0)
    return sorted(found.items())


def _mean_nearest_distance(future: np.ndarray, lane_points: np.ndarray) -> float:
    d = np.sqrt(((future[:, None, :] - lane_points[None]) ** 2).sum(-1))
    return float(d.min(axis=1).mean())


def label_ground_truth_lane(future, candidates: LaneCandidateSet) -> int:
    """Index of the non-fake lane with lowest mean distance to ``future``."""
    fut = as_points(future)
    best, best_d = -1, math.inf
    for i, lane in enumerate(candidates.lanes):
        if lane.is_fake:
            continue
        d = _mean_nearest_distance(fut, lane.points)
        if d < best_d:
            best, best_d = i, d
    if best < 0:
        raise InvalidInputError("all lane candidates are fake")
    return best


def build_lane_candidates(vmap, pose, M: int = 10, rng: np.random.Generator | None = None,
                          future=None, *, radius: float = SEARCH_RADIUS,
                          length: float = LANE_LENGTH, spacing: float = LANE_SPACING,
                          ) -> LaneCandidateSet:
    """Exactly ``M`` processed lanes, padded with fake lanes.

    With ``future`` given, the ground-truth lane is labeled before any
    subsampling so it always survives; the remaining ``M - 1`` are drawn
    uniformly with ``rng``.
    """
    if M < 1:
        raise InvalidInputError(f"M must be >= 1, got {M}")
    if not vmap.segments:
        raise InvalidInputError("map has no segments")
    found = candidate_polylines(vmap, pose, radius=radius, length=length)
    if not found:
        raise EmptyCandidateError(f"no lane within {radius} m of {tuple(pose)[:2]}")
    num_points = int(round(length / spacing))
    lanes = [replace(derive_lane_geometry(resample_polyline(poly, spacing, length), num_points),
                     segment_ids=ids) for ids, poly in found]
    gt = None
    if future is not None:
        gt = label_ground_truth_lane(future, LaneCandidateSet(tuple(lanes)))
    if len(lanes) > M:
        rng = rng if rng is not None else np.random.default_rng(0)
        if gt is None:
            keep = sorted(rng.choice(len(lanes), M, replace=False).tolist())
        else:
            others = [i for i in range(len(lanes)) if i != gt]
            keep = sorted(rng.choice(others, M - 1, replace=False).tolist() + [gt])
            gt = keep.index(gt)
        lanes = [lanes[i] for i in keep]
    if gt is not None:
        lanes[gt] = replace(lanes[gt], gt=True)
    lanes += [ProcessedLane.fake(num_points) for _ in range(M - len(lanes))]
    return LaneCandidateSet(lanes=tuple(lanes), gt_index=gt)


def nearest_centerline_point(p, lane) -> tuple[int, np.ndarray, float]:
    """Discrete nearest lane point; lowest index wins ties."""
    if isinstance(lane, ProcessedLane):
        if lane.is_fake:
            raise InvalidInputError("nearest_centerline_point on a fake lane")
        pts = lane.points
    else:
        pts = as_points(lane)
    q = np.asarray(p, dtype=np.float64).reshape(2)
    d = np.hypot(pts[:, 0] - q[0], pts[:, 1] - q[1])
    i = int(np.argmin(d))
    return i, pts[i].copy(), float(d[i])


# ---------------------------------------------------------------------------
# frames and neighbors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    """Rigid frame with ``origin`` at the target and +x along ``heading``."""

    origin: np.ndarray
    heading: float

    def _rot(self, angle):
        c, s = math.cos(angle), math.sin(angle)
        return np.array([[c, -s], [s, c]])

    def to_local(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.origin) @ self._rot(-self.heading).T

    def to_world(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self._rot(self.heading).T + self.origin


@dataclass
class SceneView:
    """A scene expressed in one target's frame."""

    frame: Frame
    target_id: str
    agent_ids: list
    positions: dict
    valid: dict
    segments: dict
    succ: dict
    pred: dict
    H: int
    T: int
    psi: float
    extras: dict = field(default_factory=dict)

    @property
    def current_index(self) -> int:
        return self.H


def _target_heading(track: np.ndarray, H: int, vmap) -> float:
    for k in range(H, 0, -1):
        d = track[k] - track[k - 1]
        if math.hypot(d[0], d[1]) > _COINCIDENT:
            return math.atan2(d[1], d[0])
    best, heading = math.inf, 0.0
    for sid in sorted(vmap.segments):
        dist, _, _, tangent = project_to_polyline(track[H], vmap.segments[sid])
        if dist < best:
            best, heading = dist, math.atan2(tangent[1], tangent[0])
    return heading


def to_target_frame(scene, target: str) -> SceneView:
    """Rigidly transform tracks and map so ``target`` sits at the origin facing +x."""
    tracks = {tr.agent_id: tr for tr in scene.tracks}
    if target not in tracks:
        raise InvalidInputError(f"unknown target {target!r}")
    H = scene.H
    own = as_points(tracks[target].positions)
    if H < 1 or len(own) < H + 1:
        raise InvalidInputError("target needs at least 2 history points")
    frame = Frame(origin=own[H].copy(), heading=_target_heading(own, H, scene.map))
    return SceneView(
        frame=frame,
        target_id=target,
        agent_ids=[tr.agent_id for tr in scene.tracks],
        positions={k: frame.to_local(as_points(tr.positions)) for k, tr in tracks.items()},
        valid={k: np.asarray(tr.valid, dtype=bool) for k, tr in tracks.items()},
        segments={k: frame.to_local(as_points(v)) for k, v in scene.map.segments.items()},
        succ={k: list(v) for k, v in scene.map.succ.items()},
        pred={k: list(v) for k, v in scene.map.pred.items()},
        H=H, T=scene.T, psi=scene.psi,
    )


def select_neighbors(view: SceneView, target: str, lane: ProcessedLane, tau: float = 5.0) -> set:
    """Target plus agents whose current position is within ``tau`` of the lane."""
    if not tau > 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    chosen = {target}
    if lane.is_fake:
        return chosen
    t = view.current_index
    for aid in view.agent_ids:
        if aid == target or not view.valid[aid][t]:
            continue
        _, _, dist = nearest_centerline_point(view.positions[aid][t], lane)
        if dist <= tau:
            chosen.add(aid)
    return chosen


def fill_invalid(points: np.ndarray, valid: Iterable[bool]) -> np.ndarray:
    """Replace invalid rows by the nearest valid row (earlier wins ties)."""
    valid = np.asarray(list(valid), dtype=bool)
    if valid.all():
        return points
    if not valid.any():
        raise InvalidInputError("track has no valid timestep")
    idx = np.flatnonzero(valid)
    out = points.copy()
    for k in np.flatnonzero(~valid):
        j = idx[np.argmin(np.abs(idx - k))]
        out[k] = points[j]
    return out
