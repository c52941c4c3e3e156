"""Synthetic vectorized driving scenes with known ground-truth lanes.

Each template lays out lane centerlines in a canonical frame, drives agents
along them with template-specific speed and lateral profiles, adds Gaussian
position noise and finally applies a random rigid transform.  The segment
id of the lane the target really follows is stored in ``gt_lane_hint``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from hlsf.errors import ConfigError
from hlsf.scenes.core import AgentTrack, Scene, VectorMap

TEMPLATES = ("straight", "curve", "fork3", "merge", "lane_change",
             "parallel_multilane", "stopped_queue")

PRESETS = {
    "nuscenes": {"psi": 2.0, "H": 4, "T": 12},
    "argoverse": {"psi": 2.0, "H": 4, "T": 6},
}

TARGET_ID = "target"


@dataclass(frozen=True)
class DatasetSpec:
    """What to generate.

    ``templates`` is either a sequence of names (uniform mix) or a mapping
    name -> relative weight.  ``branch_probs`` are the fork3 probabilities
    of (left, straight, right).
    """

    templates: Sequence[str] | Mapping[str, float] = ("fork3",)
    n: int = 100
    seed: int = 0
    lateral_noise: float = 0.1
    longitudinal_noise: float = 0.1
    branch_probs: tuple = (1 / 3, 1 / 3, 1 / 3)
    preset: str = "nuscenes"
    rotate: bool = True
    extras: dict = field(default_factory=dict)

    def mix(self) -> tuple[list[str], np.ndarray]:
        if isinstance(self.templates, Mapping):
            names = list(self.templates)
            w = np.array([float(self.templates[k]) for k in names])
        else:
            names = list(self.templates)
            w = np.ones(len(names))
        if not names:
            raise ConfigError("no templates given")
        for name in names:
            if name not in TEMPLATES:
                raise ConfigError(f"unknown template {name!r}; choose from {TEMPLATES}")
        if np.any(w < 0) or w.sum() <= 0:
            raise ConfigError("template weights must be non-negative with positive sum")
        return names, w / w.sum()


class _Path:
    """Arc-length parameterized polyline, extended linearly past both ends."""

    def __init__(self, pts):
        self.pts = np.asarray(pts, dtype=np.float64)
        seg = np.diff(self.pts, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.dirs = seg / self.seg_len[:, None]
        self.length = float(self.cum[-1])

    def _locate(self, s):
        s = np.asarray(s, dtype=np.float64)
        i = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg_len) - 1)
        return i, s - self.cum[i]

    def point(self, s):
        i, r = self._locate(s)
        return self.pts[i] + r[..., None] * self.dirs[i]

    def tangent(self, s):
        i, _ = self._locate(s)
        return self.dirs[i]

    def normal(self, s):
        t = self.tangent(s)
        return np.stack([-t[..., 1], t[..., 0]], axis=-1)


def _line(p0, p1, step=2.0):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(int(math.ceil(np.hypot(*(p1 - p0)) / step)), 1)
    return p0 + np.linspace(0.0, 1.0, n + 1)[:, None] * (p1 - p0)


def _turn(start, heading, radius, angle, tail, step=1.0):
    """Arc turning by ``angle`` (positive = left) then a straight tail."""
    side = 1.0 if angle >= 0 else -1.0
    n = max(int(math.ceil(radius * abs(angle) / step)), 2)
    phi = np.linspace(0.0, abs(angle), n + 1)
    local = np.stack([radius * np.sin(phi), side * radius * (1 - np.cos(phi))], axis=1)
    c, s = math.cos(heading), math.sin(heading)
    arc = np.asarray(start, float) + local @ np.array([[c, s], [-s, c]])
    end_heading = heading + angle
    tail_end = arc[-1] + tail * np.array([math.cos(end_heading), math.sin(end_heading)])
    return np.vstack([arc, _line(arc[-1], tail_end)[1:]])


class _Builder:
    def __init__(self, spec: DatasetSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        p = PRESETS[spec.preset]
        self.psi, self.H, self.T = p["psi"], p["H"], p["T"]
        self.N = self.H + 1 + self.T
        self.dt = 1.0 / self.psi
        self.segments: dict[str, np.ndarray] = {}
        self.succ: dict[str, list[str]] = {}
        self.pred: dict[str, list[str]] = {}
        self.tracks: list[AgentTrack] = []

    def add_segment(self, sid, pts, after=()):
        self.segments[sid] = np.asarray(pts, dtype=np.float64)
        for p in after:
            self.succ.setdefault(p, []).append(sid)
            self.pred.setdefault(sid, []).append(p)

    def times(self):
        return (np.arange(self.N) - self.H) * self.dt

    def drive(self, agent_id, path: _Path, s, lat=None, noise_scale=1.0, valid=None):
        s = np.asarray(s, dtype=np.float64)
        lat = np.zeros_like(s) if lat is None else np.asarray(lat, dtype=np.float64)
        sl = self.spec.longitudinal_noise * noise_scale
        sd = self.spec.lateral_noise * noise_scale
        if sl > 0:
            s = s + self.rng.normal(0.0, sl, size=s.shape)
        if sd > 0:
            lat = lat + self.rng.normal(0.0, sd, size=s.shape)
        pos = path.point(s) + lat[:, None] * path.normal(s)
        if valid is None:
            valid = np.ones(self.N, dtype=bool)
        self.tracks.append(AgentTrack(agent_id, pos, valid))

    def cruise(self, s_now, v, accel=0.0):
        t = self.times()
        return s_now + v * t + 0.5 * accel * t * np.abs(t)

    def neighbor_valid(self):
        valid = np.ones(self.N, dtype=bool)
        if self.rng.random() < 0.2:
            valid[: int(self.rng.integers(1, 3))] = False
        return valid

    def finish(self, scene_id, hint) -> Scene:
        if self.spec.rotate:
            theta = self.rng.uniform(-math.pi, math.pi)
            shift = self.rng.uniform(-300.0, 300.0, size=2)
        else:
            theta, shift = 0.0, np.zeros(2)
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -s], [s, c]])

        def tf(pts):
            return pts @ rot.T + shift

        vmap = VectorMap({k: tf(v) for k, v in self.segments.items()}, self.succ, self.pred)
        tracks = [AgentTrack(tr.agent_id, tf(tr.positions), tr.valid) for tr in self.tracks]
        return Scene(scene_id=scene_id, psi=self.psi, H=self.H, T=self.T, map=vmap,
                     tracks=tracks, targets=[TARGET_ID], gt_lane_hint={TARGET_ID: hint})


def _parallel_lanes(b: _Builder, n_lanes, width, x0=-150.0, x_mid=0.0, x1=250.0):
    paths = []
    for j in range(n_lanes):
        y = j * width
        b.add_segment(f"lane{j}a", _line((x0, y), (x_mid, y)))
        b.add_segment(f"lane{j}b", _line((x_mid, y), (x1, y)), after=[f"lane{j}a"])
        paths.append(_Path(_line((x0, y), (x1, y))))
    return paths


def _straight(b: _Builder):
    rng = b.rng
    n_lanes = int(rng.integers(1, 4))
    paths = _parallel_lanes(b, n_lanes, rng.uniform(3.5, 4.5))
    j = int(rng.integers(n_lanes))
    s_now = 150.0 + rng.uniform(-10, 10)
    b.drive(TARGET_ID, paths[j], b.cruise(s_now, rng.uniform(6, 14), rng.uniform(-0.5, 0.5)))
    for k in range(int(rng.integers(0, 5))):
        lane = paths[int(rng.integers(n_lanes))]
        off = rng.choice([-1, 1]) * rng.uniform(10, 40)
        b.drive(f"n{k}", lane, b.cruise(s_now + off, rng.uniform(6, 14)), valid=b.neighbor_valid())
    return f"lane{j}b"


def _curve(b: _Builder):
    rng = b.rng
    n_lanes = int(rng.integers(1, 3))
    width = rng.uniform(3.5, 4.5)
    radius = rng.uniform(40, 120)
    angle = rng.choice([-1, 1]) * rng.uniform(math.pi / 4, math.pi / 2)
    paths = []
    for j in range(n_lanes):
        off = j * width
        # concentric: inner/outer radius depends on turn side
        r = radius - off if angle > 0 else radius + off
        pre = _line((-100, off), (0, off))
        arc = _turn((0, off), 0.0, r, angle, 150.0)
        pts = np.vstack([pre, arc[1:]])
        b.add_segment(f"curve{j}", pts)
        paths.append(_Path(pts))
    j = int(rng.integers(n_lanes))
    s_now = 100.0 - rng.uniform(0, 40)
    b.drive(TARGET_ID, paths[j], b.cruise(s_now, rng.uniform(6, 12), rng.uniform(-0.5, 0.3)))
    for k in range(int(rng.integers(0, 3))):
        lane = paths[int(rng.integers(n_lanes))]
        off = rng.choice([-1, 1]) * rng.uniform(10, 35)
        b.drive(f"n{k}", lane, b.cruise(s_now + off, rng.uniform(6, 12)), valid=b.neighbor_valid())
    return f"curve{j}"


FORK_BRANCHES = ("left", "straight", "right")


def _fork3(b: _Builder):
    rng = b.rng
    probs = np.asarray(b.spec.branch_probs, dtype=float)
    if probs.shape != (3,) or np.any(probs < 0) or probs.sum() <= 0:
        raise ConfigError(f"branch_probs must be three non-negative numbers, got {b.spec.branch_probs}")
    probs = probs / probs.sum()
    root = _line((-150, 0), (0, 0))
    branch_pts = {"straight": _line((0, 0), (150, 0))}
    for name, side in (("left", 1.0), ("right", -1.0)):
        branch_pts[name] = _turn((0, 0), 0.0, rng.uniform(20, 35),
                                 side * rng.uniform(math.radians(50), math.radians(90)), 100.0)
    b.add_segment("root", root)
    for name in FORK_BRANCHES:
        b.add_segment(name, branch_pts[name], after=["root"])
    paths = {n: _Path(np.vstack([root, branch_pts[n][1:]])) for n in FORK_BRANCHES}
    fork_s = 150.0

    branch = FORK_BRANCHES[int(rng.choice(3, p=probs))]
    cue = rng.uniform(0.3, 1.0)
    s_now = fork_s - rng.uniform(-5, 20)
    v_start = rng.uniform(10, 13)
    t = b.times()
    if branch == "straight":
        v = v_start + rng.uniform(-0.2, 0.3) * (t - t[0])
        lat = np.zeros(b.N)
    else:
        decel = cue * rng.uniform(1.0, 2.0)
        v = np.maximum(rng.uniform(5, 7), v_start - decel * (t - t[0]))
    s_rel = np.concatenate([[0.0], np.cumsum(v[:-1] * b.dt)])
    s = s_now + s_rel - s_rel[b.H]
    if branch != "straight":
        side = 1.0 if branch == "left" else -1.0
        ramp = np.clip((s - (fork_s - 35.0)) / 30.0, 0.0, 1.0)
        fade = np.clip(1.0 - (s - fork_s) / 10.0, 0.0, 1.0)
        lat = side * cue * 0.9 * np.minimum(ramp, fade)
    b.drive(TARGET_ID, paths[branch], s, lat)
    for k in range(int(rng.integers(0, 4))):
        other = paths[FORK_BRANCHES[int(rng.integers(3))]]
        off = rng.uniform(12, 50) if rng.random() < 0.6 else -rng.uniform(10, 30)
        b.drive(f"n{k}", other, b.cruise(s_now + off, rng.uniform(7, 12)), valid=b.neighbor_valid())
    return branch


def _merge(b: _Builder):
    rng = b.rng
    offset = 20.0 * rng.choice([-1.0, 1.0])
    a_pts = _line((-150, 0), (0, 0))
    xs = np.linspace(-150, 0, 76)
    b_pts = np.stack([xs, offset * (1 + np.cos(np.pi * (xs + 150) / 150)) / 2], axis=1)
    m_pts = _line((0, 0), (200, 0))
    b.add_segment("approachA", a_pts)
    b.add_segment("approachB", b_pts)
    b.add_segment("merged", m_pts, after=["approachA", "approachB"])
    paths = {"approachA": _Path(np.vstack([a_pts, m_pts[1:]])),
             "approachB": _Path(np.vstack([b_pts, m_pts[1:]]))}
    own = "approachA" if rng.random() < 0.5 else "approachB"
    other = "approachB" if own == "approachA" else "approachA"
    s_now = paths[own].length - 200.0 - rng.uniform(40, 60)
    b.drive(TARGET_ID, paths[own], b.cruise(s_now, rng.uniform(8, 12), rng.uniform(-0.3, 0.3)))
    for k in range(int(rng.integers(0, 3))):
        which = paths[other] if rng.random() < 0.6 else paths[own]
        s_other = which.length - 200.0 - rng.uniform(5, 60)
        b.drive(f"n{k}", which, b.cruise(s_other, rng.uniform(7, 12)), valid=b.neighbor_valid())
    return own


def _lane_change(b: _Builder):
    rng = b.rng
    width = rng.uniform(3.5, 4.5)
    side = rng.choice([-1.0, 1.0])
    b.add_segment("laneA", _line((-150, 0), (250, 0)))
    b.add_segment("laneB", _line((-150, side * width), (250, side * width)))
    path_a = _Path(b.segments["laneA"])
    path_b = _Path(b.segments["laneB"])
    s_now = 150.0 + rng.uniform(-10, 10)
    s = b.cruise(s_now, rng.uniform(8, 13), rng.uniform(-0.3, 0.3))
    k_start = int(rng.integers(b.H - 3, b.H + 1))
    n_change = int(rng.integers(5, 8))
    u = np.clip((np.arange(b.N) - k_start) / n_change, 0.0, 1.0)
    lat = side * width * (3 * u**2 - 2 * u**3)
    b.drive(TARGET_ID, path_a, s, lat)
    for k in range(int(rng.integers(0, 3))):
        lane = path_b if rng.random() < 0.6 else path_a
        off = rng.choice([-1, 1]) * rng.uniform(15, 40)
        b.drive(f"n{k}", lane, b.cruise(s_now + off, rng.uniform(8, 13)), valid=b.neighbor_valid())
    return "laneB"


def _parallel_multilane(b: _Builder):
    rng = b.rng
    n_lanes = int(rng.integers(3, 6))
    paths = _parallel_lanes(b, n_lanes, rng.uniform(3.5, 4.5))
    j = int(rng.integers(n_lanes))
    s_now = 150.0 + rng.uniform(-10, 10)
    b.drive(TARGET_ID, paths[j], b.cruise(s_now, rng.uniform(7, 14), rng.uniform(-0.5, 0.5)))
    for k in range(int(rng.integers(3, 8))):
        lane = paths[int(rng.integers(n_lanes))]
        off = rng.choice([-1, 1]) * rng.uniform(8, 45)
        b.drive(f"n{k}", lane, b.cruise(s_now + off, rng.uniform(7, 14)), valid=b.neighbor_valid())
    return f"lane{j}b"


def _stopped_queue(b: _Builder):
    rng = b.rng
    paths = _parallel_lanes(b, 2, rng.uniform(5.5, 6.5))
    j = int(rng.integers(2))
    queue_lane = j if rng.random() < 0.5 else 1 - j
    s_now = 150.0 + rng.uniform(-10, 10)
    v0 = rng.uniform(6, 10)
    gap = rng.uniform(20, 40)
    tau = np.maximum(b.times(), 0.0)
    if queue_lane == j:
        decel = v0**2 / (2.0 * (gap - 8.0))
        tau = np.minimum(tau, v0 / decel)
        s = s_now + v0 * np.minimum(b.times(), 0.0) + v0 * tau - 0.5 * decel * tau**2
    else:
        s = b.cruise(s_now, v0)
    b.drive(TARGET_ID, paths[j], s)
    for k in range(int(rng.integers(2, 5))):
        s_q = np.full(b.N, s_now + gap + 7.5 * k)
        b.drive(f"q{k}", paths[queue_lane], s_q, noise_scale=0.3)
    return f"lane{j}b"


_BUILDERS = {
    "straight": _straight,
    "curve": _curve,
    "fork3": _fork3,
    "merge": _merge,
    "lane_change": _lane_change,
    "parallel_multilane": _parallel_multilane,
    "stopped_queue": _stopped_queue,
}


def generate_scene(spec: DatasetSpec, index: int) -> Scene:
    """Scene number ``index`` of ``spec``; depends only on (seed, index)."""
    names, weights = spec.mix()
    if spec.preset not in PRESETS:
        raise ConfigError(f"unknown preset {spec.preset!r}")
    rng = np.random.default_rng([spec.seed, index])
    template = names[int(rng.choice(len(names), p=weights))]
    b = _Builder(spec, rng)
    hint = _BUILDERS[template](b)
    return b.finish(f"{template}-{spec.seed}-{index:06d}", hint)


def generate_synthetic_dataset(spec: DatasetSpec) -> Iterator[Scene]:
    """Stream ``spec.n`` scenes, deterministic under ``spec.seed``."""
    if spec.n <= 0:
        raise ConfigError("n must be positive")
    spec.mix()
    for i in range(spec.n):
        yield generate_scene(spec, i)


def template_of(scene: Scene) -> str:
    return scene.scene_id.split("-", 1)[0]
