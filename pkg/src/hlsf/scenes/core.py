"""Scene data model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hlsf.errors import InvalidInputError


@dataclass
class VectorMap:
    """Lane centerline segments and their connectivity."""

    segments: dict
    succ: dict = field(default_factory=dict)
    pred: dict = field(default_factory=dict)

    def __post_init__(self):
        self.segments = {str(k): np.asarray(v, dtype=np.float64) for k, v in self.segments.items()}
        self.succ = {str(k): [str(x) for x in v] for k, v in self.succ.items()}
        self.pred = {str(k): [str(x) for x in v] for k, v in self.pred.items()}

    def validate(self, join_tol: float = 0.5):
        for table in (self.succ, self.pred):
            for k, ids in table.items():
                for sid in [k, *ids]:
                    if sid not in self.segments:
                        raise InvalidInputError(f"adjacency references unknown segment {sid!r}")
        for k, ids in self.succ.items():
            for sid in ids:
                gap = np.hypot(*(self.segments[sid][0] - self.segments[k][-1]))
                if gap > join_tol:
                    raise InvalidInputError(f"successor {sid!r} starts {gap:.2f} m from end of {k!r}")

    def __eq__(self, other):
        if not isinstance(other, VectorMap):
            return NotImplemented
        return (self.succ == other.succ and self.pred == other.pred
                and self.segments.keys() == other.segments.keys()
                and all(np.array_equal(self.segments[k], other.segments[k]) for k in self.segments))


@dataclass
class AgentTrack:
    agent_id: str
    positions: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.valid = np.asarray(self.valid, dtype=bool)
        if len(self.valid) != len(self.positions):
            raise InvalidInputError(f"track {self.agent_id!r}: valid mask length mismatch")

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (self.agent_id == other.agent_id
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.valid, other.valid))


@dataclass
class Scene:
    scene_id: str
    psi: float
    H: int
    T: int
    map: VectorMap
    tracks: list
    targets: list
    gt_lane_hint: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.H < 1 or self.T < 1:
            raise InvalidInputError("H and T must be >= 1")

    @property
    def num_steps(self) -> int:
        return self.H + 1 + self.T

    def track(self, agent_id: str) -> AgentTrack:
        for tr in self.tracks:
            if tr.agent_id == agent_id:
                return tr
        raise KeyError(agent_id)

    def history(self, agent_id: str) -> np.ndarray:
        return self.track(agent_id).positions[: self.H + 1]

    def future(self, agent_id: str) -> np.ndarray:
        return self.track(agent_id).positions[self.H + 1:]

    def validate(self):
        self.map.validate()
        ids = [tr.agent_id for tr in self.tracks]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("duplicate agent ids")
        for tr in self.tracks:
            if len(tr.positions) != self.num_steps:
                raise InvalidInputError(f"track {tr.agent_id!r} has {len(tr.positions)} steps, "
                                        f"expected {self.num_steps}")
        for t in self.targets:
            if t not in ids:
                raise InvalidInputError(f"target {t!r} has no track")
            if not self.track(t).valid.all():
                raise InvalidInputError(f"target {t!r} is not fully valid")
        return self
