"""Scene -> network input arrays, and batching into tensors."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np
import torch

from hlsf import geom
from hlsf.config import ModelConfig
from hlsf.errors import InvalidInputError


def example_seed(seed: int, scene_id: str, target_id: str) -> list[int]:
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(f"{scene_id}/{target_id}".encode())]


@dataclass
class Example:
    scene_id: str
    target_id: str
    agent_ids: list
    hist: np.ndarray        # (A, H+1, row_width), target first
    pos: np.ndarray         # (A, 2) current positions
    lanes: np.ndarray       # (M, F, 5)
    lane_points: np.ndarray  # (M, F, 2), independent of the pdp flag
    lane_valid: np.ndarray  # (M,)
    nbr: np.ndarray         # (M, A) neighbor sets N_i^m
    frame: geom.Frame
    candidates: geom.LaneCandidateSet
    fut: np.ndarray | None = None      # (T, row_width)
    fut_xy: np.ndarray | None = None   # (T, 2)
    gt: int = -1


def _rows(points: np.ndarray, psi: float, pdp: bool) -> np.ndarray:
    if not pdp:
        return points.copy()
    return geom.derive_kinematics(points, psi).rows


def build_example(scene, target: str, cfg: ModelConfig, with_future: bool = True,
                  seed: int | None = None, keep_gt: bool = True) -> Example:
    """Preprocess one target of one scene into local-frame arrays.

    ``keep_gt`` lets the future decide which lanes survive when there are
    more than ``M`` candidates (training); with it off the candidate set is
    the one inference would see and the label is assigned afterwards.
    """
    view = geom.to_target_frame(scene, target)
    H, t = scene.H, scene.H
    if with_future and scene.T < cfg.T:
        raise InvalidInputError(f"scene {scene.scene_id} has {scene.T} future steps, model needs {cfg.T}")
    future = view.positions[target][H + 1: H + 1 + cfg.T] if with_future else None
    rng = np.random.default_rng(example_seed(cfg.seed if seed is None else seed,
                                             scene.scene_id, target))
    cands = geom.build_lane_candidates(view, (0.0, 0.0, 0.0), cfg.M, rng=rng,
                                       future=future if keep_gt else None, length=float(cfg.F))
    if with_future and not keep_gt:
        gt = geom.label_ground_truth_lane(future, cands)
        lanes = list(cands.lanes)
        lanes[gt] = replace(lanes[gt], gt=True)
        cands = geom.LaneCandidateSet(tuple(lanes), gt)
    agents = [target] + [a for a in view.agent_ids
                         if a != target and view.valid[a][t]]
    hist = []
    for a in agents:
        pts = geom.fill_invalid(view.positions[a][: H + 1], view.valid[a][: H + 1])
        hist.append(_rows(pts, scene.psi, cfg.pdp))
    hist = np.stack(hist)
    pos = np.stack([view.positions[a][t] for a in agents])
    lane_rows = cands.rows
    if not cfg.pdp:
        lane_rows = lane_rows.copy()
        lane_rows[..., 2:] = 0.0
    nbr = np.zeros((cfg.M, len(agents)), dtype=bool)
    for m, lane in enumerate(cands.lanes):
        members = geom.select_neighbors(view, target, lane, cfg.tau)
        nbr[m] = [a in members for a in agents]
    ex = Example(scene_id=scene.scene_id, target_id=target, agent_ids=agents, hist=hist,
                 pos=pos, lanes=lane_rows, lane_points=cands.points, lane_valid=cands.valid,
                 nbr=nbr, frame=view.frame, candidates=cands)
    if with_future:
        full = np.vstack([view.positions[target][H: H + 1], future])
        ex.fut = _rows(full, scene.psi, cfg.pdp)[1:]
        ex.fut_xy = future.copy()
        ex.gt = int(cands.gt_index)
    return ex


def build_examples(scenes, cfg: ModelConfig, with_future: bool = True,
                   keep_gt: bool = True) -> list[Example]:
    return [build_example(s, t, cfg, with_future, keep_gt=keep_gt)
            for s in scenes for t in s.targets]


def collate(examples: list[Example], dtype=torch.float32) -> dict:
    """Pad agents to a common count and stack into tensors."""
    B = len(examples)
    A = max(len(e.agent_ids) for e in examples)
    e0 = examples[0]
    hist = np.zeros((B, A) + e0.hist.shape[1:])
    pos = np.zeros((B, A, 2))
    agent_mask = np.zeros((B, A), dtype=bool)
    nbr = np.zeros((B, e0.nbr.shape[0], A), dtype=bool)
    for b, e in enumerate(examples):
        n = len(e.agent_ids)
        hist[b, :n] = e.hist
        pos[b, :n] = e.pos
        agent_mask[b, :n] = True
        nbr[b, :, :n] = e.nbr
    batch = {
        "hist": torch.as_tensor(hist, dtype=dtype),
        "pos": torch.as_tensor(pos, dtype=dtype),
        "agent_mask": torch.as_tensor(agent_mask),
        "nbr": torch.as_tensor(nbr),
        "lanes": torch.as_tensor(np.stack([e.lanes for e in examples]), dtype=dtype),
        "lane_points": torch.as_tensor(np.stack([e.lane_points for e in examples]), dtype=dtype),
        "lane_valid": torch.as_tensor(np.stack([e.lane_valid for e in examples])),
    }
    if all(e.fut is not None for e in examples):
        batch["fut"] = torch.as_tensor(np.stack([e.fut for e in examples]), dtype=dtype)
        batch["fut_xy"] = torch.as_tensor(np.stack([e.fut_xy for e in examples]), dtype=dtype)
        batch["gt"] = torch.as_tensor([e.gt for e in examples], dtype=torch.long)
    return batch
