"""Displacement metrics, mode diagnostics and report tables."""

from __future__ import annotations

import csv
import io
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from hlsf import geom
from hlsf.errors import InvalidInputError


def ade_fde(Y_hat, Y) -> tuple:
    """Average and final displacement error; leading axes are kept."""
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y_hat.shape[-2:] != Y.shape[-2:] or Y.shape[-1] != 2:
        raise InvalidInputError(f"trajectory shapes differ: {Y_hat.shape} vs {Y.shape}")
    d = np.sqrt(((Y_hat - Y) ** 2).sum(-1))
    ade, fde = d.mean(-1), d[..., -1]
    if np.ndim(ade) == 0:
        return float(ade), float(fde)
    return ade, fde


@dataclass
class MetricReport:
    rows: dict                       # K -> (ADE_K, FDE_K)
    n: int
    mode_accuracy: float | None = None
    lane_alignment: float | None = None
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["K", "ADE", "FDE", "n", "mode_accuracy", "lane_alignment"])
        for K in sorted(self.rows):
            a, f = self.rows[K]
            w.writerow([K, repr(a), repr(f), self.n, _opt(self.mode_accuracy),
                        _opt(self.lane_alignment)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'K':>4}  {'ADE_K':>8}  {'FDE_K':>8}"]
        for K in sorted(self.rows):
            a, f = self.rows[K]
            lines.append(f"{K:>4}  {a:8.3f}  {f:8.3f}")
        lines.append(f"examples: {self.n}")
        if self.mode_accuracy is not None:
            lines.append(f"mode accuracy: {self.mode_accuracy:.3f}")
        if self.lane_alignment is not None:
            lines.append(f"lane alignment (m): {self.lane_alignment:.3f}")
        return "\n".join(lines) + "\n"


def _opt(v):
    return "" if v is None else repr(float(v))


def _stack(trajs_list, K):
    out = []
    for trajs in trajs_list:
        trajs = np.asarray(trajs, dtype=np.float64)
        if len(trajs) < K:
            raise InvalidInputError(f"K={K} exceeds the {len(trajs)} available samples")
        out.append(trajs[:K])
    return out


def min_over_k(trajs, Y, K: int) -> tuple:
    """Best ADE and best FDE over the first ``K`` samples (minimized separately)."""
    (t,) = _stack([trajs], K)
    ade, fde = ade_fde(t, np.asarray(Y)[None])
    return float(ade.min()), float(fde.min())


def min_over_k_report(trajs_list, gts, Ks) -> MetricReport:
    """Set-average of min-over-first-K ADE/FDE for every K in ``Ks``."""
    if len(trajs_list) != len(gts):
        raise InvalidInputError("predictions and ground truth differ in count")
    if not trajs_list:
        raise InvalidInputError("empty evaluation set")
    rows = {}
    for K in Ks:
        if K < 1:
            raise InvalidInputError(f"K must be >= 1, got {K}")
        vals = np.array([min_over_k(t, y, K) for t, y in zip(trajs_list, gts)])
        rows[int(K)] = (float(vals[:, 0].mean()), float(vals[:, 1].mean()))
    return MetricReport(rows=rows, n=len(gts))


def trajectory_lane_distance(traj, lanes) -> float:
    """Mean per-timestep distance to the closest real lane, minimized over lanes."""
    best = math.inf
    for lane in lanes:
        if getattr(lane, "is_fake", False):
            continue
        pts = lane.points if hasattr(lane, "points") else np.asarray(lane)
        best = min(best, float(geom.polyline_distance(traj, pts).mean()))
    if math.isinf(best):
        raise InvalidInputError("no real lane to align against")
    return best


def lane_alignment_report(trajs_list, lanes_list) -> float:
    """Mean over all trajectories of their distance to the nearest real lane."""
    vals = [trajectory_lane_distance(tr, lanes)
            for trajs, lanes in zip(trajs_list, lanes_list) for tr in trajs]
    if not vals:
        raise InvalidInputError("empty evaluation set")
    return float(np.mean(vals))


def mode_accuracy(weights_list, gt_indices) -> float:
    hits = [int(np.argmax(w)) == int(g) for w, g in zip(weights_list, gt_indices)]
    if not hits:
        raise InvalidInputError("empty evaluation set")
    return float(np.mean(hits))


def aade_by_group(trajs_list, gts, groups) -> dict:
    """Per-group average first-sample ADE with group fractions.

    Returns ``{"groups": {label: (AADE, weight, count)}, "ade1": overall}``;
    the overall value equals the weight-averaged group values.
    """
    if not (len(trajs_list) == len(gts) == len(groups)):
        raise InvalidInputError("predictions, ground truth and labels differ in count")
    per = defaultdict(list)
    for t, y, g in zip(trajs_list, gts, groups):
        per[g].append(ade_fde(np.asarray(t)[0], y)[0])
    n = sum(len(v) for v in per.values())
    if n == 0:
        raise InvalidInputError("empty evaluation set")
    out = {}
    for g in sorted(per, key=str):
        vals = per[g]
        if not vals:
            warnings.warn(f"group {g!r} is empty and is left out")
            continue
        out[g] = (float(np.mean(vals)), len(vals) / n, len(vals))
    ade1 = float(np.mean([v for vals in per.values() for v in vals]))
    return {"groups": out, "ade1": ade1}


def group_table(result: dict) -> str:
    lines = [f"{'group':>12}  {'AADE':>8}  {'weight':>7}  {'n':>5}"]
    for g, (a, w, c) in result["groups"].items():
        lines.append(f"{str(g):>12}  {a:8.3f}  {w:7.3f}  {c:5d}")
    lines.append(f"{'ADE_1':>12}  {result['ade1']:8.3f}")
    return "\n".join(lines) + "\n"


def generator_gt_index(example, scene) -> int:
    """Lane index holding the generator's hint segment, else the geometric label."""
    hint = (scene.gt_lane_hint or {}).get(example.target_id)
    if hint is not None:
        hits = [i for i, lane in enumerate(example.candidates.lanes)
                if not lane.is_fake and hint in (lane.segment_ids or ())]
        if len(hits) == 1:
            return hits[0]
    return int(example.candidates.gt_index)


def evaluate(preds, scenes, Ks, cfg, groups=True) -> tuple[MetricReport, dict | None]:
    """Full report of predictions (world frame) against the scenes they came from."""
    from hlsf.features import build_example

    by_id = {s.scene_id: s for s in scenes}
    trajs, gts, lanes, weights, gt_idx, labels = [], [], [], [], [], []
    for p in preds:
        scene = by_id.get(p.scene_id)
        if scene is None:
            raise InvalidInputError(f"prediction for unknown scene {p.scene_id!r}")
        ex = build_example(scene, p.target_id, cfg, with_future=True, keep_gt=False)
        gt_world = ex.frame.to_world(ex.fut_xy)
        trajs.append(p.trajs)
        gts.append(gt_world)
        lanes.append([ex.frame.to_world(lane.points) if not lane.is_fake else lane
                      for lane in ex.candidates.lanes])
        weights.append(p.weights)
        gt_idx.append(generator_gt_index(ex, scene))
        labels.append((scene.gt_lane_hint or {}).get(p.target_id, "all"))
    report = min_over_k_report(trajs, gts, Ks)
    report.lane_alignment = lane_alignment_report(trajs, lanes)
    if all(len(w) > 1 for w in weights):
        report.mode_accuracy = mode_accuracy(weights, gt_idx)
    group = aade_by_group(trajs, gts, labels) if groups else None
    return report, group
