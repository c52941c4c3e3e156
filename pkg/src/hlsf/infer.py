"""Mode-proportional sampling of future trajectories."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from hlsf.errors import InvalidInputError, SceneParseError
from hlsf.features import Example, build_example, collate, example_seed


@dataclass(frozen=True)
class AllocationPlan:
    counts: tuple
    K: int

    def __post_init__(self):
        if sum(self.counts) != self.K:
            raise InvalidInputError(f"counts {self.counts} do not sum to {self.K}")


def allocate_samples(w, K: int) -> AllocationPlan:
    """Split ``K`` samples across modes in proportion to ``w``.

    Every mode gets ``floor(K * w_m)``; the leftover samples go to the largest
    fractional parts, lowest index first on ties.
    """
    if K < 1:
        raise InvalidInputError(f"K must be >= 1, got {K}")
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInputError("weights must be a non-empty vector of non-negative numbers")
    total = w.sum()
    if total <= 0:
        raise InvalidInputError("weights sum to zero")
    share = K * (w / total)
    base = np.floor(share).astype(np.int64)
    # guard against share slightly below an integer it should equal
    base = np.minimum(base, K)
    frac = share - base
    rest = K - int(base.sum())
    if rest < 0:
        # rounding pushed the floors over K; take back from the smallest remainders
        order = np.lexsort((-np.arange(len(w)), frac))
        for i in order[: -rest]:
            base[i] -= 1
        rest = 0
    order = sorted(range(len(w)), key=lambda i: (-frac[i], i))
    for i in order[:rest]:
        base[i] += 1
    return AllocationPlan(tuple(int(c) for c in base), K)


@dataclass
class PredictionSet:
    scene_id: str
    target_id: str
    K: int
    weights: np.ndarray        # raw mode weights (length M, or 1 for the baseline)
    counts: tuple
    trajs: np.ndarray          # (K, T, 2) world frame
    mode_of: np.ndarray        # (K,)
    local: np.ndarray | None = field(default=None, repr=False)  # (K, T, 2) target frame

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "target_id": self.target_id,
            "K": int(self.K),
            "weights": [float(x) for x in self.weights],
            "counts": [int(c) for c in self.counts],
            "trajs": [[[float(v) for v in p] for p in traj] for traj in self.trajs],
            "mode_of": [int(m) for m in self.mode_of],
        }

    @classmethod
    def from_json(cls, d: dict, line: int = 0) -> "PredictionSet":
        for key in ("scene_id", "target_id", "K", "weights", "counts", "trajs", "mode_of"):
            if key not in d:
                raise SceneParseError(line, f"missing field {key}")
        trajs = np.asarray(d["trajs"], dtype=np.float64)
        if trajs.ndim != 3 or trajs.shape[-1] != 2 or len(trajs) != d["K"]:
            raise SceneParseError(line, "trajs must be K x T x 2")
        return cls(d["scene_id"], d["target_id"], int(d["K"]), np.asarray(d["weights"], float),
                   tuple(int(c) for c in d["counts"]), trajs, np.asarray(d["mode_of"], int))


def write_predictions(path, preds) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_json(), separators=(",", ":")) + "\n")
            n += 1
    return n


def read_predictions(path) -> list[PredictionSet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneParseError(i, f"invalid JSON ({exc.msg})") from exc
            out.append(PredictionSet.from_json(d, i))
    return out


def _sampling_weights(w: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Renormalize weights over real lanes; fall back to raw weights if none carry mass."""
    masked = np.where(valid, w, 0.0)
    return masked if masked.sum() > 0 else w


@torch.no_grad()
def predict_examples(model, examples: list[Example], K: int, mode: str = "multi",
                     seed: int = 0, batch_size: int = 64) -> list[PredictionSet]:
    """Sample ``K`` trajectories for each example from the prior of each mode."""
    if K < 1:
        raise InvalidInputError(f"K must be >= 1, got {K}")
    if mode not in ("multi", "single"):
        raise InvalidInputError(f"mode must be multi or single, got {mode!r}")
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    out = []
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo: lo + batch_size]
        for e in chunk:
            if not e.lane_valid.any():
                raise InvalidInputError(f"{e.scene_id}/{e.target_id}: no real lane candidate")
        batch = collate(chunk, dtype)
        enc = model.encode(batch)
        if cfg.hierarchical:
            weights = torch.softmax(model.mode_logits(enc.context), dim=-1).double().numpy()
        else:
            weights = np.ones((len(chunk), 1))
        rows, mode_of, plans = [], [], []
        for b, e in enumerate(chunk):
            w = weights[b]
            if cfg.hierarchical:
                sw = _sampling_weights(w, e.lane_valid)
                if mode == "multi":
                    counts = allocate_samples(sw, K).counts
                else:
                    counts = [0] * len(w)
                    counts[int(np.argmax(sw))] = K
            else:
                counts = (K,)
            plans.append(tuple(counts))
            # most probable mode first so that prefixes of the sample list stay meaningful
            order = sorted(range(len(counts)), key=lambda i: (-w[i], i))
            modes = np.repeat(order, [counts[i] for i in order])
            mode_of.append(modes)
            rows.extend((b, int(m)) for m in modes)
        bi = torch.tensor([r[0] for r in rows])
        mi = torch.tensor([r[1] for r in rows])
        ctx = enc.context[bi, mi]
        prior = model.prior_params(ctx)
        eps = []
        for e in chunk:
            rng = np.random.default_rng(example_seed(seed, e.scene_id, e.target_id))
            eps.append(torch.as_tensor(rng.standard_normal((K, cfg.D))))
        eps = torch.cat(eps).to(dtype)
        z = prior.mu + prior.sigma * eps
        start = batch["hist"][bi, 0, -1, :2]
        traj = model.decode(ctx, z, start).double().numpy().reshape(len(chunk), K, cfg.T, 2)
        for b, e in enumerate(chunk):
            local = traj[b]
            world = e.frame.to_world(local.reshape(-1, 2)).reshape(local.shape)
            out.append(PredictionSet(e.scene_id, e.target_id, K, weights[b], plans[b], world,
                                     mode_of[b], local))
    model.train(was_training)
    return out


def predict(scene, target: str, model, K: int = 15, mode: str = "multi",
            seed: int = 0) -> PredictionSet:
    """Predict ``K`` futures for one target of one scene."""
    ex = build_example(scene, target, model.cfg, with_future=False, keep_gt=False)
    return predict_examples(model, [ex], K, mode, seed)[0]


def predict_scenes(model, scenes, K: int = 15, mode: str = "multi", seed: int = 0,
                   batch_size: int = 64) -> list[PredictionSet]:
    exs = [build_example(s, t, model.cfg, with_future=False, keep_gt=False)
           for s in scenes for t in s.targets]
    return predict_examples(model, exs, K, mode, seed, batch_size)


def min_ade(preds: list[PredictionSet], examples: list[Example]) -> float:
    """Mean over examples of the best sample's ADE (target frame)."""
    vals = []
    for p, e in zip(preds, examples):
        d = np.linalg.norm(p.local - e.fut_xy[None], axis=-1).mean(axis=-1)
        vals.append(d.min())
    return float(np.mean(vals)) if vals else math.nan
