"""
Train a small forecaster and sample futures
===========================================

A short run on fork scenes: fit the full model, then draw 15 trajectories
per target and score them.  Takes a few minutes on one CPU core; lower
``EPOCHS`` and ``N_TRAIN`` for a quicker, blurrier look.
"""

from pathlib import Path

import torch

from hlsf.checkpoint import load_model
from hlsf.config import apply_recipe
from hlsf.evaluation import evaluate, group_table
from hlsf.features import build_example
from hlsf.infer import predict_scenes, write_predictions
from hlsf.plot import scene_svg
from hlsf.scenes import DatasetSpec, generate_synthetic_dataset
from hlsf.train import fit

torch.set_num_threads(1)
EPOCHS, N_TRAIN = 20, 1000
out = Path("demo_run")

train = list(generate_synthetic_dataset(DatasetSpec(templates=["fork3"], n=N_TRAIN, seed=1)))
test = list(generate_synthetic_dataset(DatasetSpec(templates=["fork3"], n=50, seed=2)))

# M5: every component switched on; overrides go through the recipe check
model_cfg, train_cfg = apply_recipe("M5", train_overrides={"epochs": EPOCHS})
result = fit(train, model_cfg, train_cfg, "M5", out_dir=out, log=print)
model, _, _ = load_model(result.best_checkpoint)

# multi: samples split across lanes by mode weight; single: all from the top lane
for mode in ("single", "multi"):
    preds = predict_scenes(model, test, K=15, mode=mode, seed=0)
    report, groups = evaluate(preds, test, [1, 5, 15], model.cfg)
    print(mode)
    print(report.to_text())
print(group_table(groups))
write_predictions(out / "predictions.jsonl", preds)

# first scene as a figure: samples colored by time, bars are mode weights
p, s = preds[0], test[0]
ex = build_example(s, "target", model.cfg, keep_gt=False)
lanes = [None if l.is_fake else ex.frame.to_world(l.points) for l in ex.candidates.lanes]
svg = scene_svg(s.scene_id, lanes, s.history("target"), s.future("target"), p.trajs,
                list(p.weights), "mode weight", ex.candidates.gt_index)
(out / "forecast.svg").write_text(svg)
