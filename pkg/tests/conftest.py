import time

import numpy as np
import pytest
import torch

from hlsf.checkpoint import load_model
from hlsf.config import apply_recipe
from hlsf.evaluation import evaluate
from hlsf.infer import predict_scenes
from hlsf.scenes import AgentTrack, DatasetSpec, Scene, VectorMap, generate_synthetic_dataset
from hlsf.train import fit

torch.set_num_threads(1)


def straight_segment(x0, x1, y=0.0, step=1.0):
    xs = np.arange(x0, x1 + 1e-9, step)
    return np.stack([xs, np.full_like(xs, y)], axis=1)


def make_scene(segments, tracks, succ=None, pred=None, H=4, T=12, psi=2.0, targets=("target",),
               scene_id="s0", hint=None):
    """Scene from {id: points} and {agent: (positions, valid or None)}."""
    vmap = VectorMap(segments, succ or {}, pred or {})
    agents = []
    for aid, (pts, valid) in tracks.items():
        pts = np.asarray(pts, dtype=float)
        agents.append(AgentTrack(aid, pts, np.ones(len(pts), bool) if valid is None else valid))
    return Scene(scene_id, psi, H, T, vmap, agents, list(targets), hint or {})


def driving_track(x_now, speed=10.0, psi=2.0, H=4, T=12, y=0.0):
    t = (np.arange(H + T + 1) - H) / psi
    return np.stack([x_now + speed * t, np.full_like(t, y)], axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# default-config fork runs shared by the end-to-end checks
@pytest.fixture(scope="session")
def fork_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("fork")
    train = list(generate_synthetic_dataset(DatasetSpec(templates=["fork3"], n=2000, seed=1)))
    test = list(generate_synthetic_dataset(DatasetSpec(templates=["fork3"], n=200, seed=2)))
    runs = {}
    t0 = time.perf_counter()
    for recipe in ("M5", "Baseline"):
        m, t = apply_recipe(recipe)
        res = fit(train, m, t, recipe, out_dir=out / recipe)
        model, _, _ = load_model(res.best_checkpoint)
        preds = predict_scenes(model, test, 15, "multi", seed=0)
        report, _ = evaluate(preds, test, [1, 5, 12, 15], model.cfg)
        runs[recipe] = {"model": model, "preds": preds, "report": report,
                        "best_val": res.best_val}
    runs["elapsed"] = time.perf_counter() - t0
    runs["test"], runs["train"] = test, train
    return runs


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
