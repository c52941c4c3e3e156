import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hlsf.config import ModelConfig
from hlsf.errors import InvalidInputError
from hlsf.evaluation import (MetricReport, aade_by_group, ade_fde, evaluate, group_table,
                             lane_alignment_report, min_over_k, min_over_k_report, mode_accuracy,
                             trajectory_lane_distance)
from hlsf.geom import ProcessedLane
from hlsf.infer import predict_scenes
from hlsf.model import build_model
from hlsf.scenes import DatasetSpec, generate_synthetic_dataset


def brute_ade_fde(a, b):
    d = [math.hypot(a[t][0] - b[t][0], a[t][1] - b[t][1]) for t in range(len(a))]
    return sum(d) / len(d), d[-1]


# -- displacement -----------------------------------------------------------


def test_ade_fde_cases():
    Y = np.cumsum(np.ones((12, 2)), axis=0)
    assert ade_fde(Y, Y) == (0.0, 0.0)
    assert ade_fde(Y + [1.0, 0.0], Y) == pytest.approx((1.0, 1.0))
    drift = Y + np.stack([0.1 * np.arange(1, 13), np.zeros(12)], axis=1)
    ade, fde = ade_fde(drift, Y)
    assert ade == pytest.approx(0.65, abs=1e-12) and fde == pytest.approx(1.2, abs=1e-12)


def test_ade_fde_length_mismatch():
    with pytest.raises(InvalidInputError):
        ade_fde(np.zeros((12, 2)), np.zeros((11, 2)))


def test_ade_fde_matches_brute_force(rng):
    for _ in range(100):
        T = int(rng.integers(1, 15))
        a, b = rng.normal(size=(T, 2)) * 5, rng.normal(size=(T, 2)) * 5
        got = ade_fde(a, b)
        want = brute_ade_fde(a.tolist(), b.tolist())
        assert abs(got[0] - want[0]) < 1e-9 and abs(got[1] - want[1]) < 1e-9


# -- min over K -------------------------------------------------------------


def test_min_law():
    Y = np.zeros((6, 2))
    trajs = np.ones((5, 6, 2)) * 10
    trajs[2] = Y
    for K in range(1, 6):
        ade, fde = min_over_k(trajs, Y, K)
        assert (ade == 0) == (K >= 3)
    assert min_over_k(trajs, Y, 1)[0] == ade_fde(trajs[0], Y)[0]


def test_min_over_k_too_many():
    with pytest.raises(InvalidInputError):
        min_over_k_report([np.zeros((3, 4, 2))], [np.zeros((4, 2))], [5])


def test_report_matches_brute_force(rng):
    trajs = [rng.normal(size=(15, 12, 2)) * 3 for _ in range(100)]
    gts = [rng.normal(size=(12, 2)) * 3 for _ in range(100)]
    Ks = [1, 5, 12, 15]
    rep = min_over_k_report(trajs, gts, Ks)
    for K in Ks:
        ades, fdes = [], []
        for t, y in zip(trajs, gts):
            per = [brute_ade_fde(t[k].tolist(), y.tolist()) for k in range(K)]
            ades.append(min(p[0] for p in per))
            fdes.append(min(p[1] for p in per))
        assert abs(rep.rows[K][0] - sum(ades) / 100) < 1e-9
        assert abs(rep.rows[K][1] - sum(fdes) / 100) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 20))
def test_report_monotone_in_k(seed, n):
    r = np.random.default_rng(seed)
    trajs = [r.normal(size=(10, 5, 2)) for _ in range(n)]
    gts = [r.normal(size=(5, 2)) for _ in range(n)]
    rep = min_over_k_report(trajs, gts, range(1, 11))
    ades = [rep.rows[K][0] for K in range(1, 11)]
    fdes = [rep.rows[K][1] for K in range(1, 11)]
    assert all(a >= b for a, b in zip(ades, ades[1:]))
    assert all(a >= b for a, b in zip(fdes, fdes[1:]))


def test_report_formats():
    rep = MetricReport(rows={1: (2.5, 4.0), 15: (0.5, 1.0)}, n=3, mode_accuracy=0.9,
                       lane_alignment=0.25)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "K,ADE,FDE,n,mode_accuracy,lane_alignment"
    assert [l.split(",")[0] for l in lines[1:]] == ["1", "15"]
    text = rep.to_text()
    assert "ADE_K" in text and "mode accuracy: 0.900" in text


# -- mode diagnostics -------------------------------------------------------


def _lane(points, fake=False):
    points = np.asarray(points, dtype=float)
    rows = np.zeros((len(points), 5))
    rows[:, :2] = points
    return ProcessedLane(rows=rows, is_fake=fake)


def test_alignment_on_centerline():
    lane = _lane(np.stack([np.linspace(0, 50, 51), np.zeros(51)], axis=1))
    traj = np.stack([np.linspace(1, 30, 12), np.zeros(12)], axis=1)
    assert trajectory_lane_distance(traj, [lane]) == pytest.approx(0, abs=1e-12)


def test_alignment_between_lanes():
    xs = np.linspace(0, 50, 51)
    lanes = [_lane(np.stack([xs, np.zeros(51)], 1)), _lane(np.stack([xs, np.full(51, 4.0)], 1))]
    traj = np.stack([np.linspace(1, 30, 12), np.full(12, 2.0)], axis=1)
    assert trajectory_lane_distance(traj, lanes) == pytest.approx(2.0, abs=1e-9)
    assert lane_alignment_report([[traj, traj + [0, 2.0]]], [lanes]) == pytest.approx(1.0)


def test_alignment_ignores_fake_lanes():
    xs = np.linspace(0, 50, 51)
    real = _lane(np.stack([xs, np.full(51, 3.0)], 1))
    fake = _lane(np.zeros((51, 2)), fake=True)
    traj = np.stack([np.linspace(1, 30, 12), np.zeros(12)], axis=1)
    assert trajectory_lane_distance(traj, [real, fake]) == pytest.approx(3.0)
    with pytest.raises(InvalidInputError):
        trajectory_lane_distance(traj, [fake])


def test_mode_accuracy():
    w = [np.array([0.1, 0.9]), np.array([0.6, 0.4]), np.array([0.3, 0.7])]
    assert mode_accuracy(w, [1, 1, 1]) == pytest.approx(2 / 3)


# -- grouped average quality ------------------------------------------------


def test_aade_single_group():
    r = np.random.default_rng(0)
    trajs = [r.normal(size=(3, 4, 2)) for _ in range(7)]
    gts = [r.normal(size=(4, 2)) for _ in range(7)]
    res = aade_by_group(trajs, gts, ["a"] * 7)
    assert res["groups"]["a"][0] == pytest.approx(res["ade1"], abs=1e-12)
    assert res["ade1"] == pytest.approx(min_over_k_report(trajs, gts, [1]).rows[1][0], abs=1e-12)


def test_aade_two_groups():
    Y = np.zeros((4, 2))
    trajs = [np.full((1, 4, 2), [1.0, 0.0]), np.full((1, 4, 2), [3.0, 0.0])]
    res = aade_by_group(trajs, [Y, Y], ["x", "y"])
    assert res["ade1"] == pytest.approx(2.0)
    assert res["groups"] == {"x": (1.0, 0.5, 1), "y": (3.0, 0.5, 1)}
    assert "ADE_1" in group_table(res)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 40), st.integers(1, 6))
def test_aade_decomposition(seed, n, n_groups):
    r = np.random.default_rng(seed)
    trajs = [r.normal(size=(2, 6, 2)) * 4 for _ in range(n)]
    gts = [r.normal(size=(6, 2)) * 4 for _ in range(n)]
    labels = r.integers(n_groups, size=n).tolist()
    res = aade_by_group(trajs, gts, labels)
    total = sum(a * w for a, w, _ in res["groups"].values())
    assert abs(total - res["ade1"]) < 1e-9
    assert abs(sum(w for _, w, _ in res["groups"].values()) - 1) < 1e-12


# -- full evaluation --------------------------------------------------------


def test_evaluate_end_to_end():
    cfg = ModelConfig(seed=1)
    model, _ = build_model(cfg)
    scenes = list(generate_synthetic_dataset(DatasetSpec(templates=["fork3"], n=6, seed=2)))
    preds = predict_scenes(model, scenes, 5, seed=0)
    rep, groups = evaluate(preds, scenes, [1, 5], cfg)
    assert set(rep.rows) == {1, 5} and rep.n == 6
    assert rep.rows[5][0] <= rep.rows[1][0]
    assert 0 <= rep.mode_accuracy <= 1 and rep.lane_alignment >= 0
    assert set(groups["groups"]) <= {"left", "straight", "right"}
    assert groups["ade1"] == pytest.approx(rep.rows[1][0], abs=1e-9)
    with pytest.raises(InvalidInputError):
        evaluate(preds, scenes[1:], [1], cfg)
