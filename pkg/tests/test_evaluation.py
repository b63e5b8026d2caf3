import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoexpand import experiment
from protoexpand.config import RunConfig
from protoexpand.datasets import Dataset
from protoexpand.evaluation import (
    downstream_eval,
    frechet_distance,
    frechet_from_moments,
    median_bandwidth,
    mmd2,
)
from protoexpand.prototypes import ClassifierTraining

from oracles import frechet_general, median_pairwise, mmd2_loops

TINY = {
    "data.n_diffusion_per_class": 150, "data.n_test_per_class": 40, "data.n_per_class": 10,
    "diffusion.epochs": 4, "diffusion.hidden": [16, 16], "extractor.epochs": 10, "evaluation.epochs": 10,
    "expansion.factor": 1,
}


def test_frechet_examples():
    x = np.random.default_rng(0).standard_normal((50, 3))
    assert abs(frechet_distance(x, x)) <= 1e-8
    assert frechet_from_moments(np.zeros(2), np.eye(2), np.array([1.0, 0.0]), np.eye(2)) == pytest.approx(1.0, abs=1e-12)
    assert frechet_from_moments(np.zeros(2), np.eye(2), np.zeros(2), 4 * np.eye(2)) == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("d", [1, 2, 3, 6])
def test_frechet_matches_general_square_root(d):
    rng = np.random.default_rng(d)
    for _ in range(40):
        a, b = rng.standard_normal((d, d)), rng.standard_normal((d, d))
        ca, cb = a @ a.T + 0.01 * np.eye(d), b @ b.T + 0.01 * np.eye(d)
        ma, mb = rng.standard_normal(d), rng.standard_normal(d)
        got = frechet_from_moments(ma, ca, mb, cb)
        want = frechet_general(ma, ca, mb, cb)
        assert got == pytest.approx(want, rel=1e-7, abs=1e-8)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_frechet_symmetric_and_nonnegative(d, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((int(rng.integers(2, 30)), d)) * rng.uniform(0.1, 3)
    b = rng.standard_normal((int(rng.integers(2, 30)), d)) + rng.uniform(-2, 2)
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0
    assert abs(ab - ba) <= 1e-8 * max(1.0, ab)


def test_non_psd_covariance_is_an_error():
    with pytest.raises(FloatingPointError):
        frechet_from_moments(np.zeros(3), -np.eye(3), np.zeros(3), np.eye(3))
    with pytest.raises(FloatingPointError):
        frechet_from_moments(np.zeros(2), np.diag([1.0, -1.0]), np.zeros(2), np.eye(2))


def test_mmd_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.standard_normal((12, 2)), rng.standard_normal((9, 2)) + 0.5
        h = median_pairwise(a.tolist(), b.tolist())
        assert median_bandwidth(a, b) == pytest.approx(h, rel=1e-14)
        assert mmd2(a, b) == pytest.approx(mmd2_loops(a.tolist(), b.tolist(), h), rel=1e-10, abs=1e-14)
        assert mmd2(a, b, 0.7) == pytest.approx(mmd2_loops(a.tolist(), b.tolist(), 0.7), rel=1e-10, abs=1e-14)


def test_mmd_examples():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((30, 2))
    assert mmd2(a, a) == 0.0
    overlapping = mmd2(a, rng.standard_normal((30, 2)), 1.0)
    separated = mmd2(a, rng.standard_normal((30, 2)) + 20, 1.0)
    assert separated > overlapping
    b = rng.standard_normal((25, 2)) + 1
    for lam in (0.1, 3.0, 50.0):
        assert mmd2(lam * a, lam * b, lam * 0.8) == pytest.approx(mmd2(a, b, 0.8), rel=1e-10)
        assert mmd2(lam * a, lam * a, lam) == 0.0
    with pytest.raises(ValueError):
        mmd2(np.ones((4, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        mmd2(a[:1], b)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 20))
def test_mmd_nonnegative(seed, h):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((int(rng.integers(2, 15)), 3))
    b = rng.standard_normal((int(rng.integers(2, 15)), 3)) * rng.uniform(0.2, 2)
    assert mmd2(a, b, h) >= 0


def separable(n=60, seed=0):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(-2, 0.3, (n, 2)), rng.normal(2, 0.3, (n, 2))])
    return Dataset(x, np.repeat([0, 1], n))


def test_downstream_separable_three_runs_and_determinism():
    ds = separable()
    cfg = ClassifierTraining(epochs=40)
    res = downstream_eval(ds, ds, cfg, seeds=(0, 1, 2))
    assert len(res.accuracies) == 3 and res.mean >= 0.99
    again = downstream_eval(ds, ds, cfg, seeds=(0, 1, 2))
    assert again.accuracies == res.accuracies
    assert res.sd == pytest.approx(np.std(res.accuracies, ddof=1))


def test_downstream_missing_class_warns():
    ds = separable()
    train = ds.select(ds.y == 0)
    with pytest.warns(UserWarning, match="absent"):
        res = downstream_eval(train, ds, ClassifierTraining(epochs=5), seeds=(0,), num_classes=2)
    assert len(res.accuracies) == 1 and 0.0 <= res.mean <= 1.0


@pytest.fixture(scope="module")
def tiny_ws():
    return experiment.prepare(RunConfig().with_overrides(TINY))


def test_empty_expansion_matches_original_baseline(tiny_ws):
    cfg = tiny_ws.config.with_overrides({"expansion.factor": 0})
    res = experiment.expand(tiny_ws, cfg)
    ev = cfg.evaluation
    base = downstream_eval(tiny_ws.original, tiny_ws.reference, ev.classifier(), ev.seeds)
    merged = downstream_eval(res.merged, tiny_ws.reference, ev.classifier(), ev.seeds)
    assert merged.accuracies == base.accuracies


def test_report_annotated_with_counts_and_seed(tiny_ws):
    res = experiment.expand(tiny_ws)
    rep = experiment.evaluate(tiny_ws, res)
    assert rep.seed == 0 and rep.counts["n_synthetic"] == len(tiny_ws.original)
    assert rep.counts["n_reference"] == len(tiny_ws.reference)
    assert rep.config_fingerprint == tiny_ws.config.fingerprint()
    assert len(rep.downstream["runs_expanded"]) == 3
    assert rep.downstream["delta"] == pytest.approx(rep.downstream["acc_expanded"] - rep.downstream["acc_original"])


def test_ablation_grid_is_complete(tiny_ws):
    base = tiny_ws.config
    result = experiment.run_ablation("prototypes", base, seeds=(0,), workspaces={0: tiny_ws})
    assert sorted(r.cell["label"] for r in result.reports) == ["both", "none", "p_c", "p_g"]
    assert set(result.flags) == {"both_le_single", "guided_beat_none"}
    lines = result.csv_text().strip().splitlines()
    assert len(lines) == 5 and lines[0].startswith("cell.label,cell.overrides,seed,frechet")
    k = experiment.run_ablation("K", base, seeds=(0,), workspaces={0: tiny_ws})
    assert [r.cell["label"] for r in k.reports] == ["K=2", "K=3", "K=4", "K=5"]
    assert len({r.config_fingerprint for r in k.reports}) == 4


def test_ablation_custom_grid_and_errors(tiny_ws, monkeypatch):
    grid = {"name": "mine", "cells": [{"label": "a", "overrides": {"guidance.rho": 1.0}},
                                      {"label": "b", "overrides": {"guidance.rho": 2.0}}]}
    res = experiment.run_ablation(grid, tiny_ws.config, seeds=(0,), workspaces={0: tiny_ws})
    assert res.name == "mine" and len(res.reports) == 2
    with pytest.raises(ValueError):
        experiment.load_grid({"cells": [{"label": "a", "overrides": {}}, {"label": "a", "overrides": {}}]})
    with pytest.raises(ValueError):
        experiment.run_ablation({"cells": [{"label": "x", "overrides": {"guidance.nope": 1}}]}, tiny_ws.config,
                                seeds=(0,), workspaces={0: tiny_ws})
    # a cell that silently vanishes must be reported, not skipped
    real = experiment.evaluate
    calls = []

    def lossy(ws, result, config=None, downstream=True, cell=None):
        calls.append(cell)
        return real(ws, result, config, downstream, {**cell, "label": "a"})

    monkeypatch.setattr(experiment, "evaluate", lossy)
    with pytest.raises(RuntimeError, match="missing"):
        experiment.run_ablation(grid, tiny_ws.config, seeds=(0,), workspaces={0: tiny_ws})
