import warnings

import numpy as np
import pytest

from protoexpand.autodiff import Mlp, Tape, backward
from protoexpand.diffusion import Denoiser, build_schedule, cfg_eps, predict_x0
from protoexpand.guidance import (
    EnergyModel,
    GuidanceConfig,
    TransformParams,
    _energy_grad,
    apply_transform,
    ball_bounds,
    energy,
    guide_step,
    guided_update,
    init_transform,
    project,
)
from protoexpand.prototypes import ClassPrototypes, FeatureExtractor, PrototypeSet, build_prototypes

from oracles import central_diff, rel_error

SCHED = build_schedule()


def make_model(seed=0, d=2, classes=2, K=2, cfg_scale=7.5):
    rng = np.random.default_rng(seed)
    den = Denoiser(Mlp.init([d + 8 + classes + 1, 16, d], rng), classes, SCHED)
    ext = FeatureExtractor(Mlp.init([d, 8, 5, classes], rng))
    x = rng.standard_normal((10 * classes, d))
    y = np.repeat(np.arange(classes), 10)
    return EnergyModel(den, ext, build_prototypes(x, y, ext, K), cfg_scale)


def test_init_transform_reproducible_and_distributed():
    a = init_transform(3, np.random.default_rng(1))
    b = init_transform(3, np.random.default_rng(1))
    assert np.array_equal(a.e, b.e) and np.array_equal(a.b, b.b)
    big = init_transform(10**5, np.random.default_rng(2))
    assert abs(big.e.mean() - 0.5) <= 0.01
    assert abs(big.b.var() - 1.0) <= 0.05
    assert big.e.min() >= 0 and big.e.max() < 1


def test_dimension_mismatch_is_an_error():
    with pytest.raises(ValueError):
        apply_transform(np.zeros(3), init_transform(2, np.random.default_rng(0)))


def test_transform_examples():
    z = np.random.default_rng(3).standard_normal((5, 4))
    zero = TransformParams(np.zeros(4), np.zeros(4), 0.2)
    assert np.array_equal(apply_transform(z, zero), z)
    out = apply_transform(np.array([1.0]), TransformParams(np.array([0.5]), np.array([0.3]), 0.2))
    assert out[0] == 1.2
    assert np.array_equal(apply_transform(z, TransformParams(np.ones(4), np.ones(4), 0.0)), z)


def test_projection_bound_is_exact():
    rng = np.random.default_rng(4)
    for _ in range(10):
        scale = 10.0 ** rng.uniform(-3, 6, (10**4, 1))
        z = rng.standard_normal((10**4, 1)) * scale
        eps = float(rng.choice([0.2, 0.1, 1e-3, 0.3, 7.7]))
        params = init_transform(1, rng, eps, n=10**4)
        out = apply_transform(z, params)
        assert np.all(np.abs(out - z) <= eps)


def test_ball_bounds_pull_in_rounding():
    z = np.array([0.1, 1e16, -3.3])
    lo, hi = ball_bounds(z, 0.2)
    assert np.all(hi - z <= 0.2) and np.all(z - lo <= 0.2)
    assert np.array_equal(project(z + 5, z, 0.2), hi)


def test_energy_zero_at_prototype():
    model = make_model(K=1)
    z = np.array([[0.3, -0.4]])
    t = 400
    x0 = predict_x0(z, t, cfg_eps(model.denoiser, z, t, np.array([1]), 7.5), SCHED)
    f = model.extractor.features(x0)[0]
    model.prototypes.classes[1] = ClassPrototypes(f, f[None], [1], np.zeros(1, dtype=int))
    e, d_c, d_g = model.energy(z, t, np.array([1]))
    assert e[0] == 0 and d_c[0] == 0 and d_g[0] == 0


def test_lambda_g_zero_is_class_term_alone():
    model = make_model()
    z = np.random.default_rng(5).standard_normal((6, 2))
    labels = np.array([0, 1, 0, 1, 1, 0])
    e, d_c, d_g = model.energy(z, 300, labels, 1.0, 0.0)
    assert np.array_equal(e, d_c)
    assert np.all(d_g > 0)
    scalar = energy(z[0], 300, 0, model.denoiser, model.extractor, model.prototypes, lambda_g=0.0)
    assert scalar == pytest.approx(d_c[0], rel=1e-14)


def test_energy_chain_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    cfg = GuidanceConfig()
    checked = 0
    for trial in range(120):
        model = make_model(seed=trial % 4, d=2)
        z = rng.standard_normal((1, 2))
        t = int(rng.integers(20, 1000))
        lab = np.array([trial % 2])
        cfg.lambda_g = float(rng.uniform(0, 2))
        params = init_transform(2, rng, n=1)
        # latent route
        _, g = _energy_grad(model, z, t, lab, cfg, "latent")
        f = lambda v: float(model.energy(v, t, lab, cfg.lambda_c, cfg.lambda_g)[0][0])
        num = central_diff(f, z)
        # transform route
        _, (ge, gb) = _energy_grad(model, z, t, lab, cfg, "transform", params)
        fe = lambda v: f((1 + v) * z + params.b)
        fb = lambda v: f((1 + params.e) * z + v)
        # skip points where the cosine group choice flips inside the stencil
        feats = lambda v: model.extractor.features(
            predict_x0(v, t, cfg_eps(model.denoiser, v, t, lab, 7.5), SCHED))
        from protoexpand.prototypes import batched_select
        pc, pg, mask = model.prototypes.stacked(lab)
        choices = {int(batched_select(feats(z + dz), pg, mask)[0]) for dz in (-1e-4, 0, 1e-4)}
        if len(choices) > 1:
            continue
        assert rel_error(g, num) < 1e-4, trial
        assert rel_error(ge, central_diff(fe, params.e)) < 1e-4, trial
        assert rel_error(gb, central_diff(fb, params.b)) < 1e-4, trial
        checked += 1
    assert checked >= 100


def test_zero_rho_leaves_params_unchanged():
    model = make_model()
    z = np.random.default_rng(7).standard_normal((4, 2))
    params = init_transform(2, np.random.default_rng(8), n=4)
    new, rec = guide_step(z, 400, np.array([0, 1, 0, 1]), params, GuidanceConfig(rho=0.0), model)
    assert np.array_equal(new.e, params.e) and np.array_equal(new.b, params.b)


def test_small_step_descends():
    rng = np.random.default_rng(9)
    cfg = GuidanceConfig(rho=1e-3)
    models = [make_model(seed=s) for s in range(5)]
    ok = 0
    for trial in range(1000):
        model = models[trial % 5]
        z = rng.standard_normal((1, 2))
        params = init_transform(2, rng, n=1)
        _, rec = guide_step(z, int(rng.integers(20, 1000)), np.array([trial % 2]), params, cfg, model)
        ok += rec.energy_after[0] <= rec.energy_before[0] + 1e-9
    assert ok >= 990


def test_guided_update_respects_ball_and_descends():
    model = make_model()
    rng = np.random.default_rng(10)
    z = rng.standard_normal((50, 2))
    labels = rng.integers(0, 2, 50)
    cfg = GuidanceConfig(rho=1e-3, epsilon=0.2)
    init = init_transform(2, np.random.default_rng(11), 0.2, n=50)
    out, rec, params = guided_update(z, 400, labels, cfg, model, np.random.default_rng(11))
    assert np.all(np.abs(out - z) <= 0.2)
    start = model.energy(apply_transform(z, init), 400, labels)[0]
    end = model.energy(out, 400, labels)[0]
    assert np.mean(end <= start + 1e-9) >= 0.95
    zero_ball = GuidanceConfig(epsilon=0.0)
    out0, _, _ = guided_update(z, 400, labels, zero_ball, model, np.random.default_rng(12))
    assert np.array_equal(out0, z)


def test_default_rho_moves_to_the_ball_edge():
    model = make_model()
    z = np.random.default_rng(13).standard_normal((20, 2))
    out, rec, _ = guided_update(z, 400, np.zeros(20, dtype=int), GuidanceConfig(), model,
                                np.random.default_rng(14))
    assert np.all(np.abs(out - z) <= 0.2)
    assert rec.clipped_fraction.mean() > 0


def test_mode_separation():
    model = make_model()
    z = np.random.default_rng(15).standard_normal((5, 2))
    labels = np.zeros(5, dtype=int)
    out, rec, params = guided_update(z, 400, labels, GuidanceConfig(mode="direct-latent", rho=1e-2), model, None)
    assert params is None and not np.array_equal(out, z)
    _, g = _energy_grad(model, z, 400, labels, GuidanceConfig(), "latent")
    np.testing.assert_allclose(out, z - 1e-2 * g, rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        guided_update(z, 400, labels, GuidanceConfig(mode="off"), model, np.random.default_rng(0))


def test_mismatched_extractor_refused():
    model = make_model()
    other = FeatureExtractor(Mlp.init([2, 8, 5, 2], np.random.default_rng(99)))
    with pytest.raises(ValueError):
        EnergyModel(model.denoiser, other, model.prototypes)


def test_failed_rows_keep_initial_transform():
    model = make_model()
    z = np.random.default_rng(16).standard_normal((3, 2))
    z[1] = 1.5e308
    params = init_transform(2, np.random.default_rng(17), n=3)
    params.e[1] = 0.9  # (1 + e) * z overflows
    with warnings.catch_warnings(record=True) as caught, np.errstate(all="ignore"):
        warnings.simplefilter("always")
        new, rec = guide_step(z, 400, np.zeros(3, dtype=int), params, GuidanceConfig(), model)
    assert rec.failed.tolist() == [False, True, False]
    assert np.array_equal(new.e[1], params.e[1])
    assert not np.array_equal(new.e[0], params.e[0])
    assert any("guidance failed" in str(w.message) for w in caught)


def test_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(M=60).validate(50)
    with pytest.raises(ValueError):
        GuidanceConfig(mode="sideways").validate(50)
    assert GuidanceConfig().guided_indices() == [20]
    assert GuidanceConfig(steps=3).guided_indices() == [20, 19, 18]
