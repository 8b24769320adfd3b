import itertools
import math

import numpy as np
import pytest
from sklearn.base import clone

from qroar.attention import Objective, forward_logits, make_devset, random_weights, score
from qroar.exceptions import ConfigError, ShapeError
from qroar.quant import QuantSpec
from qroar.rope import FrequencySchedule, make_schedule
from qroar.schemes import identity_scheme, yarn_scheme
from qroar.search import (BandRescaler, BandScales, ScaleMode, SearchConfig, apply_band_scales,
                          band_bounds, coordinate_search, gamma_bound, grid_search, make_grid,
                          partition_bands)


def test_reference_defaults():
    cfg = SearchConfig()
    assert (cfg.B, cfg.K, cfg.tau, cfg.kappa, cfg.eps) == (8, 7, 0.1, 1.2, 1e-3)
    assert cfg.mode is ScaleMode.SYMMETRIC and cfg.reverse_pass
    assert cfg.passes == 2


@pytest.mark.parametrize("bad", [dict(kappa=0.9), dict(kappa=1.31), dict(K=1), dict(B=0),
                                 dict(tau=0.0), dict(eps=0.5), dict(mode="other")])
def test_config_validation(bad):
    with pytest.raises((ConfigError, ValueError)):
        SearchConfig(**bad)


def test_partition_examples():
    sched = make_schedule(64)
    p = partition_bands(sched, 32)
    assert p.bands == tuple((i,) for i in range(32))
    assert partition_bands(sched, 1).bands == (tuple(range(32)),)
    p8 = partition_bands(sched, 8)
    assert p8.bands == tuple(tuple(range(4 * b, 4 * b + 4)) for b in range(8))
    assert p8.omega_min == sched.freqs[-1]
    # lower median of four frequencies is the third largest
    assert p8.omega_med[0] == sched.freqs[2]
    with pytest.raises(ConfigError):
        partition_bands(sched, 33)
    with pytest.raises(ConfigError):
        partition_bands(sched, 0)


def test_partition_irregular_drops_empty_bands():
    sched = FrequencySchedule.from_freqs([1.0, 0.9, 0.8, 1e-4])
    p = partition_bands(sched, 4)
    flat = sorted(i for b in p.bands for i in b)
    assert flat == [0, 1, 2, 3]
    assert all(len(b) > 0 for b in p.bands)
    assert p.n_bands < 4


def test_gamma_bound():
    assert gamma_bound(1.0, 1.0, 0.1) == pytest.approx(1.1)
    assert gamma_bound(math.e, 1.0, 0.1) == pytest.approx(1.05)
    g = [gamma_bound(w, 1e-3, 0.1) for w in np.geomspace(1e-3, 1, 20)]
    assert all(a > b for a, b in zip(g, g[1:]))
    with pytest.raises(ConfigError):
        gamma_bound(0.5, 1.0, 0.1)


def test_band_bounds():
    lo, hi, deg = band_bounds(1.1, 1.0, 1.2)
    assert (lo, hi, deg) == (pytest.approx(1 / 1.1), 1.1, False)
    lo, hi, deg = band_bounds(1.1, 1.5, 1.2)
    assert lo == hi == pytest.approx(0.8) and deg
    lo, hi, deg = band_bounds(1.1, 1.2, 1.2)
    assert hi == 1.0 and lo == pytest.approx(1 / 1.1) and not deg
    lo, hi, deg = band_bounds(1.1, 5.0, 1.2)
    assert lo == hi == 0.5 and deg


def test_make_grid():
    np.testing.assert_allclose(make_grid(0.5, 2.0, 3), [0.5, 1.0, 2.0])
    assert make_grid(0.8, 0.8, 7) == [0.8]
    grid = make_grid(1 / 1.1, 1.1, 7)
    expected = np.exp(np.linspace(-math.log(1.1), math.log(1.1), 7))
    np.testing.assert_allclose(grid, expected, rtol=1e-12)
    assert 1.0 in grid
    np.testing.assert_allclose(np.log(grid), -np.log(grid)[::-1], atol=1e-15)
    # asymmetric interval: 1.0 replaces the nearest interior point
    g = make_grid(0.9, 1.05, 5)
    assert len(g) == 5 and 1.0 in g and g[0] == 0.9 and g[-1] == 1.05
    assert g == sorted(g)
    # interval excluding 1.0 is plain log spacing
    np.testing.assert_allclose(make_grid(0.6, 0.9, 4), np.geomspace(0.6, 0.9, 4))


@pytest.fixture(scope="module")
def toy():
    w = random_weights(d_model=64, n_heads=2, d_h=16, seed=3)
    dev = make_devset([64, 128], 64, seed=4, calibration_samples=10_000)
    return w, dev


def test_apply_band_scales_identity_and_immutability(toy):
    w, _ = toy
    p = partition_bands(w.schedule(), 4)
    same = apply_band_scales(w, p, np.ones(4))
    assert np.array_equal(same.w_q, w.w_q) and np.array_equal(same.w_k, w.w_k)
    g = np.array([1.1, 0.9, 1.05, 0.95])
    out = apply_band_scales(w, p, g)
    assert not np.array_equal(out.w_q, w.w_q)
    band = p.band_of_pair()[w.column_pairs]
    np.testing.assert_array_equal(out.w_q, w.w_q * g[band])
    np.testing.assert_allclose(out.w_k, w.w_k / g[band], rtol=1e-15)
    with pytest.raises(ShapeError):
        apply_band_scales(w, p, np.ones(3))
    with pytest.raises(ShapeError):
        apply_band_scales(w, partition_bands(make_schedule(8), 2), np.ones(2))


def test_symmetric_invariance(toy):
    w, dev = toy
    h = dev.items[1][0].values
    scheme = yarn_scheme(w.schedule(), 64, 128)
    ref = forward_logits(w, h, scheme)
    p = partition_bands(w.schedule(), 8)
    g = np.exp(np.random.default_rng(5).uniform(-0.5, 0.5, 8))
    out = forward_logits(apply_band_scales(w, p, g, "symmetric"), h, scheme)
    np.testing.assert_allclose(out, ref, atol=1e-10, rtol=0)
    mask = np.tril(np.ones((128, 128), dtype=bool))
    masked = np.where(mask, ref, -np.inf), np.where(mask, out, -np.inf)
    assert np.array_equal(masked[0].argmax(-1), masked[1].argmax(-1))


def test_shared_mode_quadruples_band(toy):
    w, dev = toy
    h = dev.items[0][0].values
    p = partition_bands(w.schedule(), 1)
    scaled = apply_band_scales(w, p, np.array([2.0]), "shared")
    ref = forward_logits(w, h, identity_scheme())
    np.testing.assert_allclose(forward_logits(scaled, h, identity_scheme()), 4 * ref,
                               rtol=1e-12, atol=1e-12)
    # isolate one band of a finer partition by zeroing the other columns
    p4 = partition_bands(w.schedule(), 4)
    keep = (p4.band_of_pair()[w.column_pairs] == 2).astype(float)
    iso = w.with_matrices(w.w_q * keep, w.w_k * keep)
    base = forward_logits(iso, h, identity_scheme())
    out = forward_logits(apply_band_scales(iso, p4, np.array([1, 1, 2.0, 1]), "shared"), h,
                         identity_scheme())
    np.testing.assert_allclose(out, 4 * base, rtol=1e-12, atol=1e-12)


def test_separable_matches_exhaustive():
    rng = np.random.default_rng(6)
    grids = [sorted(make_grid(1 / 1.2, 1.2, 5)) for _ in range(3)]
    c = rng.uniform(-0.15, 0.15, 3)
    J = lambda g: float(np.sum((np.log(g) - c) ** 2))  # noqa: E731
    g, J0, evals, commits, _ = grid_search(J, grids, reverse_pass=True)
    best = min(itertools.product(*grids), key=lambda t: J(np.array(t)))
    np.testing.assert_array_equal(g, best)
    assert J0 == J(np.ones(3))
    assert len(evals) == 2 * 3 * 5


def test_grid_search_ties_keep_current():
    g, J0, evals, commits, _ = grid_search(lambda g: 0.0, [[0.9, 1.0, 1.1]] * 2)
    np.testing.assert_array_equal(g, [1.0, 1.0])


def test_search_without_quant_is_noop(toy):
    w, dev = toy
    scheme = yarn_scheme(w.schedule(), 64, 128)
    p = partition_bands(w.schedule(), 4)
    obj = Objective("logit_mse", w, scheme, dev, n_queries=8)
    res = coordinate_search(w, p, None, scheme, obj, dev, SearchConfig(B=4, K=3))
    np.testing.assert_array_equal(res.g, 1.0)
    assert res.J_baseline == 0.0 and res.J_final == 0.0


def test_search_monotone_and_budget(toy):
    w, dev = toy
    scheme = yarn_scheme(w.schedule(), 64, 128)
    p = partition_bands(w.schedule(), 4)
    quant = QuantSpec(bits=3, group_size=32)
    obj = Objective("logit_mse", w, scheme, dev, n_queries=8)
    cfg = SearchConfig(B=4, K=5)
    res = coordinate_search(w, p, quant, scheme, obj, dev, cfg)
    assert len(res.evaluations) == cfg.passes * 4 * 5
    Js = [res.J_baseline] + [c["J_after"] for c in res.commits]
    assert all(b <= a for a, b in zip(Js, Js[1:]))
    assert res.J_final <= res.J_baseline
    for b, (lo, hi) in enumerate(res.bounds):
        assert lo <= res.g[b] <= hi
    J_check, _ = score(obj, apply_band_scales(w, p, res), scheme, quant, dev)
    assert J_check == res.J_final
    again = coordinate_search(w, p, quant, scheme, obj, dev, cfg)
    assert again.to_dict() == res.to_dict()
    with pytest.raises(ConfigError):
        coordinate_search(w, p, quant, scheme, obj, make_devset([], 64), cfg)


def test_reestimate_rho_flag(toy):
    w, dev = toy
    scheme = yarn_scheme(w.schedule(), 64, 128)
    p = partition_bands(w.schedule(), 2)
    obj = Objective("logit_mse", w, scheme, dev, n_queries=4)
    cfg = SearchConfig(B=2, K=3, reestimate_rho=True, reverse_pass=False)
    res = coordinate_search(w, p, QuantSpec(bits=3, group_size=32), scheme, obj, dev, cfg)
    assert len(res.evaluations) == 2 * 3
    assert res.J_final <= res.J_baseline


def test_band_scales_round_trip():
    bs = BandScales(g=np.array([1.0, 0.95]), mode=ScaleMode.SYMMETRIC,
                    bounds=[(0.9, 1.1), (0.8, 0.8)], grid=[[0.9, 1.0, 1.1], [0.8]],
                    flagged=[1], evaluations=[{"pass": 0, "band": 0, "g": 1.0, "J": 2.0}],
                    commits=[{"pass": 0, "band": 0, "g": 1.0, "J_before": 2.0, "J_after": 2.0}],
                    J_baseline=2.0, J_final=2.0, rho_w_band=[1.0, 1.6])
    assert BandScales.from_dict(bs.to_dict()).to_dict() == bs.to_dict()


def test_band_rescaler_estimator(toy):
    w, dev = toy
    scheme = yarn_scheme(w.schedule(), 64, 128)
    est = BandRescaler(scheme=scheme, bits=3, group_size=32, n_bands=2, grid_size=3,
                       reverse_pass=False)
    assert clone(est).get_params()["n_bands"] == 2
    out = est.fit_transform(w, dev)
    assert est.g_.shape == (2,)
    np.testing.assert_array_equal(out.w_q, apply_band_scales(w, est.partition_, est.g_).w_q)
    with pytest.raises(ConfigError):
        BandRescaler().fit(w)
