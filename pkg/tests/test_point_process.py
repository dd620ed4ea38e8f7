import numpy as np
import pytest
from scipy import stats
from scipy.special import gamma

from rpclab import point_process as pp
from rpclab.point_process import DegenerateWeightsError, ParameterError


def stable_moment_closed_form(x, a):
    # Laplace transform of the full sum is exp(-Gamma(1-x) lam^x)
    return gamma(1 - a / x) * gamma(1 - x) ** (a / x) / gamma(1 - a)


def test_points_decreasing_positive(rng):
    seq = pp.sample_poisson_process(0.4, 50, rng)
    assert np.all(seq.points > 0)
    assert np.all(np.diff(seq.points) < 0)


@pytest.mark.parametrize("zeta", [0.0, 1.0, -0.2, 1.5])
def test_bad_zeta(rng, zeta):
    with pytest.raises(ParameterError):
        pp.sample_poisson_process(zeta, 5, rng)


def test_top_point_is_frechet(rng):
    zeta = 0.45
    top = pp.poisson_points(zeta, 1, 20000, rng)[:, 0]
    # void probability: P(u1 <= t) = exp(-t^-zeta)
    res = stats.kstest(top, lambda t: np.exp(-np.power(t, -zeta)))
    assert res.pvalue > 0.01


def test_mean_count_above_eps(rng):
    zeta, eps = 0.5, 0.5
    pts = pp.poisson_points(zeta, 60, 40000, rng)
    counts = (pts > eps).sum(axis=1)
    assert pts[:, -1].max() < eps  # the kept window covers (eps, inf)
    se = counts.std(ddof=1) / np.sqrt(len(counts))
    assert abs(counts.mean() - eps**-zeta) < 3 * se


def test_pd_weights_valid(rng):
    w = pp.sample_pd(0.5, 80, rng)
    assert np.all(np.diff(w.weights) < 0)
    assert w.weights.sum() + w.truncation_mass == pytest.approx(1.0, abs=1e-12)


def test_pd_collision_probability(rng):
    # two independent samples from a one-level cascade share an atom w.p. 1 - x
    x = 0.3
    w, tm, _ = pp.pd_batch(x, 100, 40000, rng)
    w = w / w.sum(axis=1, keepdims=True)
    c = np.cumsum(w, axis=1)
    i = (rng.random((len(w), 1)) > c).sum(axis=1)
    j = (rng.random((len(w), 1)) > c).sum(axis=1)
    hits = (i == j).astype(float)
    se = hits.std(ddof=1) / np.sqrt(len(hits))
    assert abs(hits.mean() - 0.7) < 3 * se + 2 * tm.mean()


def test_top_weight_decreases_in_x(rng):
    means = [pp.pd_batch(x, 100, 20000, rng)[0][:, 0].mean() for x in (0.2, 0.5, 0.8)]
    assert means[0] > means[1] > means[2]


def test_tilted_a0_matches_untilted(rng):
    a = pp.pd_tilted_batch(0.5, 0.0, 50, 5000, rng, base=50000)[0][:, 0]
    b = pp.pd_batch(0.5, 50, 5000, rng)[0][:, 0]
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_tilted_resampling_consistent_with_weighted_base(rng):
    x, a, size, base = 0.6, 0.3, 5000, 100000
    res_rng, base_rng = np.random.default_rng(7), np.random.default_rng(8)
    resampled, _, ess = pp.pd_tilted_batch(x, a, 100, size, res_rng, base=base)
    w, _, total = pp.pd_batch(x, 100, base, base_rng)
    iw, _ = pp.importance_weights(np.log(total), a)
    grid = np.quantile(resampled[:, 0], np.linspace(0.01, 0.99, 99))
    ecdf_res = (resampled[:, 0][None, :] <= grid[:, None]).mean(axis=1)
    order = np.argsort(w[:, 0])
    cw = np.cumsum(iw[order])
    ecdf_w = cw[np.searchsorted(w[order, 0], grid, side="right") - 1]
    distance = np.abs(ecdf_res - ecdf_w).max()
    se = 0.5 * np.sqrt(1 / size + 1 / ess)
    assert distance < 3 * se


def test_tilted_second_moment_moves(rng):
    x, a = 0.6, 0.3
    # importance-weighted oracle on independent base draws
    w, _, total = pp.pd_batch(x, 100, 200000, np.random.default_rng(11))
    iw, _ = pp.importance_weights(np.log(total), a)
    oracle = float(np.sum(iw * (w**2).sum(axis=1)))
    assert abs(oracle - 0.4) > 0.1
    tilted, tm, _ = pp.pd_tilted_batch(x, a, 100, 20000, rng, base=200000)
    s2 = (tilted**2).sum(axis=1)
    se = s2.std(ddof=1) / np.sqrt(len(s2))
    assert abs(s2.mean() - oracle) < 4 * se + 2 * tm.mean()
    # PD(alpha, theta) collision probability (1 - alpha) / (1 + theta)
    assert oracle == pytest.approx((1 - x) / (1 - a), abs=0.01)


def test_tilt_requires_a_below_x(rng):
    with pytest.raises(ParameterError):
        pp.pd_tilted_batch(0.5, 0.5, 10, 10, rng)
    with pytest.raises(ParameterError):
        pp.stable_moment(0.5, 0.6, rng)


def test_degenerate_weights_error(rng):
    with pytest.raises(DegenerateWeightsError):
        pp.pd_tilted_batch(0.5, 0.49, 50, 10, rng, base=2000, min_ess_fraction=0.99)


def test_stable_moment_a0_is_one(rng):
    assert pp.stable_moment(0.5, 0.0, rng).mean == 1.0


@pytest.mark.parametrize("x,a", [(0.5, 0.2), (0.3, 0.1)])
def test_stable_moment_matches_closed_form(x, a):
    est = pp.stable_moment(x, a, np.random.default_rng(2), samples=60000, count=200)
    assert abs(est.mean - stable_moment_closed_form(x, a)) < 4 * est.se + 0.01


def test_stable_moment_truncation_doubling():
    x, a = 0.5, 0.2
    e1 = pp.stable_moment(x, a, np.random.default_rng(3), samples=40000, count=100)
    e2 = pp.stable_moment(x, a, np.random.default_rng(4), samples=40000, count=200)
    assert abs(e1.mean - e2.mean) < 3 * np.hypot(e1.se, e2.se)


def test_stable_moment_heavy_tail_flag(rng):
    x = 0.5
    assert pp.stable_moment(x, 0.9 * x, rng, samples=2000).heavy_tail
    assert not pp.stable_moment(x, 0.2 * x, rng, samples=2000).heavy_tail
    est = pp.stable_moment(x, 0.9 * x, rng, samples=20000)
    assert np.isfinite(est.mean)


def test_truncation_consistency(rng):
    w1, tm1, _ = pp.pd_batch(0.6, 50, 20000, np.random.default_rng(5))
    w2, tm2, _ = pp.pd_batch(0.6, 100, 20000, np.random.default_rng(6))
    s1, s2 = (w1**2).sum(1), (w2**2).sum(1)
    se = np.hypot(s1.std() / np.sqrt(len(s1)), s2.std() / np.sqrt(len(s2)))
    assert abs(s1.mean() - s2.mean()) < tm1.mean() + 3 * se


def test_resampled_duplicates_vanish_with_base(rng):
    # no atoms in the tilted marginal: duplicate rate falls as the base pool grows
    rates = []
    for base in (2000, 20000, 200000):
        w, _, _ = pp.pd_tilted_batch(0.6, 0.2, 20, 1000, np.random.default_rng(base), base=base)
        rates.append(1 - len(np.unique(w[:, 0])) / len(w))
    assert rates[0] > rates[1] > rates[2]
    assert rates[2] < 0.01


def test_reproducible():
    a = pp.poisson_points(0.4, 10, 5, np.random.default_rng(9))
    b = pp.poisson_points(0.4, 10, 5, np.random.default_rng(9))
    assert np.array_equal(a, b)
