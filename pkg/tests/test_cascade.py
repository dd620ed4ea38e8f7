import json

import numpy as np
import pytest
from scipy import stats

from rpclab.cascade import (
    CascadeParams,
    build_cascade,
    build_cascades,
    leaf_overlaps,
    leaf_wedges,
    truncation_bound,
)
from rpclab.point_process import ParameterError, pd_batch
from rpclab.rsb import check_ultrametric
from rpclab.tree import leaf_digits


def test_params_validation():
    with pytest.raises(ParameterError):
        CascadeParams(2, (0.6, 0.3), 10)
    with pytest.raises(ParameterError):
        CascadeParams(2, (0.3,), 10)
    with pytest.raises(ParameterError):
        CascadeParams(1, (1.0,), 10)
    p = CascadeParams(2, (0.3, 0.6), 10)
    assert p.q == (0.0, 0.5, 1.0)
    assert np.allclose(p.wedge_probabilities, [0.3, 0.3, 0.4])


def test_depth_one_matches_pd(rng):
    batch = build_cascades(CascadeParams(1, (0.5,), 50), 4000, rng)
    ref, _, _ = pd_batch(0.5, 50, 4000, rng)
    for k in range(3):
        assert stats.ks_2samp(batch.V[1][:, k], ref[:, k]).pvalue > 0.01


def test_children_decreasing_and_normalized(rng):
    batch = build_cascades(CascadeParams(3, (0.2, 0.5, 0.8), 6), 200, rng)
    d = 6
    for p in range(1, 4):
        kids = batch.V[p].reshape(200, -1, d)
        assert np.all(np.diff(kids, axis=2) <= 0)
    assert np.allclose(batch.V[3].sum(axis=1) + batch.residual_mass, 1.0)
    assert np.all(batch.residual_mass > 0)


def test_internal_mass_is_children_plus_tail(rng):
    batch = build_cascades(CascadeParams(2, (0.3, 0.6), 8), 50, rng)
    for p in range(2):
        kids = batch.V[p + 1].reshape(50, -1, 8).sum(axis=2)
        assert np.allclose(batch.V[p], kids + batch.tail[p])
    assert np.allclose(batch.V[0], 1.0)


def test_path_products_exact(rng):
    c = build_cascade(CascadeParams(2, (0.3, 0.6), 4), rng)
    for j in range(16):
        assert c.w[2][j] == c.u[0][0, j // 4] * c.u[1][j // 4, j % 4]


def test_relabelling_is_hierarchical(rng):
    c = build_cascade(CascadeParams(2, (0.3, 0.6), 5), rng)
    # relabelled leaf (a, b) sits under relabelled vertex a
    for a in range(1, 6):
        parent = c.original_label((a,))
        for b in range(1, 6):
            assert c.original_label((a, b))[:1] == parent
            assert c.mass((a, b)) == pytest.approx(c.v[2][(c.original_label((a, b))[0] - 1) * 5 + c.original_label((a, b))[1] - 1])


def test_point_mass_leaf(rng):
    c = build_cascade(CascadeParams(2, (0.3, 0.6), 1), rng)
    assert all(c.sample_leaf(rng) == (1, 1) for _ in range(20))


def test_leaf_frequencies_match_weights(rng):
    c = build_cascade(CascadeParams(2, (0.3, 0.6), 5), rng)
    draws = c.sample_leaf_indices(100_000, rng)
    freq = np.bincount(draws, minlength=25) / 1e5
    p = c.leaf_masses()
    se = np.sqrt(p * (1 - p) / 1e5)
    assert np.all(np.abs(freq - p) <= 3 * se + 1e-12) or stats.chisquare(freq * 1e5, p * 1e5).pvalue > 0.001


def test_wedge_law(rng):
    params = CascadeParams(2, (0.3, 0.6), 50)
    batch = build_cascades(params, 2000, rng)
    a = batch.sample_leaves(50, rng)
    b = batch.sample_leaves(50, rng)
    digits = leaf_digits(50, 2)
    eq = digits[a] == digits[b]
    wedges = np.cumprod(eq, axis=-1).sum(axis=-1)
    freq = np.bincount(wedges.ravel(), minlength=3) / wedges.size
    # cluster-robust s.e. over cascades
    per = np.stack([(wedges == k).mean(axis=1) for k in range(3)], axis=1)
    se = per.std(axis=0, ddof=1) / np.sqrt(len(per))
    tol = 3 * se + 2 * batch.residual_mass.mean()
    assert np.all(np.abs(freq - [0.3, 0.3, 0.4]) <= tol)


def test_child_ratios(rng):
    c = build_cascade(CascadeParams(2, (0.3, 0.6), 20), rng)
    ratios, resid = c.child_ratios((1,))
    assert np.all(np.diff(ratios) <= 0)
    assert ratios.sum() + resid == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        c.child_ratios(())
    with pytest.raises(ParameterError):
        c.child_ratios((1, 1))


def test_truncation_bound_decreases(rng):
    params = CascadeParams(2, (0.3, 0.6), 10)
    means = [truncation_bound(params, d, rng, builds=1000)[1] for d in (10, 20, 40)]
    assert means[0] > means[1] > means[2] > 0
    bound, _, _ = truncation_bound(params, 20, rng, builds=1000)
    fresh = build_cascades(CascadeParams(2, (0.3, 0.6), 20), 1000, rng).residual_mass.mean()
    assert bound >= fresh


def test_level_restriction(rng):
    deep = build_cascades(CascadeParams(2, (0.3, 0.6), 40), 3000, rng)
    shallow = build_cascades(CascadeParams(1, (0.3,), 40), 3000, rng)
    for k in range(3):
        assert stats.ks_2samp(deep.V[1][:, k], shallow.V[1][:, k]).pvalue > 0.01


def test_overlap_matrices_ultrametric(rng):
    params = CascadeParams(3, (0.2, 0.5, 0.8), 4, q=(0.0, 0.3, 0.6, 0.9))
    batch = build_cascades(params, 100, rng)
    leaves = batch.sample_leaves(6, rng)
    q = np.asarray(params.q)[leaf_wedges(params, leaves)]
    for m in q:
        np.fill_diagonal(m, 1.0)
        assert check_ultrametric(m, tol=0.0).passed
    assert leaf_overlaps(params, np.array([0]), np.array([1]))[0] == pytest.approx(0.6)


def test_dump_format(rng):
    c = build_cascade(CascadeParams(2, (0.3, 0.6), 3), rng)
    c.seed = 11
    header, body = c.dump()
    meta = json.loads(header)
    assert meta["schema_version"] == 1 and meta["seed"] == 11
    assert meta["params"]["zetas"] == [0.3, 0.6]
    rows = body.strip().split("\n")
    assert rows[0] == "vertex_label,u,w,v,V"
    assert len(rows) == 1 + 1 + 3 + 9
    assert rows[1].startswith("*,")
