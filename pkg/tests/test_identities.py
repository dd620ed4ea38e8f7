import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rpclab.cascade import CascadeParams
from rpclab.exchangeability import HierarchicalKernel
from rpclab.identities import (
    ConditioningError,
    ContractError,
    SimplexPoint,
    TestFunctionSpec,
    default_phi_panel,
    ggi_delta,
    interval_functions,
    mixture_law_check,
    partition_and_tilt,
    reweighting_check,
    tilt_from_b,
    tilt_group_residual,
    tilt_map,
    tilt_normalizer_identity,
)
from rpclab.replicas import CascadeSource, SingleAtomSource, TwoAtomSource
from rpclab.rsb import Configuration, RSBDiscretization

ONE = TestFunctionSpec("spin_product", ())
PAIR = TestFunctionSpec("spin_product", ((1, 1), (1, 2)))
CONF = Configuration(1, {(): 2}, ((1,), (1,), (2,)))


def _cascade_source(r=1, d=40, groups=100, M=2):
    zetas = (0.5,) if r == 1 else (0.3, 0.6)
    return CascadeSource(CascadeParams(r, zetas, d), HierarchicalKernel("mah2", (0.5,) * (r + 1), 0.3), M, groups)


def test_ggi_contracts(rng):
    g = SingleAtomSource(0.7).draw(10, 3, rng)
    with pytest.raises(ContractError):
        ggi_delta(g, ONE, 1, 1)
    with pytest.raises(ContractError):
        ggi_delta(g, ONE, 3, 1)
    with pytest.raises(ContractError):
        ggi_delta(g, TestFunctionSpec("spin_product", ((1, 3),)), 2, 1)


def test_ggi_single_atom_zero(rng):
    g = SingleAtomSource(0.7).draw(100, 4, rng)
    for n in (2, 3):
        assert ggi_delta(g, PAIR, n, 2).estimate == pytest.approx(0.0, abs=1e-12)


def test_ggi_constant_f_and_cascade(rng):
    g = _cascade_source(r=2, d=30, groups=200, M=3).draw(300, 4, rng)
    for n, p, f in ((2, 1, ONE), (3, 1, PAIR), (3, 2, PAIR), (3, 1, TestFunctionSpec("overlap_monomial", ((1, 2),)))):
        e = ggi_delta(g, f, n, p)
        assert abs(e.estimate) <= 3 * e.se + 2 * g.residual
    assert json.loads(e.to_json(seed=1))["seed"] == 1


def test_ggi_two_atom_control(rng):
    g = TwoAtomSource(0.5, 0.0, 4).draw(20000, 3, rng)
    e = ggi_delta(g, PAIR, 2, 1)
    assert e.estimate == pytest.approx(-0.25, abs=5 * e.se)
    assert abs(e.estimate) > 5 * e.se


def test_mixture_law(rng):
    disc = RSBDiscretization.from_grid((0.0, 1.0))
    res = mixture_law_check(SingleAtomSource(1.0).draw(50, 3, rng), 2, disc, zeta=[1e-300, 1.0])
    assert res.distance == pytest.approx(0.0, abs=1e-12)
    g = _cascade_source(d=80).draw(1000, 3, rng)
    res = mixture_law_check(g, 2, disc, zeta=[0.5, 0.5])
    cell = res.cells[(1,)]
    assert cell["empirical"][1] == pytest.approx(0.75, abs=4 * np.sqrt(0.75 * 0.25 / cell["count"]) + 2 * g.residual)
    with pytest.raises(ContractError):
        mixture_law_check(g, 1, disc)


def test_mixture_distance_decreases(rng):
    disc = RSBDiscretization.from_grid((0.0, 1.0))
    src = _cascade_source(d=60)
    dist = [mixture_law_check(src.draw(m, 3, rng), 2, disc, zeta=[0.5, 0.5]).distance for m in (20, 2000)]
    assert dist[1] < dist[0]


def test_tilt_examples():
    x = SimplexPoint.from_coords([0.2, 0.3])
    assert np.allclose(tilt_map([0.0, 0.0], x).x, x.x)
    y = tilt_map([np.log(2), 0.0], x)
    assert np.allclose(y.x, [1 / 3, 0.25])
    back = tilt_map([-np.log(2), 0.0], y)
    assert np.abs(back.x - x.x).max() <= 1e-12
    assert tilt_normalizer_identity([0.0, 0.0], x) == 0.0
    with pytest.raises(ContractError):
        SimplexPoint.from_coords([0.6, 0.5])
    with pytest.raises(ContractError):
        tilt_map([np.inf, 0.0], x)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3),
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
)
def test_tilt_algebra_property(w, a, b):
    w = np.array(w) / np.sum(w)
    x = SimplexPoint(w[:2], float(w[2]))
    assert tilt_group_residual(a, b, x) <= 1e-12
    assert tilt_normalizer_identity(a, x) <= 1e-12


def test_tilt_stress(rng):
    for _ in range(100):
        w = rng.dirichlet(np.ones(4))
        x = SimplexPoint(w[:3], float(w[3]))
        a = rng.uniform(-30, 30, size=3)
        a[0] = 30.0
        assert tilt_normalizer_identity(a, x) <= 1e-9


def test_tilt_matches_b_construction(rng):
    src = _cascade_source(d=20, groups=20)
    g = src.draw(50, 3, rng, support=True)
    with pytest.raises(ContractError):
        tilt_from_b(CONF, {(): 0.4})
    b = {(1,): -0.3, (2,): 0.8}
    table = interval_functions(CONF, b)
    assert np.allclose(table, [[0.0, -0.3], [0.0, 0.0], [0.0, 0.8]])
    event, delta, T, _, _, verts = partition_and_tilt(g, CONF, RSBDiscretization.from_grid((0.0, 1.0)), table)
    a = tilt_from_b(CONF, b)
    avec = np.array([a[t] for t in verts])
    for i in np.flatnonzero(event):
        expected = tilt_map(avec, SimplexPoint(delta[i], float(1 - delta[i].sum()))).x
        assert np.allclose(T[i], expected)
    assert np.allclose(delta[event].sum(axis=1) <= 1, True)


def test_reweighting_zero_b_exact(rng):
    res = reweighting_check(_cascade_source(), CONF, {}, default_phi_panel(), 200, rng)
    assert np.all(np.abs(res.diff) <= 1e-12)


def test_reweighting_cascade_and_control(rng):
    b = {(): 0.5, (1,): -0.7, (2,): 0.9}
    res = reweighting_check(_cascade_source(), CONF, b, default_phi_panel(), 1000, rng)
    assert np.all(np.abs(res.diff) <= 3 * res.se + 2 * res.residual)
    neg = reweighting_check(TwoAtomSource(0.7, 0.0, 2), CONF, b, default_phi_panel(), 20000, rng, disc=RSBDiscretization.from_grid((0.0, 1.0)))
    assert np.any(np.abs(neg.diff) > 5 * neg.se)


def test_reweighting_conditioning_error(rng):
    conf = Configuration(1, {(): 2}, ((1,), (2,), (2,)))
    with pytest.raises(ConditioningError):
        reweighting_check(SingleAtomSource(1.0), conf, {}, default_phi_panel(), 10, rng,
                       disc=RSBDiscretization.from_grid((0.0, 1.0)), zeta=[0.0, 1.0])
