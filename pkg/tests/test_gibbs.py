import itertools

import numpy as np
import pytest

from rpclab.gibbs import (
    CapacityError,
    ContractError,
    GibbsEnsemble,
    InstanceCorruptionError,
    KSatInstance,
    SKInstance,
    SpinConfiguration,
    all_energies,
    concentration_probe,
    enumerate_gibbs,
    fit_growth_exponent,
    index_to_spins,
    instance_from_text,
    instance_to_text,
    ksat_energy,
    metropolis_replicas,
    overlap_matrix,
    perturbation_value,
    perturbed_energy,
    replicas_to_csv,
    sample_ksat,
    sample_perturbation,
    sample_sk,
    schedule_strength,
    sk_energy,
    spins_to_index,
    word_counts,
)
from rpclab.stats import pooled_chisquare


def test_ksat_examples():
    inst = KSatInstance(1, 1, 1.0, [[0]], [[1]])
    assert ksat_energy(inst, [1]) == 1
    assert ksat_energy(inst, [-1]) == 0
    bad = KSatInstance(2, 1, 1.0, [[5]], [[1]])
    with pytest.raises(InstanceCorruptionError):
        ksat_energy(bad, [1, 1])


def test_ksat_energy_bounds(rng):
    inst = sample_ksat(10, 3, 2.0, rng)
    e = all_energies(inst)
    assert e.min() >= 0 and e.max() <= inst.clause_count
    spins = index_to_spins(np.arange(1024), 10)
    assert np.array_equal(e, ksat_energy(inst, spins))


def test_sk_examples(rng):
    assert sk_energy(SKInstance(3, np.zeros((3, 3))), [1, -1, 1]) == 0
    inst = sample_sk(6, rng)
    s = np.array([1, -1, 1, 1, -1, -1])
    assert sk_energy(inst, s) == pytest.approx(sk_energy(inst, -s))
    g = np.array([[0.5, -1.0], [2.0, 0.25]])
    inst = SKInstance(2, g)
    for s in itertools.product([-1, 1], repeat=2):
        brute = sum(g[i, j] * s[i] * s[j] for i in range(2) for j in range(2)) / np.sqrt(2)
        assert sk_energy(inst, s) == pytest.approx(brute)
    with pytest.raises(ContractError):
        sk_energy(inst, [1, 1, 1])


def test_site_symmetry(rng):
    perm = rng.permutation(7)
    sk = sample_sk(7, rng)
    sk_p = SKInstance(7, sk.couplings[np.ix_(np.argsort(perm), np.argsort(perm))])
    ks = sample_ksat(7, 2, 1.5, rng)
    ks_p = KSatInstance(7, 2, 1.5, perm[ks.indices], ks.signs)
    spins = index_to_spins(np.arange(128), 7)
    permuted = np.empty_like(spins)
    permuted[:, perm] = spins
    assert np.allclose(sk_energy(sk, spins), sk_energy(sk_p, permuted))
    assert np.array_equal(ksat_energy(ks, spins), ksat_energy(ks_p, permuted))


def test_spin_configuration_and_index():
    with pytest.raises(ValueError):
        SpinConfiguration(np.array([1, 0, -1]))
    s = index_to_spins(np.arange(16), 4)
    assert np.array_equal(spins_to_index(s), np.arange(16))


def test_word_counts_brute_force():
    N = 4
    for p in range(1, 5):
        T = word_counts(N, p)
        seen = {}
        for w in itertools.product(range(N), repeat=p):
            odd = frozenset(i for i in range(N) if w.count(i) % 2)
            seen[odd] = seen.get(odd, 0) + 1
        for A, c in seen.items():
            assert T[len(A)] == c


def test_perturbation_zero_and_variance(rng):
    pert = sample_perturbation(5, np.zeros(8), 1.0, rng)
    assert np.all(pert.table() == 0)
    sigma = np.array([1, -1, 1, 1, -1])
    x = np.full(8, 3.0)
    vals = np.array([perturbation_value(sample_perturbation(5, x, 1.0, rng), sigma) for _ in range(4000)])
    assert vals.var() <= 3.0
    assert vals.var() == pytest.approx(np.sum(9 * 4.0 ** -np.arange(1, 9)), rel=0.1)


def test_tensor_components_unit_variance(rng):
    sigma = np.array([1, -1, -1, 1])
    for p in (1, 2, 3):
        vals = np.array([sample_perturbation(4, np.ones(3), 1.0, rng, kind="tensor").component(p, sigma) for _ in range(3000)])
        assert vals.var() == pytest.approx(1.0, rel=0.1)


def test_walsh_matches_tensor_covariance(rng):
    N, x = 4, np.array([1.0, 2.0, 1.5])
    spins = index_to_spins(np.arange(16), N).astype(float)
    R = spins @ spins.T / N
    theory = sum(4.0**-p * x[p - 1] ** 2 * R**p for p in range(1, 4))
    for kind in ("walsh", "tensor"):
        draws = np.array([sample_perturbation(N, x, 1.0, rng, kind=kind).table() for _ in range(6000)])
        assert np.abs(np.cov(draws.T) - theory).max() < 0.08


def test_x_range_validation(rng):
    with pytest.raises(ContractError):
        sample_perturbation(4, [3.5], 1.0, rng)


def test_schedule():
    assert schedule_strength(16, 0.3) == pytest.approx(16**0.3)
    for bad in (0.25, 0.5, 0.1):
        with pytest.raises(ContractError):
            schedule_strength(16, bad)


def test_perturbed_energy(rng):
    inst = sample_ksat(6, 2, 1.0, rng)
    sigma = np.array([1, 1, -1, 1, -1, 1])
    with pytest.raises(ContractError):
        perturbed_energy(GibbsEnsemble(inst, 1.0), sigma)
    pert = sample_perturbation(6, np.ones(8), 0.0, rng)
    ens = GibbsEnsemble(inst, 1.3, pert)
    assert perturbed_energy(ens, sigma) == ksat_energy(inst, sigma)
    vals = []
    for s in (0.0, 0.7, 1.4):
        pert.s = s
        vals.append(perturbed_energy(ens, sigma))
    assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0])


def test_enumerate_examples(rng):
    inst = sample_ksat(8, 2, 1.0, rng)
    t = enumerate_gibbs(GibbsEnsemble(inst, 0.0))
    assert np.allclose(t.probabilities, 1 / 256)
    assert t.Z == pytest.approx(256)
    # N=2 toy: clause (sigma_1 = +1 and sigma_2 = -1) violated
    toy = KSatInstance(2, 2, 1.0, [[0, 1]], [[1, -1]])
    t = enumerate_gibbs(GibbsEnsemble(toy, 1.0))
    # index 1: sigma = (+1, -1)
    expected = np.array([1, np.exp(-1), 1, 1]) / (3 + np.exp(-1))
    assert np.allclose(t.probabilities, expected)
    assert t.probabilities.sum() == pytest.approx(1.0)
    assert t.free_energy == pytest.approx(np.log(3 + np.exp(-1)) / 2)
    with pytest.raises(CapacityError):
        enumerate_gibbs(GibbsEnsemble(SKInstance(25, np.zeros((25, 25))), 1.0))


def test_free_energy_sandwich(rng):
    N = 10
    s = schedule_strength(N, 0.3)
    for _ in range(10):
        inst = sample_ksat(N, 2, 1.0, rng)
        F0 = enumerate_gibbs(GibbsEnsemble(inst, 1.0)).free_energy
        vals = []
        for _ in range(4):
            pert = sample_perturbation(N, np.ones(8), s, rng)
            plus = enumerate_gibbs(GibbsEnsemble(inst, 1.0, pert)).free_energy
            minus = enumerate_gibbs(GibbsEnsemble(inst, 1.0, pert.negated())).free_energy
            vals.append((plus + minus) / 2)
        gap = np.mean(vals) - F0
        assert 0 <= gap <= 3 * s**2 / (2 * N)


def test_metropolis_uniform_at_beta_zero(rng):
    inst = sample_ksat(6, 2, 1.0, rng)
    res = metropolis_replicas(GibbsEnsemble(inst, 0.0, mode="mcmc"), 4000, 5, rng, burn_in=5)
    m = res.replicas.mean(axis=0)
    assert np.all(np.abs(m) <= 3 / np.sqrt(4000) + 0.01)


def test_metropolis_matches_exact(rng):
    inst = sample_sk(6, rng)
    pert = sample_perturbation(6, np.ones(8), 0.5, rng)
    ens = GibbsEnsemble(inst, 0.8, pert, mode="mcmc")
    res = metropolis_replicas(ens, 6000, 20, rng, burn_in=20)
    p = enumerate_gibbs(GibbsEnsemble(inst, 0.8, pert)).probabilities
    counts = np.bincount(spins_to_index(res.replicas), minlength=64)
    assert pooled_chisquare(counts, p).pvalue > 0.01
    assert 0 < res.acceptance_rate <= 1


def test_metropolis_reproducible():
    inst = sample_ksat(6, 2, 1.0, np.random.default_rng(3))
    ens = GibbsEnsemble(inst, 1.0, mode="mcmc")
    a = metropolis_replicas(ens, 10, 3, np.random.default_rng(9), burn_in=2)
    b = metropolis_replicas(ens, 10, 3, np.random.default_rng(9), burn_in=2)
    assert np.array_equal(a.replicas, b.replicas)


def test_overlap_matrix():
    s = np.array([1, -1, 1, 1])
    assert np.all(overlap_matrix([s, s]).entries == 1)
    m = overlap_matrix([s, -s]).entries
    assert m[0, 1] == -1
    with pytest.raises(ContractError):
        overlap_matrix([s, s[:3]])


def test_overlap_matrix_psd(rng):
    reps = rng.choice([-1, 1], size=(6, 20))
    m = overlap_matrix(reps).entries
    assert np.all(np.linalg.eigvalsh(m) >= -1e-12)
    assert np.all(np.abs(m) <= 1)


def test_concentration_probe_beta_zero(rng):
    rows = concentration_probe({"model": "ksat", "K": 2, "alpha": 1.0}, [6, 8], 0.0, lambda N: 0.0, 20, rng)
    assert all(r.abs_dev == 0 for r in rows)


def test_concentration_probe_se_rate(rng):
    fam = {"model": "ksat", "K": 2, "alpha": 1.0}
    ses = []
    for trials in (100, 400):
        r = concentration_probe(fam, [8], 1.0, lambda N: 0.0, trials, rng)[0]
        ses.append(r.se)
    # CLT: four times the trials halves the s.e.
    assert 0.8 <= (ses[0] / ses[1]) / 2 <= 1.2


def test_growth_exponent_fit(rng):
    fam = {"model": "ksat", "K": 2, "alpha": 1.0}
    rows = concentration_probe(fam, [6, 8, 10], 1.0, lambda N: schedule_strength(N, 0.3), 60, rng)
    slope, se = fit_growth_exponent(rows)
    assert np.isfinite(slope) and se > 0


def test_instance_io_roundtrip(rng):
    ks = sample_ksat(7, 3, 1.0, rng)
    back, meta = instance_from_text(instance_to_text(ks, 1.0, seed=4))
    assert meta["model"] == "ksat" and meta["seed"] == 4
    assert np.array_equal(back.indices, ks.indices) and np.array_equal(back.signs, ks.signs)
    sk = sample_sk(3, rng)
    back, _ = instance_from_text(instance_to_text(sk, 0.5))
    assert np.array_equal(back.couplings, sk.couplings)
    assert replicas_to_csv([np.array([1, -1])]) == "1,-1\n"
