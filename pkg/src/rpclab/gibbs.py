"""Finite-N Sherrington-Kirkpatrick and random K-sat Hamiltonians, the mixed
p-spin Gaussian perturbation, exact Gibbs enumeration and Metropolis sampling.

Configurations of ``N`` spins are addressed by an integer ``c`` in
``[0, 2**N)`` with ``sigma_i = 2 * bit_i(c) - 1``.

The perturbation ``g(sigma) = sum_p 2**-p x_p g_p(sigma)`` with
``g_p(sigma) = N**(-p/2) sum g_{i_1..i_p} sigma_{i_1} .. sigma_{i_p}`` is a
centered Gaussian process on the cube with covariance
``sum_p 4**-p x_p**2 R**p``. Two realizations of it are provided:

* ``tensor``: the defining coupling arrays, usable when ``N**p`` is small;
* ``walsh``: one independent Gaussian per subset ``A`` of sites, with the
  variance that reproduces the same covariance exactly. Evaluating all
  ``2**N`` configurations is one fast Walsh-Hadamard transform, so exact
  enumeration up to ``N = 24`` stays cheap whatever ``p_max`` is.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from math import comb

import numpy as np

MAX_EXACT_N = 24
P_MAX = 8


class ContractError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class InstanceCorruptionError(ValueError):
    pass


# ----------------------------------------------------------------- configurations


@dataclass(frozen=True)
class SpinConfiguration:
    spins: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.spins)
        if s.ndim != 1 or not np.all(np.abs(s) == 1):
            raise ValueError("spins must be a vector of +-1")
        object.__setattr__(self, "spins", s.astype(np.int8))

    @property
    def N(self) -> int:
        return len(self.spins)


def index_to_spins(idx, N: int) -> np.ndarray:
    """``(..., N)`` int8 spins of configuration indices."""
    idx = np.asarray(idx, dtype=np.int64)
    bits = (idx[..., None] >> np.arange(N)) & 1
    return (2 * bits - 1).astype(np.int8)


def spins_to_index(spins) -> np.ndarray:
    s = np.asarray(spins)
    bits = (s > 0).astype(np.int64)
    return (bits << np.arange(s.shape[-1])).sum(axis=-1)


def _as_spin_array(sigma, N):
    s = sigma.spins if isinstance(sigma, SpinConfiguration) else np.asarray(sigma)
    if s.shape[-1] != N:
        raise ContractError(f"configuration length {s.shape[-1]} does not match N={N}")
    return s


# ---------------------------------------------------------------------- instances


@dataclass(frozen=True)
class SKInstance:
    N: int
    couplings: np.ndarray

    def __post_init__(self):
        if np.shape(self.couplings) != (self.N, self.N):
            raise ContractError(f"couplings must be {self.N}x{self.N}")

    model = "sk"


@dataclass(frozen=True)
class KSatInstance:
    """``indices`` are 0-based site indices ``(M, K)``; ``signs`` are +-1."""

    N: int
    K: int
    alpha: float
    indices: np.ndarray
    signs: np.ndarray

    model = "ksat"

    def __post_init__(self):
        idx, sg = np.asarray(self.indices), np.asarray(self.signs)
        if idx.ndim != 2 or idx.shape[1] != self.K or sg.shape != idx.shape:
            raise ContractError(f"clause arrays must have shape (M, {self.K})")
        object.__setattr__(self, "indices", idx.astype(np.int64))
        object.__setattr__(self, "signs", sg.astype(np.int8))

    @property
    def clause_count(self) -> int:
        return self.indices.shape[0]

    def validate(self):
        if np.any(self.indices < 0) or np.any(self.indices >= self.N):
            raise InstanceCorruptionError("clause index out of range")
        if not np.all(np.abs(self.signs) == 1):
            raise InstanceCorruptionError("clause signs must be +-1")


def sample_sk(N: int, rng: np.random.Generator) -> SKInstance:
    return SKInstance(N, rng.standard_normal((N, N)))


def sample_ksat(N: int, K: int, alpha: float, rng: np.random.Generator) -> KSatInstance:
    M = int(rng.poisson(alpha * N))
    return KSatInstance(N, K, alpha, rng.integers(0, N, size=(M, K)), rng.choice(np.array([-1, 1]), size=(M, K)))


def sk_energy(inst: SKInstance, sigma) -> np.ndarray:
    s = _as_spin_array(sigma, inst.N).astype(float)
    return np.einsum("...i,ij,...j->...", s, inst.couplings, s) / np.sqrt(inst.N)


def ksat_energy(inst: KSatInstance, sigma) -> np.ndarray:
    """Number of violated clauses: a clause is violated iff every literal has ``sigma_i = eps``."""
    inst.validate()
    s = _as_spin_array(sigma, inst.N)
    if inst.clause_count == 0:
        return np.zeros(s.shape[:-1])
    vals = s[..., inst.indices]  # (..., M, K)
    return np.all(vals == inst.signs, axis=-1).sum(axis=-1).astype(float)


def energy(inst, sigma) -> np.ndarray:
    return sk_energy(inst, sigma) if isinstance(inst, SKInstance) else ksat_energy(inst, sigma)


def all_energies(inst, chunk: int = 1 << 16) -> np.ndarray:
    """Energies of all ``2**N`` configurations, indexed by configuration."""
    N = inst.N
    if N > MAX_EXACT_N:
        raise CapacityError(f"exact enumeration supports N <= {MAX_EXACT_N}, got {N}")
    n_conf = 1 << N
    if isinstance(inst, KSatInstance):
        inst.validate()
        c = np.arange(n_conf, dtype=np.int64)
        out = np.zeros(n_conf)
        target = (inst.signs > 0).astype(np.int64)
        for idx, tgt in zip(inst.indices, target):
            viol = np.ones(n_conf, dtype=bool)
            for i, t in zip(idx, tgt):
                viol &= ((c >> i) & 1) == t
            out += viol
        return out
    out = np.empty(n_conf)
    for start in range(0, n_conf, chunk):
        stop = min(start + chunk, n_conf)
        out[start:stop] = sk_energy(inst, index_to_spins(np.arange(start, stop), N))
    return out


# ------------------------------------------------------------------- perturbation


def schedule_strength(N: int, gamma: float) -> float:
    """``s_N = N**gamma``; only ``1/4 < gamma < 1/2`` is admissible."""
    if not 0.25 < gamma < 0.5:
        raise ContractError(f"s_N = N**gamma needs 1/4 < gamma < 1/2, got {gamma}")
    return float(N) ** gamma


def truncation_bias_bound(p_max: int) -> float:
    """``sum_{p > p_max} 2**-p * 3``: the sup-norm scale of the dropped terms."""
    return 3.0 * 2.0 ** (-p_max)


def word_counts(N: int, p: int) -> list:
    """``T[k]``: number of length-p words over ``[N]`` whose odd-multiplicity set is a given set of size ``k``."""
    out = []
    for k in range(N + 1):
        total = 0
        # coefficients of y**m in (1 - y)**k (1 + y)**(N - k)
        for m in range(N + 1):
            a_m = sum((-1) ** j * comb(k, j) * comb(N - k, m - j) for j in range(max(0, m - (N - k)), min(k, m) + 1))
            total += a_m * (N - 2 * m) ** p
        out.append(total // (1 << N))
    return out


def walsh_variances(N: int, x) -> np.ndarray:
    """Variance of the Walsh coefficient of a size-k subset, ``k = 0..N``."""
    var = np.zeros(N + 1)
    for p, xp in enumerate(x, start=1):
        if xp == 0:
            continue
        T = word_counts(N, p)
        var += 4.0**-p * xp**2 * np.array([t / N**p for t in T], dtype=float)
    return var


def popcount(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.int64)
    out = np.zeros(c.shape, dtype=np.int64)
    while np.any(c):
        out += c & 1
        c = c >> 1
    return out


def fwht(h: np.ndarray) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform ``F(c) = sum_A h_A (-1)**|A & c|``."""
    a = np.array(h, dtype=float)
    n = a.shape[0]
    step = 1
    while step < n:
        a = a.reshape(-1, 2, step)
        a = np.stack([a[:, 0] + a[:, 1], a[:, 0] - a[:, 1]], axis=1)
        step *= 2
    return a.reshape(n)


@dataclass
class PerturbationParams:
    """Mixed p-spin perturbation ``g`` truncated at ``len(x)`` and its strength ``s``.

    ``kind`` is ``"walsh"`` (``coefficients`` over all subsets) or
    ``"tensor"`` (``gaussians[p - 1]`` of shape ``(N,) * p``).
    """

    N: int
    x: np.ndarray
    s: float
    kind: str
    coefficients: np.ndarray | None = None
    gaussians: list | None = None
    _table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1 or len(x) < 1:
            raise ContractError("need p_max >= 1 coefficients x_p")
        if np.any(x < 0) or np.any(x > 3):
            raise ContractError("x_p must lie in [0, 3]")
        if self.s < 0:
            raise ContractError("strength s must be >= 0")
        self.x = x

    @property
    def p_max(self) -> int:
        return len(self.x)

    @property
    def variance(self) -> float:
        """``E g(sigma)**2 = sum_p 4**-p x_p**2`` for every sigma."""
        return float(np.sum(4.0 ** -np.arange(1, self.p_max + 1) * self.x**2))

    def negated(self) -> "PerturbationParams":
        """The antithetic draw ``-g`` (same law, same strength)."""
        if self.kind == "walsh":
            return PerturbationParams(self.N, self.x, self.s, "walsh", coefficients=-self.coefficients)
        return PerturbationParams(self.N, self.x, self.s, "tensor", gaussians=[-g for g in self.gaussians])

    def table(self) -> np.ndarray:
        """``g`` at every configuration index (cached)."""
        if self._table is None:
            if self.N > MAX_EXACT_N:
                raise CapacityError(f"perturbation table needs N <= {MAX_EXACT_N}")
            if self.kind == "walsh":
                signs = 1.0 - 2.0 * (popcount(np.arange(1 << self.N)) & 1)
                self._table = fwht(self.coefficients * signs)
            else:
                self._table = self.evaluate(index_to_spins(np.arange(1 << self.N), self.N))
        return self._table

    def component(self, p: int, sigma) -> np.ndarray:
        """``g_p(sigma)`` (tensor representation only)."""
        if self.kind != "tensor":
            raise ContractError("individual g_p are only available for the tensor representation")
        s = _as_spin_array(sigma, self.N).astype(float)
        return _tensor_component(self.gaussians[p - 1], s, self.N)

    def evaluate(self, sigma) -> np.ndarray:
        s = _as_spin_array(sigma, self.N)
        if self.kind == "walsh":
            return self.table()[spins_to_index(s)]
        out = np.zeros(s.shape[:-1])
        for p in range(1, self.p_max + 1):
            if self.x[p - 1] != 0:
                out = out + 2.0**-p * self.x[p - 1] * _tensor_component(self.gaussians[p - 1], s.astype(float), self.N)
        return out


def _tensor_component(g, s, N):
    p = g.ndim
    lead = s.shape[:-1]
    flat = s.reshape(-1, N)
    val = np.broadcast_to(g, (flat.shape[0],) + g.shape)
    for _ in range(p):
        val = np.einsum("b...i,bi->b...", val, flat)
    return val.reshape(lead) / N ** (p / 2)


def sample_perturbation(
    N: int,
    x,
    s: float,
    rng: np.random.Generator,
    kind: str = "walsh",
) -> PerturbationParams:
    x = np.asarray(x, dtype=float)
    if kind == "walsh":
        if N > MAX_EXACT_N:
            raise CapacityError(f"walsh representation needs N <= {MAX_EXACT_N}")
        sd = np.sqrt(walsh_variances(N, x))
        return PerturbationParams(N, x, s, "walsh", coefficients=rng.standard_normal(1 << N) * sd[popcount(np.arange(1 << N))])
    if kind == "tensor":
        if N ** len(x) > 5_000_000:
            raise CapacityError("tensor representation too large; use kind='walsh'")
        return PerturbationParams(N, x, s, "tensor", gaussians=[rng.standard_normal((N,) * p) for p in range(1, len(x) + 1)])
    raise ContractError(f"unknown perturbation representation {kind!r}")


def perturbation_value(pert: PerturbationParams, sigma) -> np.ndarray:
    return pert.evaluate(sigma)


# ------------------------------------------------------------------------ ensembles


@dataclass
class GibbsEnsemble:
    instance: object
    beta: float
    perturbation: PerturbationParams | None = None
    mode: str = "exact"

    def __post_init__(self):
        if self.beta < 0:
            raise ContractError("beta must be >= 0")
        if self.mode not in ("exact", "mcmc"):
            raise ContractError("mode must be 'exact' or 'mcmc'")
        if self.perturbation is not None and self.perturbation.N != self.instance.N:
            raise ContractError("perturbation and instance disagree on N")

    @property
    def N(self) -> int:
        return self.instance.N

    def log_weight(self, sigma) -> np.ndarray:
        """``-beta H(sigma) + s g(sigma)`` (unnormalized)."""
        lw = -self.beta * energy(self.instance, sigma)
        if self.perturbation is not None and self.perturbation.s != 0:
            lw = lw + self.perturbation.s * self.perturbation.evaluate(sigma)
        return lw

    def log_weight_table(self) -> np.ndarray:
        lw = -self.beta * all_energies(self.instance)
        if self.perturbation is not None and self.perturbation.s != 0:
            lw = lw + self.perturbation.s * self.perturbation.table()
        return lw


def perturbed_energy(ens: GibbsEnsemble, sigma) -> np.ndarray:
    """``H(sigma) - (s / beta) g(sigma)``."""
    if ens.perturbation is None:
        raise ContractError("ensemble has no perturbation")
    h = energy(ens.instance, sigma)
    if ens.perturbation.s == 0:
        return h
    if ens.beta == 0:
        raise ContractError("perturbed energy is undefined at beta = 0 with s > 0")
    return h - ens.perturbation.s / ens.beta * ens.perturbation.evaluate(sigma)


@dataclass(frozen=True)
class GibbsTable:
    probabilities: np.ndarray
    log_Z: float
    N: int

    @property
    def Z(self) -> float:
        return float(np.exp(self.log_Z))

    @property
    def free_energy(self) -> float:
        return self.log_Z / self.N


def enumerate_gibbs(ens: GibbsEnsemble) -> GibbsTable:
    if ens.mode != "exact":
        raise ContractError("exact enumeration needs mode='exact'")
    if ens.N > MAX_EXACT_N:
        raise CapacityError(f"exact enumeration supports N <= {MAX_EXACT_N}, got {ens.N}")
    lw = ens.log_weight_table()
    m = lw.max()
    w = np.exp(lw - m)
    total = w.sum()
    return GibbsTable(w / total, float(m + np.log(total)), ens.N)


def free_energy(ens: GibbsEnsemble) -> float:
    return enumerate_gibbs(ens).free_energy


# ----------------------------------------------------------------------- Metropolis


@dataclass(frozen=True)
class ChainResult:
    replicas: np.ndarray  # (n_replicas, N) int8
    acceptance_rate: float
    energy_autocorrelation: float

    def configurations(self) -> list:
        return [SpinConfiguration(s) for s in self.replicas]


def metropolis_replicas(
    ens: GibbsEnsemble,
    n_replicas: int,
    sweeps: int,
    rng: np.random.Generator,
    burn_in: int = 100,
) -> ChainResult:
    """Final states of ``n_replicas`` independent single-site Metropolis chains.

    Each chain starts uniformly at random and runs ``burn_in + sweeps``
    sweeps of ``N`` sequential flip proposals. The lag-1 autocorrelation of
    the per-sweep log-weight (pooled over chains) is reported as a mixing
    diagnostic.
    """
    N = ens.N
    state = rng.choice(np.array([-1, 1], dtype=np.int8), size=(n_replicas, N))
    table = None
    if ens.perturbation is not None and ens.perturbation.kind == "walsh":
        table = ens.perturbation.table()

    def logw(s):
        lw = -ens.beta * energy(ens.instance, s)
        if ens.perturbation is not None and ens.perturbation.s != 0:
            g = table[spins_to_index(s)] if table is not None else ens.perturbation.evaluate(s)
            lw = lw + ens.perturbation.s * g
        return lw

    current = logw(state)
    accepted = 0
    trace = []
    total = burn_in + sweeps
    for _ in range(total):
        for i in range(N):
            prop = state.copy()
            prop[:, i] = -prop[:, i]
            new = logw(prop)
            acc = np.log(rng.random(n_replicas)) < new - current
            state[acc] = prop[acc]
            current = np.where(acc, new, current)
            accepted += int(acc.sum())
        trace.append(current.copy())
    tr = np.array(trace)
    centered = tr - tr.mean(axis=0)
    denom = (centered**2).sum()
    ac = float((centered[1:] * centered[:-1]).sum() / denom) if denom > 0 else 0.0
    return ChainResult(state, accepted / (total * N * n_replicas), ac)


def overlap_matrix(replicas):
    from .rsb import OverlapMatrix

    rows = [np.asarray(r.spins if isinstance(r, SpinConfiguration) else r, dtype=float) for r in replicas]
    if len({len(r) for r in rows}) != 1:
        raise ContractError("replicas must have equal lengths")
    s = np.stack(rows)
    m = s @ s.T / s.shape[1]
    return OverlapMatrix(np.clip(m, -1.0, 1.0))


# ---------------------------------------------------------- concentration probe


@dataclass(frozen=True)
class ProbeRow:
    N: int
    s: float
    mean_phi: float
    abs_dev: float
    se: float
    ratio: float
    trials: int


def sample_log_partition(model_family: dict, N: int, beta: float, s: float, trials: int, rng: np.random.Generator, x=None) -> np.ndarray:
    """``phi = log Z`` of the perturbed model for ``trials`` fresh disorder and perturbation draws."""
    x = np.ones(P_MAX) if x is None else np.asarray(x, dtype=float)
    alpha = float(model_family.get("alpha", 1.0))
    phis = np.empty(trials)
    for t in range(trials):
        if model_family["model"] == "ksat":
            inst = sample_ksat(N, int(model_family["K"]), alpha, rng)
        elif model_family["model"] == "sk":
            inst = sample_sk(N, rng)
        else:
            raise ContractError(f"unknown model {model_family['model']!r}")
        pert = sample_perturbation(N, x, s, rng) if s > 0 else None
        phis[t] = enumerate_gibbs(GibbsEnsemble(inst, beta, pert)).log_Z
    return phis


def probe_row(N: int, s: float, phis: np.ndarray, alpha: float = 1.0) -> ProbeRow:
    """Summary of one ``N``. The s.e. treats ``|phi_t - mean(phi)|`` as an
    i.i.d. sample, which is accurate up to O(1/trials)."""
    trials = len(phis)
    dev = np.zeros(trials) if np.all(phis == phis[0]) else np.abs(phis - phis.mean())
    se = float(dev.std(ddof=1) / np.sqrt(trials)) if trials > 1 else float("nan")
    return ProbeRow(N, s, float(phis.mean()), float(dev.mean()), se, float(dev.mean() / (s + np.sqrt(alpha * N))), trials)


def concentration_probe(
    model_family: dict,
    N_list,
    beta: float,
    s_of_N,
    trials: int,
    rng: np.random.Generator,
    x=None,
) -> list:
    """Monte Carlo estimate of ``E|phi - E phi|`` for ``phi = log Z`` of the
    perturbed model over fresh disorder and perturbation.

    ``model_family``: ``{"model": "ksat", "K": .., "alpha": ..}`` or
    ``{"model": "sk"}``.
    """
    alpha = float(model_family.get("alpha", 1.0))
    rows = []
    for N in N_list:
        s = float(s_of_N(N))
        rows.append(probe_row(N, s, sample_log_partition(model_family, N, beta, s, trials, rng, x), alpha))
    return rows


def fit_growth_exponent(rows) -> tuple[float, float]:
    """Least-squares slope of ``log abs_dev`` on ``log N`` and its s.e.

    Point uncertainties enter through the delta method ``se / abs_dev``.
    """
    logN = np.log([r.N for r in rows])
    y = np.log([r.abs_dev for r in rows])
    sig = np.array([r.se / r.abs_dev for r in rows])
    w = 1.0 / sig**2
    X = np.stack([np.ones_like(logN), logN], axis=1)
    cov = np.linalg.inv(X.T @ (X * w[:, None]))
    beta = cov @ (X.T @ (w * y))
    return float(beta[1]), float(np.sqrt(cov[1, 1]))


# ----------------------------------------------------------------------------- IO


def instance_to_text(inst, beta: float, seed=None) -> str:
    """First line: JSON header; remaining lines: CSV body."""
    header = {"schema_version": 1, "model": inst.model, "N": inst.N, "beta": beta, "seed": seed}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if isinstance(inst, KSatInstance):
        header.update(K=inst.K, alpha=inst.alpha)
        writer.writerow(["clause"] + [f"i{j + 1}" for j in range(inst.K)] + [f"eps{j + 1}" for j in range(inst.K)])
        for k, (idx, sg) in enumerate(zip(inst.indices, inst.signs), start=1):
            writer.writerow([k] + [int(i) + 1 for i in idx] + [int(e) for e in sg])
    else:
        writer.writerow(["i", "j", "g"])
        for i in range(inst.N):
            for j in range(inst.N):
                writer.writerow([i + 1, j + 1, repr(float(inst.couplings[i, j]))])
    return json.dumps(header, sort_keys=True) + "\n" + buf.getvalue()


def instance_from_text(text: str):
    head, body = text.split("\n", 1)
    meta = json.loads(head)
    rows = list(csv.reader(io.StringIO(body)))[1:]
    N = int(meta["N"])
    if meta["model"] == "ksat":
        K = int(meta["K"])
        arr = np.array([[int(v) for v in row[1:]] for row in rows], dtype=np.int64).reshape(-1, 2 * K)
        inst = KSatInstance(N, K, float(meta["alpha"]), arr[:, :K] - 1, arr[:, K:])
        inst.validate()
        return inst, meta
    g = np.zeros((N, N))
    for i, j, v in rows:
        g[int(i) - 1, int(j) - 1] = float(v)
    return SKInstance(N, g), meta


def replicas_to_csv(replicas) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for r in replicas:
        writer.writerow([int(v) for v in (r.spins if isinstance(r, SpinConfiguration) else r)])
    return buf.getvalue()
