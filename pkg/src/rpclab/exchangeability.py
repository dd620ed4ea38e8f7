"""Spin arrays generated from uniform seeds (Aldous-Hoover and hierarchical
forms), pure-state magnetizations and multi-overlaps, and randomization
tests for hierarchical exchangeability and for independence from weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import ndtri

from .stats import DegenerateStatisticError, dcor_permutation_test
from .streams import stream
from .tree import sample_leaf_maps


class ContractError(ValueError):
    pass


def spins_from_means(m: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent +-1 spins with ``E s = m``: ``s = 2 * 1(x <= (1 + m) / 2) - 1``."""
    x = rng.random(np.shape(m))
    return np.where(x <= (1.0 + m) / 2.0, 1, -1).astype(np.int8)


# --------------------------------------------------------------- Aldous-Hoover


@dataclass(frozen=True)
class AldousHooverSource:
    """Built-in kernels ``sigma(w, u, v)`` with values in [-1, 1].

    ``constant``: ``sigma = value``.
    ``logistic``: ``tanh(k0 + kw (w - 1/2) + ku (u - 1/2) + kv (v - 1/2))``.
    """

    family: str = "logistic"
    value: float = 0.0
    k0: float = 0.0
    kw: float = 1.0
    ku: float = 1.0
    kv: float = 2.0

    def __post_init__(self):
        if self.family not in ("constant", "logistic"):
            raise ContractError(f"unknown kernel family {self.family!r}")
        if self.family == "constant" and abs(self.value) > 1:
            raise ContractError("constant kernel must lie in [-1, 1]")

    def sigma(self, w, u, v):
        if self.family == "constant":
            return np.full(np.broadcast(w, u, v).shape, float(self.value))
        return np.tanh(self.k0 + self.kw * (w - 0.5) + self.ku * (u - 0.5) + self.kv * (v - 0.5))

    def overlap_limit(self, w: float, u1: float, u2: float) -> float:
        """``int_0^1 sigma(w, u1, v) sigma(w, u2, v) dv`` by adaptive quadrature."""
        val, _ = integrate.quad(lambda v: float(self.sigma(w, u1, v) * self.sigma(w, u2, v)), 0.0, 1.0)
        return val


@dataclass(frozen=True)
class AldousHooverDraw:
    spins: np.ndarray
    w: float
    u: np.ndarray
    v: np.ndarray


def generate_spins(source: AldousHooverSource, n_replicas: int, M: int, rng: np.random.Generator) -> AldousHooverDraw:
    """One ``(n_replicas, M)`` array: one ``w``, a ``u`` per replica, a ``v`` per coordinate, an ``x`` per cell."""
    w = rng.random()
    u = rng.random(n_replicas)
    v = rng.random(M)
    m = source.sigma(w, u[:, None], v[None, :])
    return AldousHooverDraw(spins_from_means(m, rng), w, u, v)


# ---------------------------------------------------------- hierarchical noise


@dataclass
class HierarchicalNoise:
    """Uniforms ``omega_beta`` and ``omega_beta^i`` for every vertex of the
    d-truncated depth-r tree (root included) and spin index ``i < M``.

    Values are a deterministic function of ``(seed, depth, vertex, i)``.
    """

    d: int
    r: int
    M: int
    seed: int
    vertex: list = field(init=False, repr=False)
    spin: list = field(init=False, repr=False)

    def __post_init__(self):
        self.vertex, self.spin = [], []
        for p in range(self.r + 1):
            g = stream(self.seed, "hierarchical-noise", p)
            self.vertex.append(g.random(self.d**p))
            self.spin.append(g.random((self.d**p, self.M)))

    @classmethod
    def from_arrays(cls, d, r, vertex, spin):
        obj = cls.__new__(cls)
        obj.d, obj.r, obj.M, obj.seed = d, r, spin[0].shape[-1], -1
        obj.vertex, obj.spin = list(vertex), list(spin)
        return obj

    def ancestors(self, leaf_index: np.ndarray) -> list:
        """Flat indices of the depth-0..r ancestors of flat leaf indices."""
        leaf_index = np.asarray(leaf_index)
        return [leaf_index // self.d ** (self.r - p) for p in range(self.r + 1)]


@dataclass(frozen=True)
class HierarchicalKernel:
    """Built-in maps from the ``2(r+1)`` uniforms on a root-to-leaf path to a spin mean.

    ``z_p = ndtri(omega^i_{beta_p})``, ``c`` has one weight per depth 0..r.

    ``mah2``: ``tanh(b0 + sum_p c_p z_p)`` (per-spin noise only).
    ``mah``: ``tanh(b0 + sum_p c_p (1 + s (omega_{beta_p} - 1/2)) z_p)``.
    ``mah3``: ``tanh(b0 + (1 + s (omega_* - 1/2)) sum_p c_p z_p)``.
    ``constant``: ``b0`` everywhere.
    """

    kind: str = "mah2"
    c: tuple = (0.5, 0.5, 0.5)
    b0: float = 0.2
    s: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mah2", "mah", "mah3", "constant"):
            raise ContractError(f"unknown kernel {self.kind!r}")
        if self.kind == "constant" and abs(self.b0) > 1:
            raise ContractError("constant kernel must lie in [-1, 1]")

    def means(self, vertex_u: list, spin_u: list) -> np.ndarray:
        """Spin means from per-depth uniforms ``vertex_u[p]`` (...,) and ``spin_u[p]`` (..., M)."""
        if self.kind == "constant":
            return np.full(np.shape(spin_u[0]), float(self.b0))
        if len(self.c) != len(spin_u):
            raise ContractError(f"kernel has {len(self.c)} depth weights, path has {len(spin_u)} vertices")
        field_ = np.zeros(np.shape(spin_u[0]))
        for p, (cp, up) in enumerate(zip(self.c, spin_u)):
            z = ndtri(up)
            if self.kind == "mah":
                z = z * (1.0 + self.s * (vertex_u[p][..., None] - 0.5))
            field_ = field_ + cp * z
        if self.kind == "mah3":
            field_ = field_ * (1.0 + self.s * (vertex_u[0][..., None] - 0.5))
        return np.tanh(self.b0 + field_)


def leaf_means(noise: HierarchicalNoise, kernel: HierarchicalKernel, leaf_index) -> np.ndarray:
    """``(..., M)`` spin means ``sigma-bar`` of pure states at flat leaf indices."""
    anc = noise.ancestors(leaf_index)
    vertex_u = [noise.vertex[p][anc[p]] for p in range(noise.r + 1)]
    spin_u = [noise.spin[p][anc[p]] for p in range(noise.r + 1)]
    return kernel.means(vertex_u, spin_u)


def generate_hierarchical_spins(
    noise: HierarchicalNoise,
    kernel: HierarchicalKernel,
    alpha,
    rng: np.random.Generator,
    n_replicas: int = 1,
) -> np.ndarray:
    """``(n_replicas, M)`` spins from pure state ``alpha`` (a label tuple)."""
    alpha = tuple(alpha)
    if len(alpha) != noise.r:
        raise ContractError(f"need a depth-{noise.r} leaf, got depth {len(alpha)}")
    if any(not 1 <= a <= noise.d for a in alpha):
        raise ContractError(f"leaf {alpha} outside [1, {noise.d}]^{noise.r}")
    idx = 0
    for a in alpha:
        idx = idx * noise.d + (a - 1)
    m = leaf_means(noise, kernel, np.array(idx))
    return spins_from_means(np.broadcast_to(m, (n_replicas, noise.M)), rng)


def pure_state_array(noise, kernel, N: int, rng) -> np.ndarray:
    """``(d**r, N, M)`` array ``S_{alpha, N}`` for every leaf."""
    m = leaf_means(noise, kernel, np.arange(noise.d**noise.r))
    return spins_from_means(np.broadcast_to(m[:, None, :], (m.shape[0], N, noise.M)), rng)


def magnetization(S, alpha=None) -> np.ndarray:
    """Replica average over axis -2: ``(1/N) sum_l S(sigma^{alpha l})_i``."""
    arr = np.asarray(S[alpha] if alpha is not None else S, dtype=float)
    if arr.shape[-2] < 1:
        raise ContractError("need N >= 1 replicas")
    return arr.mean(axis=-2)


def multi_overlap(mags) -> float:
    mags = [np.asarray(m, dtype=float) for m in mags]
    if len({m.shape for m in mags}) != 1:
        raise ContractError("magnetizations must have equal lengths")
    return float(np.prod(mags, axis=0).mean())


# ------------------------------------------------------------------------ tests


@dataclass(frozen=True)
class ExchangeabilityResult:
    pvalues: dict
    verdict: bool  # True: not rejected at the Bonferroni-corrected level
    B: int


def statistic_panel(X: np.ndarray) -> dict:
    """Label-sensitive summaries of a dataset ``X`` of shape ``(..., K, L)``.

    ``dispersion``: variance over leaves of the per-leaf means.
    ``extremes``: ``|mean(X_first) - mean(X_last)|``.
    ``siblings``: ``mean(X_0 X_1) - mean(X_0 X_{L-1})`` (first leaf with its
    neighbour in flat order versus with the last leaf).
    """
    means = X.mean(axis=-2)
    nb = min(1, X.shape[-1] - 1)
    return {
        "dispersion": means.var(axis=-1),
        "extremes": np.abs(means[..., 0] - means[..., -1]),
        "siblings": np.abs((X[..., 0] * X[..., nb]).mean(axis=-1) - (X[..., 0] * X[..., -1]).mean(axis=-1)),
    }


def randomized_pvalue(obs: np.ndarray, null: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Exact randomization p-value with uniform tie-breaking.

    ``null`` has the resamples on axis 0. Under the null the result is
    Uniform(0, 1) even when the statistic has atoms.
    """
    greater = np.sum(null > obs, axis=0)
    ties = np.sum(null == obs, axis=0)
    return (greater + rng.random(np.shape(obs)) * (ties + 1)) / (null.shape[0] + 1)


def hierarchical_exchangeability_test(
    X: np.ndarray,
    d: int,
    r: int,
    B: int,
    rng: np.random.Generator,
    statistics=statistic_panel,
    level: float = 0.01,
) -> ExchangeabilityResult:
    """Randomization test of ``(X_pi(alpha)) =d (X_alpha)`` for i.i.d. draws.

    ``X``: ``(K, d**r)`` leaf-indexed scalar summaries of ``K`` draws. Each
    resample applies an independent uniform group element to every draw.
    """
    X = np.asarray(X, dtype=float)
    if d == 1:
        names = statistics(X[None]).keys()
        return ExchangeabilityResult({k: 1.0 for k in names}, True, B)
    K, L = X.shape
    if L != d**r:
        raise ContractError(f"expected {d**r} leaves, got {L}")
    maps = sample_leaf_maps(d, r, B * K, rng).reshape(B, K, L)
    Xp = np.take_along_axis(np.broadcast_to(X, (B, K, L)), maps, axis=2)
    obs, null = statistics(X), statistics(Xp)
    pvals = {k: float(randomized_pvalue(obs[k], null[k], rng)) for k in obs}
    verdict = all(p > level / len(pvals) for p in pvals.values())
    return ExchangeabilityResult(pvals, verdict, B)


@dataclass(frozen=True)
class IndependenceResult:
    pvalues: dict
    verdict: bool
    B: int


def independence_test(
    pairs: dict,
    rng: np.random.Generator,
    B: int = 499,
    level: float = 0.01,
) -> IndependenceResult:
    """Distance-correlation permutation tests over a panel.

    ``pairs`` maps a panel name to ``(x, y)`` with ``K`` paired rows each.
    Raises :class:`DegenerateStatisticError` for constant summaries.
    """
    pvals = {}
    for name, (x, y) in pairs.items():
        pvals[name] = dcor_permutation_test(x, y, rng, B).pvalue
    verdict = all(p > level / len(pvals) for p in pvals.values())
    return IndependenceResult(pvals, verdict, B)


# -------------------------------------------------------------------- pipelines


def random_noise(d: int, r: int, M: int, rng: np.random.Generator, size: int | None = None) -> HierarchicalNoise:
    """Noise drawn from ``rng``; with ``size`` every array gets a leading batch axis."""
    lead = () if size is None else (size,)
    vertex = [rng.random(lead + (d**p,)) for p in range(r + 1)]
    spin = [rng.random(lead + (d**p, M)) for p in range(r + 1)]
    return HierarchicalNoise.from_arrays(d, r, vertex, spin)


def batched_leaf_means(noise: HierarchicalNoise, kernel: HierarchicalKernel) -> np.ndarray:
    """``(size, d**r, M)`` leaf means for noise with a leading batch axis."""
    anc = noise.ancestors(np.arange(noise.d**noise.r))
    vertex_u = [noise.vertex[p][:, anc[p]] for p in range(noise.r + 1)]
    spin_u = [noise.spin[p][:, anc[p]] for p in range(noise.r + 1)]
    return kernel.means(vertex_u, spin_u)


def hierarchical_draws(d, r, K, N, M, kernel, rng) -> np.ndarray:
    """``(K, d**r)`` leaf-mean spins of ``K`` independent hierarchical arrays ``S_{alpha, N}``."""
    noise = random_noise(d, r, M, rng, size=K)
    m = batched_leaf_means(noise, kernel)
    S = spins_from_means(np.broadcast_to(m[:, :, None, :], (K, d**r, N, M)), rng)
    return S.mean(axis=(2, 3))


def coordinate_plant(d, r, K, rng=None) -> np.ndarray:
    """``(K, d**r)`` non-exchangeable draws ``X_alpha = alpha_1``."""
    first = np.arange(d**r) // d ** (r - 1) + 1
    return np.broadcast_to(first.astype(float), (K, d**r)).copy()


@dataclass(frozen=True)
class PureStateSample:
    spins: np.ndarray  # (K, d**r, N, M)
    leaf_weights: np.ndarray  # (K, d**r) designated pure-state weights
    top_weights: np.ndarray  # (K, 3) largest depth-1 cluster weights
    restarts: int
    draws: np.ndarray  # (K,) replicas drawn until every designated leaf had N


def designated_leaves(d_build: int, d: int, r: int) -> np.ndarray:
    """Flat indices (in the d_build tree) of the relabelled leaves ``[d]^r``."""
    digits = np.indices((d,) * r).reshape(r, -1).T
    return (digits * d_build ** np.arange(r - 1, -1, -1)).sum(axis=1)


def sample_pure_states(params, d, N, M, kernel, K, rng, chunk=256, cap=100_000) -> PureStateSample:
    """Spin arrays ``S^{d,N}`` of the first ``N`` replicas in each designated pure state.

    Replicas are drawn from every cascade in chunks until each of the
    relabelled leaves ``[d]^r`` holds ``N`` of them; a cascade needing more
    than ``cap`` replicas is discarded and rebuilt (counted in ``restarts``).
    Spins are then drawn from the hierarchical kernel on the designated
    subtree with fresh noise per cascade.
    """
    from .cascade import build_cascades, sample_rows

    r = params.r
    target = designated_leaves(params.d, d, r)
    weights = np.empty((K, d**r))
    top = np.empty((K, 3))
    draws = np.empty(K, dtype=np.int64)
    restarts = 0
    done = 0
    while done < K:
        need = K - done
        batch = build_cascades(params, need, rng)
        masses = batch.leaf_masses()
        counts = np.zeros((need, d**r), dtype=np.int64)
        used = np.zeros(need, dtype=np.int64)
        active = np.ones(need, dtype=bool)
        while active.any() and used.max() < cap:
            rows = np.flatnonzero(active)
            idx = sample_rows(masses[rows], chunk, rng)
            hits = idx[:, :, None] == target[None, None, :]
            # cumulative hits per designated leaf, to find when the N-th lands
            cum = np.cumsum(hits, axis=1) + counts[rows][:, None, :]
            ok = np.all(cum >= N, axis=2)
            first = np.where(ok.any(axis=1), ok.argmax(axis=1) + 1, chunk)
            used[rows] += first
            counts[rows] = cum[:, -1, :]
            active[rows[ok.any(axis=1)]] = False
        good = ~active
        restarts += int(active.sum())
        n_good = int(good.sum())
        weights[done:done + n_good] = batch.V[r][good][:, target]
        top[done:done + n_good] = batch.V[1][good][:, :3] if params.d >= 3 else np.pad(batch.V[1][good], ((0, 0), (0, 3 - params.d)))
        draws[done:done + n_good] = used[good]
        done += n_good
    noise = random_noise(d, r, M, rng, size=K)
    m = batched_leaf_means(noise, kernel)
    S = spins_from_means(np.broadcast_to(m[:, :, None, :], (K, d**r, N, M)), rng)
    return PureStateSample(S, weights, top, restarts, draws)


def independence_panel(sample: PureStateSample) -> dict:
    """Bounded summaries paired for the distance-correlation panel."""
    S = sample.spins.astype(float)
    leaf_mean = S.mean(axis=(2, 3))
    N = S.shape[2]
    gram = np.einsum("kanm,kabm->kanb", S, S) / S.shape[3]
    iu = np.triu_indices(N, 1)
    within = gram[:, :, iu[0], iu[1]].mean(axis=2)
    return {
        "leaf_means~weights": (leaf_mean, sample.leaf_weights),
        "overlaps~weights": (within, sample.leaf_weights),
        "leaf_means~top3": (leaf_mean, sample.top_weights),
    }


def planted_panel(sample: PureStateSample, rng: np.random.Generator, noise_sd: float = 0.1) -> dict:
    """Control in which the spin summary is the top designated weight plus noise."""
    x = sample.leaf_weights[:, :1] + noise_sd * rng.standard_normal((len(sample.leaf_weights), 1))
    return {"planted~weights": (x, sample.leaf_weights)}

