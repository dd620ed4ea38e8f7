"""Sources of replica groups: random measures together with i.i.d. replicas
drawn from them, their overlaps and a window of their spins.

A group is one realization of the measure plus ``n`` replicas. Several
groups may share a measure; ``cluster`` records which, so that standard
errors can be computed across independent measures.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cascade import CascadeParams, build_cascades, leaf_wedges, sample_rows
from .exchangeability import HierarchicalKernel, batched_leaf_means, random_noise, spins_from_means
from .tree import leaf_digits


@dataclass
class ReplicaGroups:
    overlaps: np.ndarray  # (G, n, n), unit diagonal
    spins: np.ndarray  # (G, n, M) int8
    cluster: np.ndarray  # (G,)
    residual: float = 0.0
    # optional full support of each group's measure
    masses: np.ndarray | None = None  # (G, L)
    point_overlaps: np.ndarray | None = None  # (G, L, n)

    @property
    def size(self) -> int:
        return self.overlaps.shape[0]

    @property
    def n(self) -> int:
        return self.overlaps.shape[1]


@dataclass(frozen=True)
class CascadeSource:
    """Replicas of a truncated cascade with hierarchical spins attached to its leaves."""

    params: CascadeParams
    kernel: HierarchicalKernel
    M: int = 4
    groups_per_measure: int = 500

    @property
    def zeta(self) -> np.ndarray:
        """Law of the interval index of one overlap, ``zeta_p - zeta_(p-1)``."""
        return self.params.wedge_probabilities

    def draw(self, n_measures: int, n: int, rng: np.random.Generator, support: bool = False) -> ReplicaGroups:
        p, k = self.params, self.groups_per_measure
        batch = build_cascades(p, n_measures, rng)
        masses = batch.leaf_masses()
        leaves = sample_rows(masses, k * n, rng).reshape(n_measures, k, n)
        q = np.asarray(p.q)
        ov = q[leaf_wedges(p, leaves)]
        ov[..., np.arange(n), np.arange(n)] = 1.0
        noise = random_noise(p.d, p.r, self.M, rng, size=n_measures)
        means = batched_leaf_means(noise, self.kernel)  # (B, L, M)
        m = np.take_along_axis(means[:, None, :, :], leaves[..., None], axis=2)
        spins = spins_from_means(m, rng)
        G = n_measures * k
        out = ReplicaGroups(
            ov.reshape(G, n, n),
            spins.reshape(G, n, self.M),
            np.repeat(np.arange(n_measures), k),
            float(batch.residual_mass.mean()),
        )
        if support:
            digits = leaf_digits(p.d, p.r)
            eq = digits[None, None, :, None, :] == digits[leaves][:, :, None, :, :]
            wed = np.cumprod(eq, axis=-1).sum(axis=-1)  # (B, k, L, n)
            out.masses = np.repeat(masses, k, axis=0)
            out.point_overlaps = q[wed].reshape(G, -1, n)
        return out


@dataclass(frozen=True)
class TwoAtomSource:
    """Fixed non-random measure: two atoms with weights ``(w, 1 - w)``,
    self-overlap 1, cross-overlap ``q_cross`` and deterministic spins
    (``+1`` on the first atom, alternating signs on the second)."""

    w: float = 0.5
    q_cross: float = 0.0
    M: int = 4

    @property
    def atom_spins(self) -> np.ndarray:
        second = np.where(np.arange(self.M) % 2 == 0, -1, 1)
        return np.stack([np.ones(self.M), second]).astype(np.int8)

    @property
    def zeta(self) -> np.ndarray:
        same = self.w**2 + (1 - self.w) ** 2
        return np.array([1 - same, same])

    def draw(self, n_measures: int, n: int, rng: np.random.Generator, support: bool = False) -> ReplicaGroups:
        atoms = (rng.random((n_measures, n)) >= self.w).astype(np.int64)
        same = atoms[:, :, None] == atoms[:, None, :]
        ov = np.where(same, 1.0, self.q_cross)
        out = ReplicaGroups(ov, self.atom_spins[atoms], np.arange(n_measures))
        if support:
            out.masses = np.broadcast_to(np.array([self.w, 1 - self.w]), (n_measures, 2)).copy()
            out.point_overlaps = np.where(np.arange(2)[None, :, None] == atoms[:, None, :], 1.0, self.q_cross)
        return out


@dataclass(frozen=True)
class SingleAtomSource:
    """All replicas coincide: every overlap equals ``q_star``, spins fixed."""

    q_star: float = 1.0
    M: int = 4

    @property
    def zeta(self) -> np.ndarray:
        return np.array([1.0])

    def draw(self, n_measures: int, n: int, rng: np.random.Generator, support: bool = False) -> ReplicaGroups:
        ov = np.full((n_measures, n, n), self.q_star)
        ov[:, np.arange(n), np.arange(n)] = 1.0
        spins = np.ones((n_measures, n, self.M), dtype=np.int8)
        out = ReplicaGroups(ov, spins, np.arange(n_measures))
        if support:
            out.masses = np.ones((n_measures, 1))
            out.point_overlaps = np.full((n_measures, 1, n), self.q_star)
        return out
