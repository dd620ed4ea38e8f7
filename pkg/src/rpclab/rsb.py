"""Discretized overlap structure: interval grids, ultrametricity checks,
sample configurations (tree + replica-to-leaf assignment) and the Gibbs
weights of the clusters they induce.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tree import VertexLabel, format_label, parse_label


class SupportError(ValueError):
    """An overlap value falls outside every interval of the grid."""


class InconsistencyError(ValueError):
    """The interval pattern of an overlap matrix is not ultrametric."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class UltrametricityViolation(ValueError):
    pass


@dataclass(frozen=True)
class RSBDiscretization:
    """Ordered disjoint intervals ``I_0 .. I_r``.

    ``I_p = [left[p], right[p])`` unless ``closed[p]``, in which case the
    right endpoint is included (so ``I_p = {q_p}`` is expressible).
    """

    left: tuple
    right: tuple
    closed: tuple
    zeta_masses: tuple | None = None

    def __post_init__(self):
        n = len(self.left)
        if not (len(self.right) == len(self.closed) == n) or n < 2:
            raise ValueError("need r+1 >= 2 intervals with matching endpoint lists")
        if self.left[0] < 0:
            raise ValueError("q_0 must be nonnegative")
        for p in range(n):
            if self.right[p] < self.left[p] or (self.right[p] == self.left[p] and not self.closed[p]):
                raise ValueError(f"interval {p} is empty")
            if p + 1 < n:
                if self.left[p + 1] <= self.left[p]:
                    raise ValueError("left endpoints must increase")
                if self.right[p] > self.left[p + 1] or (self.closed[p] and self.right[p] == self.left[p + 1]):
                    raise ValueError(f"intervals {p} and {p + 1} overlap")
        if self.zeta_masses is not None:
            zm = np.asarray(self.zeta_masses, dtype=float)
            if len(zm) != n or np.any(zm <= 0) or abs(zm.sum() - 1) > 1e-9:
                raise ValueError("interval masses must be positive and sum to 1")

    @classmethod
    def from_grid(cls, q, top: float = 1.0, zeta_masses=None) -> "RSBDiscretization":
        """Contiguous grid ``I_p = [q_p, q_{p+1})`` with ``I_r = [q_r, top]`` closed."""
        q = tuple(float(v) for v in q)
        right = q[1:] + (max(float(top), q[-1]),)
        closed = (False,) * (len(q) - 1) + (True,)
        return cls(q, right, closed, zeta_masses)

    @property
    def r(self) -> int:
        return len(self.left) - 1

    @property
    def q(self) -> tuple:
        return self.left

    def to_dict(self) -> dict:
        return {"left": list(self.left), "right": list(self.right), "closed": list(self.closed)}


def classify(disc: RSBDiscretization, value: float):
    """Index ``p`` with ``value`` in ``I_p``, or ``None`` for a gap."""
    idx = int(classify_array(disc, np.asarray([value]))[0])
    return None if idx < 0 else idx


def classify_array(disc: RSBDiscretization, values: np.ndarray) -> np.ndarray:
    """Vectorized :func:`classify`; gaps are reported as ``-1``."""
    values = np.asarray(values, dtype=float)
    out = np.full(values.shape, -1, dtype=np.int64)
    for p in range(disc.r + 1):
        upper = values <= disc.right[p] if disc.closed[p] else values < disc.right[p]
        out[(values >= disc.left[p]) & upper] = p
    return out


@dataclass(frozen=True)
class OverlapMatrix:
    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("overlap matrix must be square")
        if not np.allclose(m, m.T, atol=1e-12):
            raise ValueError("overlap matrix must be symmetric")
        if not np.allclose(np.diag(m), 1.0, atol=1e-12):
            raise ValueError("overlap matrix must have unit diagonal")
        if np.any(np.abs(m) > 1 + 1e-12):
            raise ValueError("overlaps must lie in [-1, 1]")
        object.__setattr__(self, "entries", m)

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class UltrametricResult:
    passed: bool
    witness: tuple | None = None

    def __bool__(self):
        return self.passed


def _ultrametric_violations(m: np.ndarray, tol: float) -> np.ndarray:
    # viol[a, b, c]: R_bc < min(R_ab, R_ac) - tol
    return m[None, :, :] < np.minimum(m[:, :, None], m[:, None, :]) - tol


def check_ultrametric(m, tol: float = 0.0) -> UltrametricResult:
    """Pass iff ``R_bc >= min(R_ab, R_ac) - tol`` for all triples.

    On failure the witness is a 1-based triple ``(a, b, c)`` with ``b < c``.
    """
    entries = m.entries if isinstance(m, OverlapMatrix) else np.asarray(m, dtype=float)
    viol = _ultrametric_violations(entries, tol)
    if not viol.any():
        return UltrametricResult(True)
    a, b, c = (int(x) for x in np.argwhere(viol & (np.arange(len(entries))[:, None] < np.arange(len(entries))[None, :])[None])[0])
    return UltrametricResult(False, (a + 1, b + 1, c + 1))


def check_positivity(m, tol: float = 0.0) -> bool:
    entries = m.entries if isinstance(m, OverlapMatrix) else np.asarray(m, dtype=float)
    off = entries[~np.eye(len(entries), dtype=bool)]
    return bool(np.all(off >= -tol))


@dataclass(frozen=True)
class Configuration:
    """Labelled tree of depth ``r`` and a surjective replica-to-leaf map.

    ``children[t]`` is the number of children ``k_t`` of internal vertex
    ``t``; ``assignment[l]`` is the leaf of replica ``l + 1``.
    """

    r: int
    children: dict
    assignment: tuple

    def __post_init__(self):
        leaves = set(self.leaves())
        if any(len(a) != self.r for a in self.assignment):
            raise ValueError("every replica must be mapped to a depth-r leaf")
        if set(self.assignment) != leaves:
            raise ValueError("every leaf needs at least one replica and every replica a leaf of the tree")

    def vertices(self) -> list:
        out, frontier = [()], [()]
        for _ in range(self.r):
            frontier = [t + (k,) for t in frontier for k in range(1, self.children.get(t, 0) + 1)]
            out.extend(frontier)
        return out

    def leaves(self) -> list:
        return [t for t in self.vertices() if len(t) == self.r]

    def replicas_below(self, t: VertexLabel) -> list:
        """``R(t)``: 1-based replica indices assigned to leaves below ``t``."""
        return [i + 1 for i, a in enumerate(self.assignment) if a[: len(t)] == tuple(t)]

    def to_json(self) -> str:
        def nest(t):
            if len(t) == self.r:
                return []
            return [nest(t + (k,)) for k in range(1, self.children[t] + 1)]

        return json.dumps(
            {"schema_version": 1, "r": self.r, "tree": nest(()), "assignment": [format_label(a) for a in self.assignment]}
        )

    @classmethod
    def from_json(cls, text: str) -> "Configuration":
        data = json.loads(text)
        children = {}

        def walk(node, t):
            if len(t) < data["r"]:
                children[t] = len(node)
                for k, child in enumerate(node, start=1):
                    walk(child, t + (k,))

        walk(data["tree"], ())
        return cls(data["r"], children, tuple(parse_label(s) for s in data["assignment"]))


def wedge_pattern(m, disc: RSBDiscretization) -> np.ndarray:
    """Interval index of every overlap; the diagonal is set to ``r``."""
    entries = m.entries if isinstance(m, OverlapMatrix) else np.asarray(m, dtype=float)
    pattern = classify_array(disc, entries)
    np.fill_diagonal(pattern, disc.r)
    gaps = np.argwhere(pattern < 0)
    if len(gaps):
        i, j = gaps[0]
        raise SupportError(f"overlap R[{i + 1},{j + 1}]={entries[i, j]} falls in a gap of the grid")
    return pattern


def configuration_from_pattern(pattern: np.ndarray, r: int, leaf_weights=None) -> Configuration:
    """Build the unique configuration whose leaf wedges equal ``pattern``.

    Siblings are ordered by decreasing ``leaf_weights[l, p - 1]`` (the mass
    of the depth-p cluster containing replica ``l``) when given, otherwise
    by decreasing replica count; ties go to the smallest replica index.
    """
    n = len(pattern)
    viol = pattern[None, :, :] < np.minimum(pattern[:, :, None], pattern[:, None, :])
    if viol.any():
        a, b, c = np.argwhere(viol)[0]
        raise InconsistencyError("interval pattern is not ultrametric", (int(a) + 1, int(b) + 1, int(c) + 1))
    weights = None if leaf_weights is None else np.asarray(leaf_weights, dtype=float)
    children: dict = {}
    assignment = [None] * n

    def split(members, t):
        p = len(t)
        if p == r:
            for m in members:
                assignment[m] = t
            return
        groups = []
        rest = list(members)
        while rest:
            head = rest[0]
            grp = [m for m in rest if pattern[head, m] >= p + 1]
            groups.append(grp)
            rest = [m for m in rest if pattern[head, m] < p + 1]
        if weights is not None:
            groups.sort(key=lambda g: (-weights[g[0], p], g[0]))
        else:
            groups.sort(key=lambda g: (-len(g), g[0]))
        children[t] = len(groups)
        for k, grp in enumerate(groups, start=1):
            split(grp, t + (k,))

    split(list(range(n)), ())
    return Configuration(r, children, tuple(assignment))


def extract_configuration(m, disc: RSBDiscretization, leaf_weights=None) -> Configuration:
    return configuration_from_pattern(wedge_pattern(m, disc), disc.r, leaf_weights)


@dataclass
class ClusterWeights:
    W: dict
    delta: dict = field(default_factory=dict)


def cluster_weights(
    config: Configuration,
    point_masses: np.ndarray,
    point_overlaps: np.ndarray,
    disc: RSBDiscretization,
    tol: float = 1e-9,
) -> ClusterWeights:
    """Masses ``W_t`` of the nested clusters around the sample and the
    partition masses ``delta_t = W_t - sum_k W_{tk}``.

    ``point_masses`` ``(m,)`` is a finite weighted support and
    ``point_overlaps`` ``(m, n)`` its overlaps with the ``n`` replicas.
    """
    masses = np.asarray(point_masses, dtype=float)
    masses = masses / masses.sum()
    ov = np.asarray(point_overlaps, dtype=float)
    member = {}
    for t in config.vertices():
        reps = [i - 1 for i in config.replicas_below(t)]
        member[t] = np.all(ov[:, reps] >= disc.q[len(t)], axis=1)
    W = {t: float(masses[member[t]].sum()) for t in member}
    delta = {}
    for t in member:
        kids = [t + (k,) for k in range(1, config.children.get(t, 0) + 1)]
        for k1 in range(len(kids)):
            if not np.all(member[kids[k1]] <= member[t]):
                raise UltrametricityViolation(f"cluster {format_label(kids[k1])} not nested in {format_label(t)}")
            for k2 in range(k1 + 1, len(kids)):
                if np.any(member[kids[k1]] & member[kids[k2]] & (masses > 0)):
                    raise UltrametricityViolation(f"clusters {format_label(kids[k1])} and {format_label(kids[k2])} intersect")
        delta[t] = W[t] - sum(W[c] for c in kids)
        if delta[t] < -tol:
            raise UltrametricityViolation(f"negative partition mass at {format_label(t)}: {delta[t]}")
    return ClusterWeights(W, delta)


def enumerate_clusters(leaf_masses: dict, r: int):
    """Relabel siblings in decreasing order of aggregate mass, from the root down.

    ``leaf_masses`` maps depth-r labels to positive masses. Returns
    ``(relabel, new_masses)`` where ``relabel`` maps every old vertex label
    (all depths) to its new label and ``new_masses`` maps new leaf labels to
    masses. Ties keep the original sibling order.
    """
    agg: dict = {}
    for leaf, mass in leaf_masses.items():
        if len(leaf) != r:
            raise ValueError(f"{format_label(leaf)} is not a depth-{r} leaf")
        if mass <= 0:
            raise ValueError("masses must be positive")
        for p in range(r + 1):
            agg[leaf[:p]] = agg.get(leaf[:p], 0.0) + float(mass)
    relabel = {(): ()}
    frontier = [()]
    for p in range(r):
        nxt = []
        for old in frontier:
            kids = sorted((t for t in agg if len(t) == p + 1 and t[:p] == old), key=lambda t: (-agg[t], t))
            for k, kid in enumerate(kids, start=1):
                relabel[kid] = relabel[old] + (k,)
                nxt.append(kid)
        frontier = nxt
    new_masses = {relabel[leaf]: float(m) for leaf, m in leaf_masses.items()}
    return relabel, new_masses


def canonical_assignment(labels) -> tuple:
    """Relabel leaves so the occupied children of every vertex are numbered
    ``1, 2, ...`` in their original order. Applied to cascade labels (already
    sorted by decreasing mass) this is the assignment a configuration
    extracted from the replicas' overlaps should reproduce.
    """
    labels = [tuple(a) for a in labels]
    out = {}
    for a in set(labels):
        new = []
        for p in range(len(a)):
            siblings = sorted({b[p] for b in labels if b[:p] == a[:p]})
            new.append(siblings.index(a[p]) + 1)
        out[a] = tuple(new)
    return tuple(out[a] for a in labels)
