"""Ruelle probability cascades on the d-truncated tree of depth r.

Every internal vertex at depth ``p`` carries the top ``d`` points of an
independent Poisson process with parameter ``zeta_p``. Leaf weights are
path products normalized by the estimated total mass; the mass that the
truncation discards is estimated bottom-up with the conditional tail mean
of each process (children below the kept window are assumed to carry the
mean of their kept siblings' sub-sums) and reported as ``residual_mass``.
After normalization the children of every vertex are relabelled in
decreasing order of mass, recursively from the root.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .point_process import ParameterError, poisson_points, tail_mean
from .tree import VertexLabel, format_label, index_to_label, label_to_index, leaf_digits


@dataclass(frozen=True)
class CascadeParams:
    r: int
    zetas: tuple
    d: int
    q: tuple | None = None

    def __post_init__(self):
        zetas = tuple(float(z) for z in self.zetas)
        object.__setattr__(self, "zetas", zetas)
        if self.r < 1:
            raise ParameterError("depth r must be >= 1")
        if len(zetas) != self.r:
            raise ParameterError(f"need r={self.r} parameters zeta_0..zeta_(r-1), got {len(zetas)}")
        full = (0.0,) + zetas + (1.0,)
        if any(b <= a for a, b in zip(full, full[1:])):
            raise ParameterError(f"need 0 < zeta_0 < ... < zeta_(r-1) < 1, got {zetas}")
        if self.d < 1:
            raise ParameterError("d must be >= 1")
        if self.q is None:
            object.__setattr__(self, "q", tuple(p / self.r for p in range(self.r + 1)))
        else:
            q = tuple(float(v) for v in self.q)
            if len(q) != self.r + 1 or any(b <= a for a, b in zip(q, q[1:])) or q[0] < 0:
                raise ParameterError(f"q grid must be r+1 increasing nonnegative values, got {q}")
            object.__setattr__(self, "q", q)

    @property
    def wedge_probabilities(self) -> np.ndarray:
        """``zeta_p - zeta_(p-1)`` for ``p = 0..r``."""
        full = np.array((0.0,) + self.zetas + (1.0,))
        return np.diff(full)

    @property
    def n_leaves(self) -> int:
        return self.d**self.r

    def to_dict(self) -> dict:
        return {"r": self.r, "zetas": list(self.zetas), "d": self.d, "q": list(self.q)}


@dataclass
class CascadeBatch:
    """Independent cascades stacked along a leading batch axis.

    ``u[p]``: ``(B, d**p, d)`` children points of depth-p vertices (original labels).
    ``w[p]``: ``(B, d**p)`` path products, ``w[0] == 1``.
    ``v[p]``: ``(B, d**p)`` normalized masses in original labels; for an
    internal vertex this is the kept children's mass plus ``tail`` (the
    estimated mass of its discarded children), so ``v[0] == 1``.
    ``order[p]``: ``(B, d**p, d)`` local sort maps keyed by original vertex.
    ``images[p]``: ``(B, d**p)`` original index of each relabelled vertex.
    ``V[p]``: ``(B, d**p)`` masses after relabelling.
    ``tail[p]``: ``(B, d**p)`` estimated mass hidden below the kept children
    of each relabelled internal vertex (its own discarded children only).
    """

    params: CascadeParams
    u: list
    w: list
    v: list
    order: list
    images: list
    V: list
    tail: list
    residual_mass: np.ndarray

    @property
    def size(self) -> int:
        return self.residual_mass.shape[0]

    def leaf_masses(self) -> np.ndarray:
        """Leaf masses renormalized over the kept leaves, ``(B, d**r)``."""
        leaf = self.V[-1]
        return leaf / leaf.sum(axis=1, keepdims=True)

    def sample_leaves(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """``(B, k)`` flat leaf indices drawn proportionally to the leaf masses."""
        return sample_rows(self.leaf_masses(), k, rng)

    def child_ratios(self, parent: int = 0):
        """Ratios ``V_{a n} / V_a`` below depth-(r-1) vertex ``parent`` (flat index).

        Returns ``(ratios, local_residual)``; ratios and residual sum to 1.
        """
        r, d = self.params.r, self.params.d
        kids = self.V[r][:, parent * d:(parent + 1) * d]
        denom = self.V[r - 1][:, parent]
        return kids / denom[:, None], self.tail[r - 1][:, parent] / denom

    def get(self, i: int) -> "CascadeWeights":
        return CascadeWeights(
            params=self.params,
            u=[x[i] for x in self.u],
            w=[x[i] for x in self.w],
            v=[x[i] for x in self.v],
            pi=[x[i] for x in self.order],
            V=[x[i] for x in self.V],
            tail=[x[i] for x in self.tail],
            residual_mass=float(self.residual_mass[i]),
        )


@dataclass
class CascadeWeights:
    params: CascadeParams
    u: list
    w: list
    v: list
    pi: list
    V: list
    tail: list
    residual_mass: float
    seed: int | None = field(default=None)

    def mass(self, label: VertexLabel) -> float:
        return float(self.V[len(label)][label_to_index(label, self.params.d)])

    def leaf_masses(self) -> np.ndarray:
        return self.V[-1] / self.V[-1].sum()

    def sample_leaf(self, rng: np.random.Generator) -> VertexLabel:
        idx = int(sample_rows(self.leaf_masses()[None, :], 1, rng)[0, 0])
        return index_to_label(idx, self.params.d, self.params.r)

    def sample_leaf_indices(self, k: int, rng: np.random.Generator) -> np.ndarray:
        return sample_rows(self.leaf_masses()[None, :], k, rng)[0]

    def overlap(self, a: VertexLabel, b: VertexLabel) -> float:
        from .tree import wedge

        return self.params.q[wedge(a, b)]

    def child_ratios(self, alpha: VertexLabel):
        r, d = self.params.r, self.params.d
        if len(alpha) != r - 1:
            raise ParameterError(f"child ratios need a depth-{r - 1} vertex, got {format_label(alpha)}")
        j = label_to_index(alpha, d)
        kids = self.V[r][j * d:(j + 1) * d]
        denom = self.V[r - 1][j]
        return kids / denom, float(self.tail[r - 1][j] / denom)

    def original_label(self, label: VertexLabel) -> VertexLabel:
        """``pi(alpha)``: the pre-sort vertex carrying relabelled vertex ``alpha``."""
        d = self.params.d
        img = 0
        for p, c in enumerate(label):
            img = img * d + int(self.pi[p][img, c - 1])
        return index_to_label(img, d, len(label))

    def dump(self) -> tuple[str, str]:
        """Return ``(json_header, csv_body)``; rows are (vertex_label, u, w, v, V)."""
        header = json.dumps(
            {
                "schema_version": 1,
                "params": self.params.to_dict(),
                "residual_mass": self.residual_mass,
                "seed": self.seed,
            },
            sort_keys=True,
        )
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["vertex_label", "u", "w", "v", "V"])
        d = self.params.d
        for p in range(self.params.r + 1):
            for j in range(d**p):
                label = index_to_label(j, d, p)
                u = "" if p == 0 else repr(float(self.u[p - 1][j // d, j % d]))
                writer.writerow([format_label(label), u, repr(float(self.w[p][j])), repr(float(self.v[p][j])), repr(float(self.V[p][j]))])
        return header, buf.getvalue()


def sample_rows(masses: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``k`` column indices per row proportionally to the row's masses."""
    n_rows, n_cols = masses.shape
    c = np.cumsum(masses, axis=1)
    c /= c[:, -1:]
    offsets = np.arange(n_rows, dtype=float)[:, None]
    flat = (c + offsets).ravel()
    draws = rng.random((n_rows, k)) + offsets
    idx = np.searchsorted(flat, draws.ravel(), side="right").reshape(n_rows, k)
    idx -= (np.arange(n_rows) * n_cols)[:, None]
    return np.minimum(idx, n_cols - 1)


def build_cascades(params: CascadeParams, size: int, rng: np.random.Generator) -> CascadeBatch:
    r, d = params.r, params.d
    u = [poisson_points(params.zetas[p], d, size * d**p, rng).reshape(size, d**p, d) for p in range(r)]

    # bottom-up estimate of each vertex's full sub-sum
    sub = [None] * r + [np.ones((size, d**r))]
    own_tail = [None] * r
    for p in range(r - 1, -1, -1):
        kids = sub[p + 1].reshape(size, d**p, d)
        filler = 1.0 if p == r - 1 else kids.mean(axis=2)
        own_tail[p] = tail_mean(params.zetas[p], u[p][:, :, -1]) * filler
        sub[p] = (u[p] * kids).sum(axis=2) + own_tail[p]
    total = sub[0][:, 0]

    w = [np.ones((size, 1))]
    for p in range(r):
        w.append((w[p][:, :, None] * u[p]).reshape(size, -1))

    # internal masses include the vertex's estimated discarded descendants
    v = [w[p] * sub[p] / total[:, None] for p in range(r + 1)]
    residual = 1.0 - v[r].sum(axis=1)

    order, images, V, tails = [], [np.zeros((size, 1), dtype=np.int64)], [v[0]], []
    for p in range(r):
        # stable sort on -mass: ties broken by original child index
        op = np.argsort(-v[p + 1].reshape(size, d**p, d), axis=2, kind="stable")
        order.append(op)
        parent = images[p]
        picked = np.take_along_axis(op, parent[:, :, None], axis=1)
        images.append((parent[:, :, None] * d + picked).reshape(size, -1))
        V.append(np.take_along_axis(v[p + 1], images[p + 1], axis=1))
        tails.append(np.take_along_axis(w[p] * own_tail[p] / total[:, None], images[p], axis=1))
    return CascadeBatch(params, u, w, v, order, images, V, tails, residual)


def build_cascade(params: CascadeParams, rng: np.random.Generator) -> CascadeWeights:
    return build_cascades(params, 1, rng).get(0)


def leaf_overlaps(params: CascadeParams, leaves_a: np.ndarray, leaves_b: np.ndarray) -> np.ndarray:
    """``q_{a ^ b}`` for flat leaf indices (elementwise, broadcasting)."""
    digits = leaf_digits(params.d, params.r)
    wedges = _wedge_flat(digits, leaves_a, leaves_b)
    return np.asarray(params.q)[wedges]


def _wedge_flat(digits, a, b):
    eq = digits[a] == digits[b]
    return np.cumprod(eq, axis=-1).sum(axis=-1)


def leaf_wedges(params: CascadeParams, leaves: np.ndarray) -> np.ndarray:
    """``(..., k, k)`` wedge matrix of flat leaf indices ``(..., k)``."""
    digits = leaf_digits(params.d, params.r)[leaves]
    eq = digits[..., :, None, :] == digits[..., None, :, :]
    return np.cumprod(eq, axis=-1).sum(axis=-1)


def truncation_bound(params: CascadeParams, d: int, rng: np.random.Generator, builds: int = 2000):
    """Upper estimate (mean + 3 s.e.) of the expected residual mass at truncation ``d``.

    Returns ``(bound, mean, se)``.
    """
    p = CascadeParams(params.r, params.zetas, d, params.q)
    res = build_cascades(p, builds, rng).residual_mass
    mean = float(res.mean())
    se = float(res.std(ddof=1) / np.sqrt(builds))
    return mean + 3 * se, mean, se
