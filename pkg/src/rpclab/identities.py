"""Ghirlanda-Guerra defect estimator, the conditional mixture law of a new
overlap, the simplex tilt maps ``T_a`` and a Monte Carlo check of the
reweighting identity for cluster weights.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .rsb import Configuration, RSBDiscretization, classify_array
from .tree import wedge


class ContractError(ValueError):
    pass


class ConditioningError(RuntimeError):
    pass


# --------------------------------------------------------------- test functions


@dataclass(frozen=True)
class TestFunctionSpec:
    """``spin_product``: ``prod_{(i, l) in F} sigma_i^l`` (1-based ``i`` and ``l``).
    ``overlap_monomial``: ``prod_{(l, l') in F} R_{l, l'}``.
    Both are bounded by 1 in absolute value.
    """

    kind: str
    F: tuple

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.kind not in ("spin_product", "overlap_monomial"):
            raise ContractError(f"unknown test function kind {self.kind!r}")
        object.__setattr__(self, "F", tuple(tuple(int(v) for v in e) for e in self.F))

    @property
    def replicas(self) -> int:
        """Largest replica index used."""
        if not self.F:
            return 0
        if self.kind == "spin_product":
            return max(l for _, l in self.F)
        return max(max(e) for e in self.F)

    def __call__(self, spins: np.ndarray, overlaps: np.ndarray) -> np.ndarray:
        out = np.ones(spins.shape[0])
        if self.kind == "spin_product":
            for i, l in self.F:
                out = out * spins[:, l - 1, i - 1]
        else:
            for a, b in self.F:
                out = out * overlaps[:, a - 1, b - 1]
        return out

    def label(self) -> str:
        if not self.F:
            return "1"
        if self.kind == "spin_product":
            return "*".join(f"s{i}^{l}" for i, l in self.F)
        return "*".join(f"R{a}{b}" for a, b in self.F)


def _cluster_means(values: np.ndarray, cluster: np.ndarray) -> np.ndarray:
    """Per-cluster means of the columns of ``values`` ``(G, k)``."""
    ids, inv = np.unique(cluster, return_inverse=True)
    sums = np.zeros((len(ids), values.shape[1]))
    np.add.at(sums, inv, values)
    counts = np.bincount(inv).astype(float)
    return sums / counts[:, None]


# ------------------------------------------------------------------ GG defect


@dataclass(frozen=True)
class Estimate:
    estimate: float
    se: float
    samples: int
    clusters: int

    def to_json(self, **extra) -> str:
        return json.dumps({**asdict(self), **extra}, sort_keys=True)


def ggi_cluster_means(groups, f: TestFunctionSpec, n: int, p: int) -> np.ndarray:
    """Per-measure means of ``(f R_{1,n+1}^p, f, R_12^p, f sum_{l=2..n} R_{1,l}^p)``, shape ``(C, 4)``."""
    if n < 2:
        raise ContractError("the defect needs n >= 2")
    if p < 1:
        raise ContractError("the power p must be >= 1")
    if groups.n < n + 1:
        raise ContractError(f"need {n + 1} replicas per group, source has {groups.n}")
    if f.replicas > n:
        raise ContractError(f"f uses replica {f.replicas} > n = {n}")
    R = groups.overlaps
    fv = f(groups.spins, R)
    Y = np.stack(
        [
            fv * R[:, 0, n] ** p,
            fv,
            R[:, 0, 1] ** p,
            fv * (R[:, 0, 1:n] ** p).sum(axis=1),
        ],
        axis=1,
    )
    return _cluster_means(Y, groups.cluster)


def ggi_from_cluster_means(cm: np.ndarray, n: int, samples: int) -> Estimate:
    C = cm.shape[0]
    mean = cm.mean(axis=0)
    est = mean[0] - mean[1] * mean[2] / n - mean[3] / n
    grad = np.array([1.0, -mean[2] / n, -mean[1] / n, -1.0 / n])
    se = float(np.sqrt(grad @ np.cov(cm.T) @ grad / C)) if C > 1 else float("nan")
    return Estimate(float(est), se, int(samples), int(C))


def ggi_delta(groups, f: TestFunctionSpec, n: int, p: int) -> Estimate:
    """Signed GG defect ``E<f R_{1,n+1}^p> - E<f>E<R_12^p>/n - sum_{l=2..n} E<f R_{1,l}^p>/n``.

    ``f`` may use replicas ``1..n`` only; ``groups`` must hold ``n + 1``
    replicas. The standard error is the delta method applied to
    per-measure means, so replicas sharing a measure are not treated as
    independent.
    """
    return ggi_from_cluster_means(ggi_cluster_means(groups, f, n, p), n, groups.size)


# ------------------------------------------------------------------ mixture law


@dataclass
class MixtureLawResult:
    distance: float
    cells: dict
    sparse_cells: list
    zeta: np.ndarray


def mixture_law_check(groups, n: int, disc: RSBDiscretization, zeta=None, min_count: int = 30) -> MixtureLawResult:
    """Compare the law of the interval of ``R_{1,n+1}`` given the interval
    pattern of ``S^n`` against ``zeta/n + (1/n) sum_{l=2..n} delta_{R_{1,l}}``.

    Returns the count-weighted mean total-variation distance over cells with
    at least ``min_count`` samples; sparser cells are listed separately.
    """
    if n < 2:
        raise ContractError("the mixture law needs n >= 2")
    R = groups.overlaps
    K = disc.r + 1
    cls = classify_array(disc, R)
    if np.any(cls[:, 0, n] < 0) or np.any(cls[:, :n, :n] < 0):
        raise ContractError("overlaps outside the interval grid")
    if zeta is None:
        zeta = disc.zeta_masses
    if zeta is None:
        zeta = np.bincount(cls[:, 0, 1], minlength=K) / len(cls)
    zeta = np.asarray(zeta, dtype=float)
    iu = np.triu_indices(n, 1)
    patterns = cls[:, :n, :n][:, iu[0], iu[1]]
    keys, inv = np.unique(patterns, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    cells, sparse = {}, []
    total, weighted = 0, 0.0
    for j, key in enumerate(keys):
        sel = inv == j
        count = int(sel.sum())
        emp = np.bincount(cls[sel, 0, n], minlength=K) / count
        first_row = cls[sel][0, 0, 1:n]
        pred = zeta / n + np.bincount(first_row, minlength=K) / n
        tv = 0.5 * float(np.abs(emp - pred).sum())
        cells[tuple(int(v) for v in key)] = {"count": count, "empirical": emp, "predicted": pred, "tv": tv}
        if count < min_count:
            sparse.append(tuple(int(v) for v in key))
            continue
        total += count
        weighted += count * tv
    return MixtureLawResult(weighted / total if total else float("nan"), cells, sparse, zeta)


# --------------------------------------------------------------------- tilt maps


@dataclass(frozen=True)
class SimplexPoint:
    """Interior point of ``{x_t > 0, sum x_t < 1}``; ``rest = 1 - sum x_t`` is carried explicitly."""

    x: np.ndarray
    rest: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if np.any(x <= 0) or self.rest <= 0:
            raise ContractError("simplex point must be strictly interior")
        object.__setattr__(self, "x", x)

    @classmethod
    def from_coords(cls, x) -> "SimplexPoint":
        x = np.asarray(x, dtype=float)
        return cls(x, float(1.0 - x.sum()))


def _as_point(x) -> SimplexPoint:
    return x if isinstance(x, SimplexPoint) else SimplexPoint.from_coords(x)


def log_delta_rows(a: np.ndarray, x: np.ndarray, rest: np.ndarray) -> np.ndarray:
    """Row-wise ``log Delta_a(x)`` for ``a, x`` of shape ``(m, k)`` and ``rest`` of shape ``(m,)``."""
    return logsumexp(np.concatenate([np.log(x) + a, np.log(rest)[:, None]], axis=1), axis=1)


def tilt_rows(a: np.ndarray, x: np.ndarray, rest: np.ndarray):
    """Row-wise ``T_a(x)``; returns ``(coords (m, k), rest (m,))``."""
    logs = np.concatenate([np.log(x) + a, np.log(rest)[:, None]], axis=1)
    out = np.exp(logs - logsumexp(logs, axis=1, keepdims=True))
    return out[:, :-1], out[:, -1]


def log_delta(a, x) -> float:
    """``log Delta_a(x) = log(sum x_t e^{a_t} + 1 - sum x_t)`` without overflow."""
    x = _as_point(x)
    a = np.asarray(a, dtype=float)
    return float(log_delta_rows(a[None], x.x[None], np.array([x.rest]))[0])


def tilt_map(a, x) -> SimplexPoint:
    """``T_a(x)_t = x_t e^{a_t} / Delta_a(x)``, computed with a max-shift in log space."""
    x = _as_point(x)
    a = np.asarray(a, dtype=float)
    if a.shape != x.x.shape:
        raise ContractError("tilt vector and simplex point differ in length")
    if not np.all(np.isfinite(a)):
        raise ContractError("tilt entries must be finite")
    y, rest = tilt_rows(a[None], x.x[None], np.array([x.rest]))
    return SimplexPoint(y[0], float(rest[0]))


def normalizer_residual_rows(a, x, rest) -> np.ndarray:
    """Row-wise ``|log Delta_a(T_{-a} x) + log Delta_{-a}(x)|``."""
    y, yr = tilt_rows(-a, x, rest)
    return np.abs(log_delta_rows(a, y, yr) + log_delta_rows(-a, x, rest))


def group_residual_rows(a, b, x, rest) -> np.ndarray:
    """Row-wise ``max |T_a(T_b x) - T_{a+b}(x)|`` over coordinates and the remainder."""
    y, yr = tilt_rows(b, x, rest)
    l, lr = tilt_rows(a, y, yr)
    r, rr = tilt_rows(a + b, x, rest)
    return np.maximum(np.abs(l - r).max(axis=1), np.abs(lr - rr))


def tilt_normalizer_identity(a, x) -> float:
    """``|log Delta_a(T_{-a} x) + log Delta_{-a}(x)|``.

    This is the relative form of ``Delta_a(T_{-a} x) = 1 / Delta_{-a}(x)``;
    it stays meaningful when the two sides are of order ``e^30``.
    """
    x = _as_point(x)
    a = np.asarray(a, dtype=float)
    return float(normalizer_residual_rows(a[None], x.x[None], np.array([x.rest]))[0])


def tilt_group_residual(a, b, x) -> float:
    """``max |T_a(T_b x) - T_{a+b}(x)|`` over coordinates, remainder included."""
    x = _as_point(x)
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(group_residual_rows(a[None], b[None], x.x[None], np.array([x.rest]))[0])


# ----------------------------------------------------------- reweighting check


def leaf_representatives(config: Configuration) -> dict:
    """``l(t)``: the smallest replica index in ``R(t)`` for every vertex."""
    return {t: min(config.replicas_below(t)) for t in config.vertices()}


def interval_functions(config: Configuration, b: dict) -> np.ndarray:
    """``f_l(I_p) = sum_{t : l(t) = l, |t| = p} b_t`` as an ``(n, r + 1)`` table."""
    n = len(config.assignment)
    table = np.zeros((n, config.r + 1))
    for t, l in leaf_representatives(config).items():
        table[l - 1, len(t)] += b.get(t, 0.0)
    return table


def tilt_from_b(config: Configuration, b: dict) -> dict:
    """The vector ``a`` for which the map built from ``b`` equals ``T_a``.

    For ``u`` in ``T*``, ``a_u = b_u + sum_{t in T(u)} b_t`` with ``T(u)``
    the proper ancestors ``t`` with ``P(l(u)) ^ P(l(t)) = |t|``. Requires
    ``b`` at the root to vanish; otherwise no such ``a`` exists.
    """
    if b.get((), 0.0) != 0.0:
        raise ContractError("b at the root must be zero for the map to be a tilt")
    rep = leaf_representatives(config)
    a = {}
    for u in config.vertices():
        if not u:
            continue
        total = b.get(u, 0.0)
        for p in range(len(u)):
            t = u[:p]
            if wedge(config.assignment[rep[u] - 1], config.assignment[rep[t] - 1]) == p:
                total += b.get(t, 0.0)
        a[u] = total
    return a


@dataclass
class ReweightingResult:
    lhs: np.ndarray
    rhs: np.ndarray
    diff: np.ndarray
    se: np.ndarray
    prob_event: float
    samples: int
    clusters: int
    residual: float
    names: list

    def max_z(self, residual_factor: float = 2.0) -> float:
        return float(np.max(np.abs(self.diff) / (self.se + 1e-300)))


def partition_and_tilt(groups, config: Configuration, disc: RSBDiscretization, table: np.ndarray):
    """For every group: the event indicator, ``delta`` on ``T*``, the tilted
    ``T(delta)``, ``<exp F>`` and ``sum_l F_l`` without its constant part.
    """
    n = len(config.assignment)
    r = config.r
    verts = [t for t in config.vertices() if t]
    cR = classify_array(disc, groups.overlaps[:, :n, :n])
    cP = classify_array(disc, groups.point_overlaps[:, :, :n])
    target = np.array([[wedge(a, c) for c in config.assignment] for a in config.assignment])
    off = ~np.eye(n, dtype=bool)
    event = np.all((cR == target[None])[:, off], axis=1)
    # membership of every support point in B_t
    members = []
    for t in verts:
        reps = [l - 1 for l in config.replicas_below(t)]
        if len(t) == r:
            members.append(np.all(cP[:, :, reps] >= r, axis=2))
        else:
            members.append(np.all(cP[:, :, reps] == len(t), axis=2))
    members = np.stack(members, axis=1)  # (G, |T*|, L)
    m = groups.masses
    delta = (members * m[:, None, :]).sum(axis=2)
    # F(sigma) = sum_l f_l(class(sigma . sigma^l)); gap classes contribute 0
    safe = np.clip(cP, 0, r)
    F = (table[np.arange(n)[None, None, :], safe] * (cP >= 0)).sum(axis=2)  # (G, L)
    shift = F.max(axis=1, keepdims=True)
    eF = np.exp(F - shift)
    mean_eF = (m * eF).sum(axis=1)
    T = (members * (m * eF)[:, None, :]).sum(axis=2) / mean_eF[:, None]
    log_mean_eF = np.log(mean_eF) + shift[:, 0]
    # sum_l sum_{k != l} f_k(class(R_lk))
    safe_R = np.clip(cR, 0, r)
    fk = table[np.arange(n)[None, None, :], safe_R]  # f_k evaluated at R_{l k}
    sumF = (fk * off[None]).sum(axis=(1, 2))
    return event, delta, T, log_mean_eF, sumF, verts


@dataclass
class ReweightingPartial:
    """Per-measure means of one batch; batches over disjoint measures merge by concatenation."""

    lhs: np.ndarray  # (C, k)
    diff: np.ndarray  # (C, k)
    events: int
    total: int
    residual_sum: float  # residual mass summed over measures
    names: list


def reweighting_batch(
    source,
    config: Configuration,
    b: dict,
    phis: list,
    n_measures: int,
    rng: np.random.Generator,
    disc: RSBDiscretization | None = None,
    zeta=None,
    chunk: int = 200,
) -> ReweightingPartial:
    n = len(config.assignment)
    if disc is None:
        disc = RSBDiscretization.from_grid(source.params.q)
    zeta = np.asarray(source.zeta if zeta is None else zeta, dtype=float)
    table = interval_functions(config, b)
    if zeta.shape != (table.shape[1],):
        raise ContractError(f"zeta needs {table.shape[1]} interval masses")
    const = float((table @ zeta).sum())
    cms_l, cms_d = [], []
    events = total = 0
    residual = 0.0
    done = 0
    while done < n_measures:
        k = min(chunk, n_measures - done)
        groups = source.draw(k, n, rng, support=True)
        event, delta, T, log_mean_eF, sumF, _ = partition_and_tilt(groups, config, disc, table)
        weight = np.exp(sumF + const - n * log_mean_eF)
        lhs = np.stack([phi(groups.spins, groups.overlaps, delta, event) * event for phi in phis], axis=1)
        rhs = np.stack([phi(groups.spins, groups.overlaps, T, event) * event for phi in phis], axis=1) * weight[:, None]
        cms_l.append(_cluster_means(lhs, groups.cluster))
        cms_d.append(_cluster_means(lhs - rhs, groups.cluster))
        events += int(event.sum())
        total += groups.size
        residual += groups.residual * k
        done += k
    names = [getattr(phi, "name", f"phi{j}") for j, phi in enumerate(phis)]
    return ReweightingPartial(np.concatenate(cms_l), np.concatenate(cms_d), events, total, residual, names)


def reweighting_merge(parts) -> ReweightingResult:
    events = sum(p.events for p in parts)
    if events == 0:
        raise ConditioningError("the configuration event was never observed")
    cm_l = np.concatenate([p.lhs for p in parts])
    cm_d = np.concatenate([p.diff for p in parts])
    C = cm_d.shape[0]
    total = sum(p.total for p in parts)
    return ReweightingResult(
        lhs=cm_l.mean(axis=0),
        rhs=(cm_l - cm_d).mean(axis=0),
        diff=cm_d.mean(axis=0),
        se=cm_d.std(axis=0, ddof=1) / np.sqrt(C),
        prob_event=events / total,
        samples=total,
        clusters=C,
        residual=sum(p.residual_sum for p in parts) / C if C else 0.0,
        names=parts[0].names,
    )


def reweighting_check(
    source,
    config: Configuration,
    b: dict,
    phis: list,
    n_measures: int,
    rng: np.random.Generator,
    disc: RSBDiscretization | None = None,
    zeta=None,
    chunk: int = 200,
) -> ReweightingResult:
    """Monte Carlo estimates of both sides of the reweighting identity

    ``E<Phi(S, delta)> = E<Phi(S, T(delta)) exp(sum_l F_l) / <exp F>_-^n>``

    for every ``Phi`` in ``phis`` (callables ``(spins, overlaps, delta, event) -> (G,)``).
    ``f_l`` is built from interval indicators and ``b`` through the
    smallest-replica choice of ``l(t)``; ``E<f_l(R_12)>`` uses ``zeta``
    (default: the source's exact interval law). Errors are cluster-robust
    standard errors of the paired difference.
    """
    return reweighting_merge([reweighting_batch(source, config, b, phis, n_measures, rng, disc, zeta, chunk)])


class Phi:
    """Panel member ``1_O * box(delta) * spin product``.

    ``box`` is a list of ``(coordinate, low, high)`` constraints on ``delta``
    (0-based in the order of ``T*``); ``spins`` a list of ``(i, l)``.
    ``linear`` multiplies by ``delta[coordinate]`` instead of a box.
    """

    def __init__(self, name, box=(), spins=(), linear=None):
        self.name, self.box, self.spin_idx, self.linear = name, tuple(box), tuple(spins), linear

    def __call__(self, spins, overlaps, delta, event):
        out = np.ones(len(delta))
        for j, lo, hi in self.box:
            out = out * ((delta[:, j] > lo) & (delta[:, j] <= hi))
        for i, l in self.spin_idx:
            out = out * spins[:, l - 1, i - 1]
        if self.linear is not None:
            out = out * delta[:, self.linear]
        return out


def default_phi_panel() -> list:
    """Six bounded functionals for a configuration with two non-root vertices."""
    return [
        Phi("event"),
        Phi("delta1>0.3", box=[(0, 0.3, 1.0)]),
        Phi("delta2<=0.2", box=[(1, 0.0, 0.2)]),
        Phi("delta1", linear=0),
        Phi("s1^1*s1^3", spins=[(1, 1), (1, 3)]),
        Phi("delta1>0.2*s1^1*s1^2", box=[(0, 0.2, 1.0)], spins=[(1, 1), (1, 2)]),
    ]
