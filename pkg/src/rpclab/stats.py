"""Small statistical helpers shared by the estimators and tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class TestResult:
    statistic: float
    pvalue: float


def pooled_chisquare(counts, probs, min_expected: float = 5.0) -> TestResult:
    """Pearson chi-square after merging cells (sorted by expectation) until each expects ``min_expected``."""
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    n = counts.sum()
    order = np.argsort(probs)
    exp_sorted, obs_sorted = probs[order] * n, counts[order]
    obs_cells, exp_cells = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(obs_sorted, exp_sorted):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            obs_cells.append(acc_o)
            exp_cells.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if exp_cells:
            obs_cells[-1] += acc_o
            exp_cells[-1] += acc_e
        else:
            obs_cells.append(acc_o)
            exp_cells.append(acc_e)
    if len(obs_cells) < 2:
        return TestResult(0.0, 1.0)
    res = stats.chisquare(obs_cells, exp_cells)
    return TestResult(float(res.statistic), float(res.pvalue))


def _double_center(d):
    return d - d.mean(axis=-1, keepdims=True) - d.mean(axis=-2, keepdims=True) + d.mean(axis=(-2, -1), keepdims=True)


def _pairwise(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1))


def distance_correlation(x, y) -> float:
    """Squared sample distance correlation (V-statistic form)."""
    a, b = _double_center(_pairwise(x)), _double_center(_pairwise(y))
    dcov = (a * b).mean()
    denom = np.sqrt((a * a).mean() * (b * b).mean())
    return float(dcov / denom) if denom > 0 else 0.0


class DegenerateStatisticError(ValueError):
    pass


def dcor_permutation_test(x, y, rng: np.random.Generator, B: int = 499) -> TestResult:
    """Permutation p-value ``(1 + #{perm >= obs}) / (B + 1)`` for the distance covariance."""
    a, b = _double_center(_pairwise(x)), _double_center(_pairwise(y))
    if np.allclose(a, 0) or np.allclose(b, 0):
        raise DegenerateStatisticError("a summary is constant; distance correlation is undefined")
    n = a.shape[0]
    obs = (a * b).mean()
    perms = np.argsort(rng.random((B, n)), axis=1)
    # (a * b[perm][:, perm]).mean() for every permutation
    bp = b[perms[:, :, None], perms[:, None, :]]
    null = (a[None] * bp).mean(axis=(1, 2))
    denom = np.sqrt((a * a).mean() * (b * b).mean())
    return TestResult(float(obs / denom), float((1 + np.sum(null >= obs - 1e-12 * abs(obs))) / (B + 1)))


def bonferroni(pvalues, level: float = 0.01) -> bool:
    """True when no p-value falls below ``level / len(pvalues)`` (no rejection)."""
    p = np.asarray(pvalues, dtype=float)
    return bool(np.all(p > level / len(p))) if len(p) else True


def ks_uniform(pvalues) -> float:
    return float(stats.kstest(np.asarray(pvalues), "uniform").pvalue)
