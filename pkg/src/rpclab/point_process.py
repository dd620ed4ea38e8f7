"""Poisson processes with mean measure ``zeta * x**(-1 - zeta) dx`` on (0, inf),
Poisson-Dirichlet weights PD(x) and their tilted versions PD(x, -a).

The largest ``count`` points of the process are generated exactly as
``(e_1 + ... + e_n) ** (-1 / zeta)`` from i.i.d. standard exponentials.
The rest of the process is summarised by its conditional mean given the
smallest kept point, which is what every ``truncation_mass`` below records.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ParameterError(ValueError):
    pass


class DegenerateWeightsError(RuntimeError):
    pass


def _check_zeta(zeta: float) -> None:
    if not 0.0 < zeta < 1.0:
        raise ParameterError(f"stability index must lie in (0, 1), got {zeta}")


def _check_tilt(x: float, a: float) -> None:
    _check_zeta(x)
    if a < 0:
        raise ParameterError(f"tilt exponent must be >= 0, got {a}")
    if a >= x:
        # E U^a is infinite at a >= x; refuse rather than guess
        raise ParameterError(f"tilt exponent a={a} must be < x={x}")


@dataclass(frozen=True)
class DecreasingPointSequence:
    points: np.ndarray
    zeta: float

    @property
    def tail_mean(self) -> float:
        return float(tail_mean(self.zeta, self.points[-1]))

    @property
    def total(self) -> float:
        """Kept sum plus the conditional mean of the discarded tail."""
        return float(self.points.sum() + self.tail_mean)


@dataclass(frozen=True)
class PDWeights:
    weights: np.ndarray
    truncation_mass: float
    x: float
    a: float = 0.0
    ess: float | None = None


def tail_mean(zeta, smallest):
    """``E[sum of points below u]`` = integral of ``t * zeta t**(-1-zeta)`` on (0, u)."""
    return zeta / (1.0 - zeta) * np.power(smallest, 1.0 - zeta)


def poisson_points(zeta: float, count: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``(size, count)`` array, each row the decreasing top points of one process."""
    _check_zeta(zeta)
    if count < 1:
        raise ParameterError("count must be >= 1")
    gammas = np.cumsum(rng.standard_exponential((size, count)), axis=1)
    return gammas ** (-1.0 / zeta)


def sample_poisson_process(zeta: float, count: int, rng: np.random.Generator) -> DecreasingPointSequence:
    return DecreasingPointSequence(poisson_points(zeta, count, 1, rng)[0], zeta)


def normalize_points(points: np.ndarray, zeta: float):
    """Return ``(weights, truncation_mass, U_hat)`` for rows of decreasing points."""
    tail = tail_mean(zeta, points[..., -1])
    total = points.sum(axis=-1) + tail
    return points / total[..., None], tail / total, total


def pd_batch(x: float, count: int, size: int, rng: np.random.Generator):
    """Batch of truncated PD(x) samples: ``(weights, truncation_mass, U_hat)``."""
    return normalize_points(poisson_points(x, count, size, rng), x)


def sample_pd(x: float, count: int, rng: np.random.Generator) -> PDWeights:
    w, tm, _ = pd_batch(x, count, 1, rng)
    return PDWeights(w[0], float(tm[0]), x)


def importance_weights(log_u: np.ndarray, a: float):
    """Normalized weights proportional to ``U**a`` and their effective sample size."""
    logw = a * log_u
    logw = logw - logw.max()
    w = np.exp(logw)
    w /= w.sum()
    return w, 1.0 / np.sum(w * w)


def pd_tilted_batch(
    x: float,
    a: float,
    count: int,
    size: int,
    rng: np.random.Generator,
    base: int | None = None,
    min_ess_fraction: float = 0.1,
):
    """Importance-resampled PD(x, -a) draws.

    ``base`` PD(x) samples are weighted by ``U_hat**a`` (in log space) and
    ``size`` rows are resampled with replacement. Returns
    ``(weights, truncation_mass, ess)``. Raises
    :class:`DegenerateWeightsError` when the effective sample size falls
    below ``min_ess_fraction * base``.
    """
    _check_tilt(x, a)
    base = int(base if base is not None else max(10 * size, 1000))
    w, tm, total = pd_batch(x, count, base, rng)
    if a == 0.0:
        idx = rng.integers(0, base, size=size)
        return w[idx], tm[idx], float(base)
    iw, ess = importance_weights(np.log(total), a)
    if ess < min_ess_fraction * base:
        raise DegenerateWeightsError(f"effective sample size {ess:.1f} below {min_ess_fraction} * {base}")
    idx = rng.choice(base, size=size, replace=True, p=iw)
    return w[idx], tm[idx], float(ess)


def sample_pd_tilted(x: float, a: float, count: int, rng: np.random.Generator, base: int = 2000) -> PDWeights:
    w, tm, ess = pd_tilted_batch(x, a, count, 1, rng, base=base)
    return PDWeights(w[0], float(tm[0]), x, a, ess)


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    se: float
    samples: int
    heavy_tail: bool


def stable_moment(
    x: float,
    a: float,
    rng: np.random.Generator,
    samples: int = 20000,
    count: int = 200,
) -> MomentEstimate:
    """Monte Carlo estimate of ``E U**a`` for the full sum ``U`` of the process.

    ``heavy_tail`` is set when ``2a >= x``: the estimator's variance
    ``E U**(2a)`` is then infinite and the standard error is unreliable.
    """
    _check_tilt(x, a)
    heavy = 2.0 * a >= x
    if a == 0.0:
        return MomentEstimate(1.0, 0.0, samples, heavy)
    points = poisson_points(x, count, samples, rng)
    total = points.sum(axis=1) + tail_mean(x, points[:, -1])
    vals = total**a
    return MomentEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(samples)), samples, heavy)
