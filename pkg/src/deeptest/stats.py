"""Distributions, estimators, and quantiles shared by every module.

Sampling routines are pure functions of a :class:`~deeptest.streams.RandomStream`:
calling one twice with the same stream replays the same draws.  Distinct
draws therefore come from distinct child streams, which is what makes the
Monte Carlo layers reproducible under any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri, stdtrit

from .streams import RandomStream

__all__ = [
    "SampleSummary",
    "normal_quantile",
    "normal_cdf",
    "student_t_quantile",
    "sample_normal",
    "sample_binomial",
    "sample_beta",
    "beta_from_moments",
    "summarize",
    "summarize_rows",
    "empirical_upper_quantile",
]


@dataclass(frozen=True)
class SampleSummary:
    """Sufficient statistics of one univariate sample.

    ``mle_sd`` uses divisor n (the maximum-likelihood scale estimate),
    ``unbiased_sd`` uses divisor n - 1.  The two satisfy
    ``unbiased_sd**2 * (n - 1) == mle_sd**2 * n`` exactly.
    """

    n: int
    mean: float
    mle_sd: float
    unbiased_sd: float


def normal_quantile(u):
    """Standard normal quantile z_u with |Phi(z_u) - u| < 1e-12.

    Parameters
    ----------
    u : float or array_like
        Probability in the open interval (0, 1).
    """
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("normal_quantile requires 0 < u < 1")
    out = ndtri(u)
    return float(out) if out.ndim == 0 else out


def normal_cdf(x):
    """Standard normal CDF Phi(x), elementwise."""
    out = ndtr(np.asarray(x, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def student_t_quantile(u, df):
    """Student-t quantile with ``df`` degrees of freedom.

    Accuracy is inherited from the incomplete-beta inversion and is
    checked against an independent continued-fraction oracle in the
    test suite.
    """
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("student_t_quantile requires 0 < u < 1")
    if np.any(np.asarray(df) <= 0):
        raise ValueError("degrees of freedom must be positive")
    out = stdtrit(df, u)
    return float(out) if out.ndim == 0 else out


def _open_uniform(gen: np.random.Generator, size) -> np.ndarray:
    # 53-bit uniforms shifted half a step off the endpoints, so the
    # inverse CDF below never sees 0 or 1.
    k = gen.integers(0, 1 << 53, size=size, dtype=np.int64)
    return (k.astype(np.float64) + 0.5) * 2.0**-53


def sample_normal(stream: RandomStream, mu, sigma, n):
    """Draw ``n`` i.i.d. values from N(mu, sigma^2) by inverse CDF.

    One uniform is consumed per draw, which keeps substream accounting
    exact.  ``mu`` and ``sigma`` may be scalars or arrays broadcastable
    against the requested shape.
    """
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    if np.isscalar(n) and n < 1:
        raise ValueError("n must be at least 1")
    gen = stream.generator()
    z = ndtri(_open_uniform(gen, n))
    return np.asarray(mu) + np.asarray(sigma) * z


def sample_binomial(stream: RandomStream, n, p, size=None):
    """Binomial(n, p) counts on the given stream.

    Returns a scalar int when ``size`` is None and both arguments are
    scalars, otherwise an integer array.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(p_arr < 0.0) or np.any(p_arr > 1.0):
        raise ValueError("p must lie in [0, 1]")
    if np.any(np.asarray(n) < 0):
        raise ValueError("n must be nonnegative")
    gen = stream.generator()
    out = gen.binomial(n, p, size=size)
    if size is None and np.isscalar(n) and np.isscalar(p):
        return int(out)
    return out


def sample_beta(stream: RandomStream, a, b, size=None):
    """Beta(a, b) draws in (0, 1) on the given stream."""
    if np.any(np.asarray(a) <= 0) or np.any(np.asarray(b) <= 0):
        raise ValueError("beta shape parameters must be positive")
    gen = stream.generator()
    out = gen.beta(a, b, size=size)
    if size is None and np.isscalar(a) and np.isscalar(b):
        return float(out)
    return out


def beta_from_moments(mean, variance):
    """Shape parameters (a, b) of the Beta law with the given moments.

    Requires ``0 < variance < mean * (1 - mean)``; the closed form
    round-trips to the input moments within 1e-10.
    """
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(mean <= 0.0) or np.any(mean >= 1.0):
        raise ValueError("mean must lie strictly inside (0, 1)")
    bound = mean * (1.0 - mean)
    if np.any(variance <= 0.0) or np.any(variance >= bound):
        raise ValueError("variance must satisfy 0 < variance < mean*(1-mean)")
    c = bound / variance - 1.0
    a = mean * c
    b = (1.0 - mean) * c
    if a.ndim == 0:
        return float(a), float(b)
    return a, b


def summarize(sample) -> SampleSummary:
    """Sufficient statistics (mean, MLE sd, unbiased sd) of a sample."""
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("summarize expects a one-dimensional sample")
    n = x.size
    if n < 2:
        raise ValueError(f"summarize needs n >= 2 observations, got {n}")
    mean = float(x.mean())
    ss = float(np.sum((x - mean) ** 2))
    return SampleSummary(
        n=n,
        mean=mean,
        mle_sd=float(np.sqrt(ss / n)),
        unbiased_sd=float(np.sqrt(ss / (n - 1))),
    )


def summarize_rows(samples: np.ndarray):
    """Row-wise (mean, mle_sd, unbiased_sd) arrays for a 2-D sample block."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("summarize_rows expects a 2-D block with >= 2 columns")
    n = x.shape[1]
    mean = x.mean(axis=1)
    ss = np.sum((x - mean[:, None]) ** 2, axis=1)
    return mean, np.sqrt(ss / n), np.sqrt(ss / (n - 1))


def empirical_upper_quantile(values, alpha: float) -> float:
    """Upper-alpha empirical quantile: the ceil((1-alpha)*B)-th order statistic.

    No interpolation is applied; the returned value is an element of
    ``values``, which guarantees the strictly-exceeding fraction on the
    calibration sample itself is at most alpha.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empirical_upper_quantile requires a nonempty vector")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    rank = int(np.ceil((1.0 - alpha) * v.size))
    rank = min(max(rank, 1), v.size)
    return float(np.partition(v, rank - 1)[rank - 1])
