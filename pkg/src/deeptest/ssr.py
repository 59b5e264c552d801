"""Two-stage adaptive binomial design with CEP-based sample-size reassessment.

Stage 1 enrolls ``n1`` per group; the pooled-proportion statistic on the
interim data drives a conditional-expected-power (CEP) rule that picks the
stage-2 per-group size ``n2`` inside the design bounds.  Reassessment
depends on the data only through the stage-1 counts, so bulk simulation
precomputes ``n2`` for every (x_p1, x_t1) cell once per design and replays
trials by table lookup; the table builder calls the same ``reassess_n2``
code on per-cell substreams, which keeps the two paths bit-identical.

INCTA (inverse-normal combination) and BM (pooled test at an adjusted
level) comparators share the reassessment path, as do all reported ASN
figures (per-group accounting: n1 + mean n2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stats import beta_from_moments, normal_cdf, normal_quantile
from .streams import RandomStream

__all__ = [
    "DesignParams",
    "TrialPath",
    "TrialBatch",
    "proportion_stat",
    "conditional_power",
    "conditional_expected_power",
    "reassess_n2",
    "n2_lookup_table",
    "derive_capped_table",
    "simulate_trial",
    "simulate_trials",
    "incta_decision",
    "incta_decisions",
    "bm_decision",
    "bm_decisions",
    "calibrate_bm",
]

_REASSESS_CHILD = 0xA5
_CLIP = 1e-12


@dataclass(frozen=True)
class DesignParams:
    """Design constants of the reassessed two-stage trial."""

    n1: int = 85
    n2_min: int = 21
    n2_max: int = 340
    cep_target: float = 0.8
    gamma: float = 0.001
    alpha: float = 0.05
    cep_mc_iters: int = 10_000

    def __post_init__(self):
        if self.n1 < 1:
            raise ValueError("n1 must be >= 1")
        if not 1 <= self.n2_min <= self.n2_max:
            raise ValueError("need 1 <= n2_min <= n2_max")
        if not 0.0 < self.cep_target < 1.0:
            raise ValueError("cep_target must lie in (0, 1)")
        if self.gamma <= 0.0:
            raise ValueError("gamma must be positive")
        if not 0.0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 0.5)")
        if self.cep_mc_iters < 1:
            raise ValueError("cep_mc_iters must be >= 1")


@dataclass(frozen=True)
class TrialPath:
    """One simulated trial: stage counts and the reassessed n2."""

    x_p1: int
    x_t1: int
    n2: int
    x_p2: int
    x_t2: int

    def validate(self, design: DesignParams) -> None:
        if not (0 <= self.x_p1 <= design.n1 and 0 <= self.x_t1 <= design.n1):
            raise ValueError("stage-1 counts out of range")
        if not design.n2_min <= self.n2 <= design.n2_max:
            raise ValueError("n2 outside design bounds")
        if not (0 <= self.x_p2 <= self.n2 and 0 <= self.x_t2 <= self.n2):
            raise ValueError("stage-2 counts out of range")


@dataclass
class TrialBatch:
    """Struct-of-arrays form of many simulated trials."""

    x_p1: np.ndarray
    x_t1: np.ndarray
    n2: np.ndarray
    x_p2: np.ndarray
    x_t2: np.ndarray

    def __len__(self):
        return self.x_p1.size

    def statistic_features(self, n1: int) -> np.ndarray:
        """Per-trial t^(s) = (stage-1 rate diff, stage-2 rate diff, n2)."""
        d1 = (self.x_t1 - self.x_p1) / n1
        d2 = (self.x_t2 - self.x_p2) / self.n2
        return np.column_stack([d1, d2, self.n2.astype(np.float64)])

    def pooled_stage1_rate(self, n1: int) -> np.ndarray:
        """Per-trial t^(c): pooled first-stage response rate."""
        return (self.x_p1 + self.x_t1) / (2.0 * n1)


def proportion_stat(x_p, x_t, n):
    """Pooled two-proportion statistic of the (treatment - placebo) diff.

    Degenerate pooled rates (0 or 1) carry no between-arm evidence and
    return 0 by convention.
    """
    xp = np.asarray(x_p, dtype=np.float64)
    xt = np.asarray(x_t, dtype=np.float64)
    if np.any(xp < 0) or np.any(xt < 0) or np.any(xp > n) or np.any(xt > n):
        raise ValueError("counts must lie in [0, n]")
    pooled = (xp + xt) / (2.0 * n)
    den = np.sqrt(2.0 * pooled * (1.0 - pooled) / n)
    num = (xt - xp) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def conditional_power(m1, n1: int, n2, pi_t, pi_p, alpha: float):
    """Probability of final rejection given the interim statistic m1.

    Normal-approximation display with z_alpha = Phi^{-1}(alpha) (negative
    for small alpha); under pi_t = pi_p and m1 = 0 the value tends to
    alpha as n2 grows.
    """
    pibar = 0.5 * (np.asarray(pi_t, dtype=np.float64) + np.asarray(pi_p, dtype=np.float64))
    if np.any(pibar <= 0.0) or np.any(pibar >= 1.0):
        raise ValueError("pooled rate (pi_t + pi_p)/2 must lie strictly inside (0, 1)")
    n2 = np.asarray(n2, dtype=np.float64)
    z_a = normal_quantile(alpha)
    drift = (np.asarray(pi_t) - np.asarray(pi_p)) * np.sqrt(n2)
    arg = (z_a * np.sqrt(n1 + n2) + np.asarray(m1) * np.sqrt(n1)) / np.sqrt(n2)
    arg = arg + drift / np.sqrt(2.0 * pibar * (1.0 - pibar))
    out = normal_cdf(arg)
    return float(out) if np.ndim(out) == 0 else out


def conditional_expected_power(
    m1,
    n1: int,
    n2,
    prior_t: tuple,
    prior_p: tuple,
    alpha: float,
    iters: int,
    stream: RandomStream,
) -> float:
    """CP averaged over independent Beta priors on the two true rates."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    gen = stream.generator()
    pi_t = np.clip(gen.beta(prior_t[0], prior_t[1], iters), _CLIP, 1.0 - _CLIP)
    pi_p = np.clip(gen.beta(prior_p[0], prior_p[1], iters), _CLIP, 1.0 - _CLIP)
    return float(np.mean(conditional_power(m1, n1, n2, pi_t, pi_p, alpha)))


def _stage1_prior(count: int, design: DesignParams) -> tuple:
    # Observed rate clipped away from {0,1}; gamma reduced only when it
    # breaches the Bernoulli variance bound.
    lo = 1.0 / (2.0 * design.n1)
    mean = min(max(count / design.n1, lo), 1.0 - lo)
    bound = mean * (1.0 - mean)
    var = design.gamma if design.gamma < bound else 0.9 * bound
    return beta_from_moments(mean, var)


def reassess_n2(m1: float, stage1: tuple, design: DesignParams, stream: RandomStream) -> int:
    """Smallest n2 in the design bounds with CEP >= cep_target, else n2_max.

    One prior-draw set is generated per reassessment and shared across
    all candidate n2 values, which makes CEP(m1, .) deterministic and
    bisectable; a linear scan covers the (rare) case where the endpoint
    monotonicity check fails.
    """
    x_p1, x_t1 = stage1
    if not (0 <= x_p1 <= design.n1 and 0 <= x_t1 <= design.n1):
        raise ValueError("stage-1 counts out of range")
    a_t, b_t = _stage1_prior(x_t1, design)
    a_p, b_p = _stage1_prior(x_p1, design)
    gen = stream.generator()
    pi_t = np.clip(gen.beta(a_t, b_t, design.cep_mc_iters), _CLIP, 1.0 - _CLIP)
    pi_p = np.clip(gen.beta(a_p, b_p, design.cep_mc_iters), _CLIP, 1.0 - _CLIP)

    def cep(n2: int) -> float:
        return float(np.mean(conditional_power(m1, design.n1, n2, pi_t, pi_p, design.alpha)))

    lo, hi = design.n2_min, design.n2_max
    target = design.cep_target
    cep_lo = cep(lo)
    if cep_lo >= target:
        return lo
    if lo == hi:
        return hi
    cep_hi = cep(hi)
    if cep_lo <= cep_hi:
        if cep_hi < target:
            return hi
        # smallest crossing by integer bisection: cep(lo) < t <= cep(hi)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if cep(mid) >= target:
                hi = mid
            else:
                lo = mid
        return hi
    # non-monotone endpoints: scan for the smallest crossing
    for n2 in range(design.n2_min + 1, design.n2_max + 1):
        if cep(n2) >= target:
            return n2
    return design.n2_max


def n2_lookup_table(design: DesignParams, stream: RandomStream) -> np.ndarray:
    """Reassessed n2 for every stage-1 cell (x_p1, x_t1).

    Cell (x_p1, x_t1) is computed by reassess_n2 on the child substream
    with index x_p1*(n1+1) + x_t1, so individual entries can be
    reproduced independently of the build loop.
    """
    side = design.n1 + 1
    table = np.empty((side, side), dtype=np.int64)
    for x_p1 in range(side):
        for x_t1 in range(side):
            m1 = proportion_stat(x_p1, x_t1, design.n1)
            cell = stream.child(x_p1 * side + x_t1)
            table[x_p1, x_t1] = reassess_n2(m1, (x_p1, x_t1), design, cell)
    return table


def derive_capped_table(base_table: np.ndarray, design: DesignParams) -> np.ndarray:
    """Reassessment table for a lower n2_max, derived from a base table.

    Valid because the smallest CEP crossing does not depend on the upper
    clamp: with the same prior draws, the reassessed n2 under a smaller
    cap is min(base n2, new cap).  Entries below n2_min never occur in a
    base table with the same n2_min.
    """
    if np.any(base_table < design.n2_min):
        raise ValueError("base table has entries below the design's n2_min")
    return np.minimum(base_table, design.n2_max)


def simulate_trial(
    pi_p: float,
    pi_t: float,
    design: DesignParams,
    stream: RandomStream,
    n2_table: np.ndarray | None = None,
) -> TrialPath:
    """Simulate one trial end to end.

    When ``n2_table`` is given the reassessment is a lookup; otherwise
    reassess_n2 runs on a dedicated child substream.  The two modes agree
    in distribution (and the table itself is built from reassess_n2).
    """
    for rate in (pi_p, pi_t):
        if not 0.0 <= rate <= 1.0:
            raise ValueError("rates must lie in [0, 1]")
    gen = stream.generator()
    x_p1 = int(gen.binomial(design.n1, pi_p))
    x_t1 = int(gen.binomial(design.n1, pi_t))
    if n2_table is not None:
        n2 = int(n2_table[x_p1, x_t1])
    else:
        m1 = proportion_stat(x_p1, x_t1, design.n1)
        n2 = reassess_n2(m1, (x_p1, x_t1), design, stream.child(_REASSESS_CHILD))
    x_p2 = int(gen.binomial(n2, pi_p))
    x_t2 = int(gen.binomial(n2, pi_t))
    path = TrialPath(x_p1=x_p1, x_t1=x_t1, n2=n2, x_p2=x_p2, x_t2=x_t2)
    path.validate(design)
    return path


def simulate_trials(
    pi_p: float,
    pi_t: float,
    design: DesignParams,
    n_trials: int,
    stream: RandomStream,
    n2_table: np.ndarray,
) -> TrialBatch:
    """Vectorized trial simulation via the per-cell reassessment table."""
    for rate in (pi_p, pi_t):
        if not 0.0 <= rate <= 1.0:
            raise ValueError("rates must lie in [0, 1]")
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    gen = stream.generator()
    x_p1 = gen.binomial(design.n1, pi_p, size=n_trials)
    x_t1 = gen.binomial(design.n1, pi_t, size=n_trials)
    n2 = n2_table[x_p1, x_t1]
    x_p2 = gen.binomial(n2, pi_p)
    x_t2 = gen.binomial(n2, pi_t)
    return TrialBatch(x_p1=x_p1, x_t1=x_t1, n2=n2, x_p2=x_p2, x_t2=x_t2)


def incta_decision(path: TrialPath, n1: int, alpha: float) -> bool:
    """Inverse-normal combination of the stage statistics, equal weights."""
    z1 = proportion_stat(path.x_p1, path.x_t1, n1)
    z2 = proportion_stat(path.x_p2, path.x_t2, path.n2)
    z = (z1 + z2) / np.sqrt(2.0)
    return bool(z > normal_quantile(1.0 - alpha))


def incta_decisions(batch: TrialBatch, n1: int, alpha: float) -> np.ndarray:
    z1 = proportion_stat(batch.x_p1, batch.x_t1, n1)
    z2 = proportion_stat(batch.x_p2, batch.x_t2, batch.n2)
    z = (z1 + z2) / np.sqrt(2.0)
    return z > normal_quantile(1.0 - alpha)


def bm_decision(path: TrialPath, n1: int, adjusted_alpha: float = 0.033) -> bool:
    """Pooled-data proportion test at the adjusted nominal level."""
    n = n1 + path.n2
    stat = proportion_stat(path.x_p1 + path.x_p2, path.x_t1 + path.x_t2, n)
    return bool(stat > normal_quantile(1.0 - adjusted_alpha))


def bm_decisions(batch: TrialBatch, n1: int, adjusted_alpha: float = 0.033) -> np.ndarray:
    stat = _bm_stats(batch, n1)
    return stat > normal_quantile(1.0 - adjusted_alpha)


def _bm_stats(batch: TrialBatch, n1: int) -> np.ndarray:
    n = n1 + batch.n2
    return proportion_stat(batch.x_p1 + batch.x_p2, batch.x_t1 + batch.x_t2, n)


def calibrate_bm(
    design: DesignParams,
    pi_grid,
    target_alpha: float,
    stream: RandomStream,
    n2_table: np.ndarray | None = None,
    n_trials: int = 100_000,
) -> float:
    """Nominal BM level whose max type I over the null grid hits the target.

    The pooled statistics are simulated once per grid point; rejection at
    a nominal level a uses threshold z_{1-a}, so the max type I curve is
    monotone in a and plain bisection applies (to within 0.002).
    """
    pi_grid = list(pi_grid)
    if not pi_grid:
        raise ValueError("pi_grid must be nonempty")
    if n2_table is None:
        n2_table = n2_lookup_table(design, stream.child(0))
    stats = [
        _bm_stats(
            simulate_trials(pi, pi, design, n_trials, stream.child(1 + i), n2_table),
            design.n1,
        )
        for i, pi in enumerate(pi_grid)
    ]

    def max_type_i(level: float) -> float:
        thr = normal_quantile(1.0 - level)
        return max(float(np.mean(s > thr)) for s in stats)

    lo, hi = 1e-4, target_alpha
    if max_type_i(hi) <= target_alpha:
        return hi
    if max_type_i(lo) > target_alpha:
        raise RuntimeError("calibration failed: type I above target at the bracket floor")
    while True:
        mid = 0.5 * (lo + hi)
        t = max_type_i(mid)
        if abs(t - target_alpha) <= 0.002 or hi - lo < 1e-6:
            return mid
        if t > target_alpha:
            hi = mid
        else:
            lo = mid
