"""Hypothesis tests and binning used by the diagnostics.

Both tests are one-sided by construction because each research question is
directional: the agreement test asks whether scores sit *below* a threshold,
and the fidelity test asks whether one method's drops are *greater* than
another's.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.stats import rankdata

from .errors import DegenerateSampleError

EXACT_ENUMERATION_LIMIT = 20


@dataclass
class StatTestResult:
    test_kind: str
    n_effective: int
    statistic: float
    p_value: float
    reject_at_05: bool
    description: str


def _normal_cdf(z):
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _signed_rank_parts(samples, threshold):
    d = np.asarray(samples, dtype=np.float64) - threshold
    if d.ndim != 1:
        raise ValueError("samples must be one-dimensional")
    if not np.all(np.isfinite(d)):
        raise ValueError("samples must be finite")
    d = d[d != 0.0]  # zero differences carry no sign information
    if d.size == 0:
        raise DegenerateSampleError("degenerate sample: no non-zero differences")
    ranks = rankdata(np.abs(d))  # midranks on ties
    w_plus = float(ranks[d > 0.0].sum())
    return d, ranks, w_plus


def _exact_p_le(ranks, w_plus):
    """P(W+ <= w_plus) under random signs, exactly.

    The null distribution of W+ over all 2^n sign assignments is built by an
    integer-count convolution over the ranks (scaled by 2 so midranks land on
    integers).  This is the same distribution sign-vector enumeration gives,
    computed without materializing 2^n vectors.
    """
    scaled = np.rint(2.0 * np.asarray(ranks)).astype(np.int64)
    counts = np.zeros(int(scaled.sum()) + 1, dtype=object)
    counts[0] = 1
    top = 0
    for r in scaled:
        shifted = np.zeros_like(counts)
        shifted[r:top + r + 1] = counts[:top + 1]
        counts[:top + r + 1] += shifted[:top + r + 1]
        top += int(r)
    cutoff = int(np.floor(2.0 * w_plus + 1e-9))
    favorable = int(sum(counts[:cutoff + 1]))
    return favorable / float(2 ** len(scaled))


def _normal_p_le(d, ranks, w_plus):
    """Lower-tail normal approximation, tie-corrected, continuity +0.5."""
    n = d.size
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var -= float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    sigma = math.sqrt(var)
    return _normal_cdf((w_plus - mu + 0.5) / sigma)


def wilcoxon_one_sided_less(samples, threshold=0.5, mode="auto"):
    """Wilcoxon signed-rank test of H0: median >= threshold vs H1: median < threshold.

    Differences equal to zero are dropped; ties in |difference| take
    midranks.  The statistic is W+, the rank sum of positive differences.
    ``mode`` picks the p-value route: "exact" enumerates the null
    distribution, "normal" uses the tie-corrected approximation, "auto"
    switches at n_effective = 20.
    """
    if mode not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown mode {mode!r}")
    d, ranks, w_plus = _signed_rank_parts(samples, threshold)
    use_exact = mode == "exact" or (mode == "auto" and d.size <= EXACT_ENUMERATION_LIMIT)
    p = _exact_p_le(ranks, w_plus) if use_exact else _normal_p_le(d, ranks, w_plus)
    return StatTestResult("wilcoxon_one_sided_less", int(d.size), w_plus, float(p),
                          bool(p < 0.05), f"H1: median < {threshold}")


def student_t_cdf(t, df):
    if df < 1:
        raise ValueError("degrees of freedom must be >= 1")
    return float(special.stdtr(df, t))


def paired_t_one_sided_greater(a, b):
    """Paired t-test of H0: mean(a - b) <= 0 vs H1: mean(a - b) > 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("samples must be finite")
    d = a - b
    if np.all(d == d[0]):
        # constant differences: the t statistic is undefined, and summation
        # rounding can leave sd a hair above zero, so test constancy directly
        raise DegenerateSampleError("degenerate pairing: zero variance")
    sd = float(d.std(ddof=1))
    t = float(d.mean() / (sd / math.sqrt(n)))
    p = student_t_cdf(-t, n - 1)  # = 1 - CDF(t), upper tail without cancellation
    return StatTestResult("paired_t_one_sided_greater", n, t, p,
                          bool(p < 0.05), "H1: mean(a - b) > 0")


def histogram(samples, bin_width=0.05):
    """Fixed-width histogram over [0, 1].

    Bins are [lower, lower + width), except the last bin which closes at 1.0.
    ``bin_width`` must divide 1 evenly.  Returns (bin_lowers, counts).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size and (samples.min() < 0.0 or samples.max() > 1.0):
        raise ValueError("histogram samples must lie in [0, 1]")
    n_bins = int(round(1.0 / bin_width))
    if abs(n_bins * bin_width - 1.0) > 1e-9 or n_bins < 1:
        raise ValueError(f"bin width {bin_width} does not divide 1 evenly")
    idx = np.minimum(np.floor(samples / bin_width).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins) if samples.size else np.zeros(n_bins, dtype=np.int64)
    return np.arange(n_bins) * bin_width, counts.astype(np.int64)
