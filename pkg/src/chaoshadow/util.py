"""Small numeric helpers used by several modules."""

import numpy as np

# Interior convention for comparisons: boundary layers of the nonintrusive
# solves decay like lambda^n, so estimates skip a margin at both orbit ends.
MAP_EDGE_STEPS = 30
FLOW_EDGE_TIME = 5.0


def batch_mean_stderr(series, n_batches=20):
    """Mean and batch-means standard error of an autocorrelated series."""
    series = np.asarray(series, dtype=float)
    n = series.size
    if n == 0:
        return 0.0, 0.0
    mean = float(series.mean())
    if n < 2 * n_batches:
        n_batches = max(2, n // 2)
    if n < 4:
        return mean, float(series.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    size = n // n_batches
    trimmed = series[: size * n_batches].reshape(n_batches, size)
    bm = trimmed.mean(axis=1)
    se = float(bm.std(ddof=1) / np.sqrt(n_batches))
    return mean, se


def interior_slice(orbit, margin=None):
    """Index slice excluding the boundary layers at both ends of an orbit."""
    if margin is None:
        if orbit.is_flow:
            margin = int(round(FLOW_EDGE_TIME / orbit.dt))
        else:
            margin = MAP_EDGE_STEPS
    n = orbit.num_steps
    if 2 * margin >= n:
        raise ValueError(f"orbit too short for interior margin {margin}")
    return slice(margin, n + 1 - margin)


def window_products(log_abs, signs, start, length):
    """Product of factors[start:start+length] from cached logs and signs."""
    return signs[start:start + length].prod() * np.exp(
        log_abs[start:start + length].sum())
