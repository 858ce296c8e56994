"""Segmented propagation core shared by the tangent and adjoint solvers.

Everything here works in propagation order: ``mats[i]`` carries position i
to position i+1, regardless of whether that means forward steps of a tangent
solve or backward pullback steps of an adjoint solve.  A particular solution
plus k homogeneous columns are swept with QR renormalization at segment
boundaries; the terminal orthogonality constraint is then enforced by
back-substituting the per-segment homogeneous coefficients through the
recorded triangular factors, which is the well-conditioned equivalent of
imposing the constraint on the raw, exponentially grown solutions.
"""

import numpy as np
from scipy.linalg import lstsq

from .errors import ConditioningError, DegenerateBasisError, MagnitudeCapError

MAGNITUDE_CAP = 1e250
RDIAG_FLOOR = 1e-300
COND_LIMIT = 1e13


def qr_positive(a):
    """Reduced QR with the sign convention diag(R) >= 0."""
    q, r = np.linalg.qr(a)
    sign = np.sign(np.diag(r))
    sign[sign == 0.0] = 1.0
    return q * sign, sign[:, None] * r


def random_orthonormal(m, k, rng, orth_against=None):
    """k orthonormal columns in R^m, optionally orthogonal to a given vector."""
    w = rng.standard_normal((m, k))
    if orth_against is not None:
        f = orth_against / np.linalg.norm(orth_against)
        w -= np.outer(f, f @ w)
    q, _ = qr_positive(w)
    return q


def make_boundaries(n_steps, segment_length, include_end=True):
    """Renormalization positions: multiples of segment_length up to n_steps."""
    segment_length = int(segment_length)
    if segment_length < 1:
        raise ValueError("segment_length must be >= 1")
    bounds = list(range(segment_length, n_steps, segment_length))
    if include_end:
        bounds.append(n_steps)
    return bounds


def _check_rdiag(r, where):
    d = np.abs(np.diag(r))
    if (d < RDIAG_FLOOR).any():
        raise DegenerateBasisError(
            f"rank collapse at boundary {where}: |R| diagonal {d.min():.3e}")


def propagate_homogeneous(mats, q0, boundaries, perp=None, cap=MAGNITUDE_CAP):
    """Sweep k homogeneous columns with QR renormalization at boundaries.

    Returns (columns, factors, rdiag_logs); columns[i] holds the swept basis
    at position i, renormalized at each boundary position.
    """
    n = len(mats)
    q0 = np.asarray(q0, dtype=float)
    if q0.ndim == 1:
        q0 = q0[:, None]
    m, k = q0.shape
    cols = np.empty((n + 1, m, k))
    cols[0] = q0
    factors = []
    logs = []
    bset = set(boundaries)
    w = q0
    for i in range(n):
        w = mats[i] @ w
        if perp is not None:
            f = perp[i + 1]
            w = w - np.outer(f, (f @ w) / (f @ f))
        if (i + 1) in bset:
            q, r = qr_positive(w)
            _check_rdiag(r, i + 1)
            factors.append(r)
            logs.append(np.log(np.abs(np.diag(r))))
            w = q
        elif np.abs(w).max() > cap:
            raise MagnitudeCapError(
                f"homogeneous solution exceeded {cap:.1e} at position {i + 1}",
                step=i + 1)
        cols[i + 1] = w
    return cols, factors, np.array(logs) if logs else np.empty((0, k))


def particular_sweep(mats, forcing, p0=None, perp=None, cap=MAGNITUDE_CAP):
    """Plain inhomogeneous recursion with an overflow cap, no renormalization."""
    n = len(mats)
    m = mats.shape[1]
    p = np.zeros(m) if p0 is None else np.asarray(p0, dtype=float).copy()
    out = np.empty((n + 1, m))
    out[0] = p
    for i in range(n):
        p = mats[i] @ p + forcing[i]
        if perp is not None:
            f = perp[i + 1]
            p = p - f * ((f @ p) / (f @ f))
        if np.abs(p).max() > cap:
            raise MagnitudeCapError(
                f"inhomogeneous solution exceeded {cap:.1e} at position {i + 1}",
                step=i + 1)
        out[i + 1] = p
    return out


def nonintrusive_solve(mats, forcing, q0, boundaries, p0=None, perp=None,
                       hom_cleanup=None):
    """Particular + homogeneous sweep with the terminal orthogonality closure.

    boundaries must end at len(mats).  At every boundary the homogeneous
    columns are QR-renormalized and the particular solution is orthogonalized
    against them; the k coefficients per segment follow from back-substitution
    with the virtual coefficient after the final boundary set to zero, which
    realizes <solution_end, column_end> = 0.

    hom_cleanup: optional callable (position, columns) -> columns applied to
    the renormalized basis at boundaries (flow solves strip numerical drift
    of conserved pairings there).

    Returns a dict with the reconstructed solution and diagnostics.
    """
    n = len(mats)
    if not boundaries or boundaries[-1] != n:
        raise ValueError("boundaries must end at the final position")
    m = mats.shape[1]
    k = 0 if q0 is None else q0.shape[1]

    hom = np.zeros((n + 1, m, max(k, 1))) if k else None
    part = np.empty((n + 1, m))
    p = np.zeros(m) if p0 is None else np.asarray(p0, dtype=float).copy()
    part[0] = p
    w = None
    if k:
        w = np.asarray(q0, dtype=float).copy()
        hom[0] = w

    factors, proj, logs = [], [], []
    bset = set(boundaries)
    for i in range(n):
        p = mats[i] @ p + forcing[i]
        if k:
            w = mats[i] @ w
        if perp is not None:
            f = perp[i + 1]
            f2 = f @ f
            p = p - f * ((f @ p) / f2)
            if k:
                w = w - np.outer(f, (f @ w) / f2)
        if (i + 1) in bset:
            if k:
                q, r = qr_positive(w)
                _check_rdiag(r, i + 1)
                if hom_cleanup is not None:
                    q = hom_cleanup(i + 1, q)
                b = q.T @ p
                p = p - q @ b
                factors.append(r)
                proj.append(b)
                logs.append(np.log(np.abs(np.diag(r))))
                w = q
        part[i + 1] = p
        if k:
            hom[i + 1] = w

    alphas = np.zeros((len(boundaries), max(k, 1)))
    if k:
        alpha = np.zeros(k)
        for j in reversed(range(len(boundaries))):
            r = factors[j]
            cond = np.linalg.cond(r)
            if cond > COND_LIMIT:
                raise ConditioningError(
                    f"constraint system at boundary {boundaries[j]} has "
                    f"condition {cond:.2e}",
                    diagnostics={"boundary": boundaries[j], "cond": float(cond),
                                 "rdiag": np.diag(r).tolist()})
            alpha, *_ = lstsq(r, alpha - proj[j], lapack_driver="gelsy")
            alphas[j] = alpha

    solution = part.copy()
    if k:
        starts = [0] + list(boundaries[:-1])
        for j, (s, e) in enumerate(zip(starts, boundaries)):
            solution[s:e] += hom[s:e] @ alphas[j]
    return {
        "solution": solution,
        "particular": part,
        "homogeneous": hom,
        "alphas": alphas,
        "factors": factors,
        "rdiag_logs": np.array(logs) if logs else np.empty((0, max(k, 1))),
        "boundaries": list(boundaries),
    }
