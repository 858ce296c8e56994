"""Lyapunov analysis: exponents, covariant vectors, dual frames, expansions.

The covariant vectors come from the usual forward-QR / backward-triangular
two-pass scheme with convergence buffers at both orbit ends.  Dual covector
frames are per-step inverses of the full vector frame, which realizes the
oblique projections onto the splitting subspaces.  The split-propagate
expansions evaluate shadowing solutions mode by mode from the covariant
coefficients, with window products of the per-step stretch factors, so no
propagated vector ever leaves its subspace.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from . import systems
from ._sweep import qr_positive, random_orthonormal
from .errors import BoundaryBufferError, DegenerateBasisError, NearTangencyError
from .tangent import ShadowingPair, default_segment_length, flow_field_series
from .adjoint import ShadowingCovector

CENTER_EXPONENT_LIMIT = 0.05
TANGENCY_ANGLE = 1e-3
MAP_BUFFER_STEPS = 50
FLOW_BUFFER_TIME = 10.0


@dataclass
class SplittingData:
    """Exponents, covariant frames, dual frames and stretch factors."""

    orbit: systems.Orbit
    exponents: np.ndarray              # (k,) per step or per unit time
    exponent_stderr: np.ndarray
    vectors: np.ndarray                # (N+1, M, k) unit columns
    stretches: np.ndarray              # (N, k): f_* e^i_n = stretch * e^i_{n+1}
    buffer: int                        # valid indices are buffer..N-buffer
    unstable: list
    stable: list
    center: list
    duals: Optional[np.ndarray] = None  # (N+1, k, M): duals[n, i] pairs e^j -> delta_ij
    diagnostics: dict = field(default_factory=dict)

    @property
    def k(self):
        return self.vectors.shape[2]

    def check_index(self, n):
        lo, hi = self.buffer, self.orbit.num_steps - self.buffer
        if not lo <= n <= hi:
            raise BoundaryBufferError(
                f"index {n} inside the convergence buffer (valid {lo}..{hi})")


def _per_unit(orbit):
    return orbit.dt if orbit.is_flow else 1.0


def default_buffer(orbit):
    if orbit.is_flow:
        return int(round(FLOW_BUFFER_TIME / orbit.dt))
    return MAP_BUFFER_STEPS


def lyapunov_exponents(orbit, k=None, segment_length=None, discard=10, seed=0):
    """Descending exponents with standard errors from segment-wise rates.

    The renormalization cadence must resolve the full spectral spread, not
    just the top exponent, or trailing columns collapse to rounding noise;
    the default keeps segments near one time unit for flows.
    """
    if orbit.num_steps < 1000:
        warnings.warn(f"orbit has only {orbit.num_steps} steps; "
                      "exponent estimates may be poor")
    k = orbit.dim if k is None else k
    if segment_length is None:
        if orbit.is_flow:
            segment_length = max(1, int(round(1.0 / orbit.dt)))
        else:
            segment_length = default_segment_length(orbit.system)
    mats = systems.step_matrices(orbit)
    n = orbit.num_steps
    rng = np.random.default_rng(seed)
    q = random_orthonormal(orbit.dim, k, rng)
    rates = []
    pos = 0
    while pos + segment_length <= n:
        for i in range(pos, pos + segment_length):
            q = mats[i] @ q
        q, r = qr_positive(q)
        d = np.abs(np.diag(r))
        if (d < 1e-300).any():
            raise DegenerateBasisError("rank collapse during exponent sweep")
        rates.append(np.log(d) / (segment_length * _per_unit(orbit)))
        pos += segment_length
    rates = np.array(rates)
    if len(rates) > 2 * discard:
        rates = rates[discard:]
    mean = rates.mean(axis=0)
    stderr = rates.std(axis=0, ddof=1) / np.sqrt(len(rates))
    order = np.argsort(-mean)
    return mean[order], stderr[order]


def clv(orbit, k=None, segment_length=None, buffer=None, seed=0):
    """Covariant vectors by the forward-QR / backward-triangular passes.

    k = M gives the full frame needed for dual covectors and projections.
    """
    k = orbit.dim if k is None else k
    if buffer is None:
        buffer = default_buffer(orbit)
    n = orbit.num_steps
    if 2 * buffer + 10 > n:
        raise ValueError("orbit too short for the convergence buffers")
    mats = systems.step_matrices(orbit)
    m = orbit.dim
    rng = np.random.default_rng(seed)

    qs = np.empty((n + 1, m, k))
    rs = np.empty((n, k, k))
    q = random_orthonormal(m, k, rng)
    qs[0] = q
    for i in range(n):
        q, r = qr_positive(mats[i] @ q)
        qs[i + 1] = q
        rs[i] = r
        if (np.abs(np.diag(r)) < 1e-300).any():
            raise DegenerateBasisError(f"rank collapse at step {i + 1}")

    # backward pass: coefficients of the covariant vectors in the Q bases
    vectors = np.empty((n + 1, m, k))
    a = np.triu(rng.standard_normal((k, k)))
    np.fill_diagonal(a, 1.0)
    a /= np.linalg.norm(a, axis=0)
    vectors[n] = qs[n] @ a
    for i in range(n - 1, -1, -1):
        a = solve_triangular(rs[i], a)
        a /= np.linalg.norm(a, axis=0)
        vectors[i] = qs[i] @ a

    # per-step stretch factors and covariance residuals on the valid window
    stretches = np.empty((n, k))
    img = np.einsum("nij,njk->nik", mats, vectors[:-1])
    mag = np.linalg.norm(img, axis=1)
    sign = np.sign(np.einsum("nik,nik->nk", img, vectors[1:]))
    sign[sign == 0.0] = 1.0
    stretches[:] = mag * sign
    resid = img - stretches[:, None, :] * vectors[1:]
    cov_resid = np.linalg.norm(resid, axis=1) / mag
    lo, hi = buffer, n - buffer

    per = _per_unit(orbit)
    logs = np.log(np.abs(stretches[lo:hi]))
    exps = logs.mean(axis=0) / per
    nseg = max(2, logs.shape[0] // 50)
    seg = logs[: (logs.shape[0] // nseg) * nseg].reshape(nseg, -1, k)
    stderr = seg.mean(axis=1).std(axis=0, ddof=1) / np.sqrt(nseg) / per

    unstable, stable, center = _classify(orbit, exps, vectors, lo, hi)
    split = SplittingData(
        orbit=orbit, exponents=exps, exponent_stderr=stderr,
        vectors=vectors, stretches=stretches, buffer=buffer,
        unstable=unstable, stable=stable, center=center,
        diagnostics={"covariance_residual": float(cov_resid[lo:hi].max())})
    if center:
        _orient_center(split)
    _tangency_check(split)
    return split


def _classify(orbit, exps, vectors, lo, hi):
    unstable, stable, center = [], [], []
    if orbit.is_flow:
        f = flow_field_series(orbit)
        fhat = f / np.linalg.norm(f, axis=1, keepdims=True)
        align = np.abs(np.einsum("ni,nik->nk", fhat[lo:hi],
                                 vectors[lo:hi])).mean(axis=0)
        candidates = [i for i in range(len(exps))
                      if abs(exps[i]) < CENTER_EXPONENT_LIMIT]
        if candidates:
            center = [max(candidates, key=lambda i: align[i])]
    for i in range(len(exps)):
        if i in center:
            continue
        (unstable if exps[i] > 0 else stable).append(i)
    return unstable, stable, center


def _orient_center(split):
    # sign-align the center vector with F and rescale stretches accordingly
    c = split.center[0]
    f = flow_field_series(split.orbit)
    dots = np.einsum("ni,ni->n", split.vectors[:, :, c], f)
    flip = np.sign(dots)
    flip[flip == 0.0] = 1.0
    split.vectors[:, :, c] *= flip[:, None]
    split.stretches[:, c] *= flip[:-1] * flip[1:]


def _tangency_check(split):
    lo, hi = split.buffer, split.orbit.num_steps - split.buffer
    v = split.vectors[lo:hi]
    k = split.k
    worst = np.pi / 2
    for i in range(k):
        for j in range(i + 1, k):
            cosang = np.abs(np.einsum("ni,ni->n", v[:, :, i], v[:, :, j]))
            worst = min(worst, float(np.arccos(np.clip(cosang, 0, 1)).min()))
    split.diagnostics["min_angle"] = worst
    if worst < TANGENCY_ANGLE:
        warnings.warn(f"near-tangency: minimal subspace angle {worst:.2e} rad")


def adjoint_clvs(split):
    """Fill the dual covector frame by per-step inversion of the CLV frame."""
    orbit = split.orbit
    n = orbit.num_steps
    if split.k != orbit.dim:
        raise ValueError("dual frame needs the full CLV frame (k = M)")
    conds = np.linalg.cond(split.vectors)
    if conds.max() > 1e12:
        raise NearTangencyError(
            f"CLV frame condition {conds.max():.2e}; cannot invert")
    split.duals = np.linalg.inv(split.vectors)
    if split.center:
        # normalize the center dual so its pairing with F is one
        c = split.center[0]
        f = flow_field_series(orbit)
        scale = np.einsum("ni,ni->n", split.duals[:, c, :], f)
        split.duals[:, c, :] /= scale[:, None]
        split.vectors[:, :, c] *= scale[:, None]
        split.stretches[:, c] *= scale[1:] / scale[:-1]
    split.diagnostics["frame_condition"] = float(conds.max())
    return split


def compute_splitting(orbit, segment_length=None, buffer=None, seed=0):
    """Full splitting: CLVs plus dual frames in one call."""
    return adjoint_clvs(clv(orbit, k=orbit.dim, segment_length=segment_length,
                            buffer=buffer, seed=seed))


_SUBSPACES = {"unstable", "stable", "center"}


def _indices(split, subspace):
    if subspace not in _SUBSPACES:
        raise ValueError(f"subspace must be one of {sorted(_SUBSPACES)}")
    return getattr(split, subspace)


def project(split, n, w, subspace, dual=False):
    """Oblique projection of a vector (or covector when dual=True) at step n."""
    split.check_index(n)
    if split.duals is None:
        raise ValueError("projections need dual frames; run adjoint_clvs first")
    idx = _indices(split, subspace)
    w = np.asarray(w, dtype=float)
    out = np.zeros_like(w)
    for i in idx:
        if dual:
            out += (w @ split.vectors[n, :, i]) * split.duals[n, i]
        else:
            out += (split.duals[n, i] @ w) * split.vectors[n, :, i]
    return out


# ---------------------------------------------------------------------------
# split-propagate expansions

def expansion_indices(split, n_max):
    lo = split.buffer + n_max
    hi = split.orbit.num_steps - split.buffer - n_max
    if hi < lo:
        raise ValueError("orbit too short for the requested expansion window")
    return np.arange(lo, hi + 1)


def expand_shadowing_vector(orbit, split, n_max, indices=None):
    """Truncated split-propagate expansion of the shadowing vector.

    Stable modal content is summed from the past, unstable content from the
    future; for flows the center forcing component becomes the time dilation.
    Only valid at indices a full window away from the convergence buffers.
    """
    if split.duals is None:
        raise ValueError("expansion needs dual frames; run adjoint_clvs first")
    idx = expansion_indices(split, n_max) if indices is None else np.asarray(indices)
    x = _forcing_series(orbit)
    dt = orbit.dt if orbit.is_flow else None
    weights = _trapezoid_weights(n_max, dt) if orbit.is_flow else None

    n_lo_u = 0 if orbit.is_flow else 1
    v = np.zeros((idx.size, orbit.dim))
    for i in split.stable:
        c = np.einsum("nj,nj->n", split.duals[:, i, :], x)
        s = _modal_window(c, split.stretches[:, i], n_max, idx,
                          source="past", invert=False, n_lo=0, weights=weights)
        v += s[:, None] * split.vectors[idx, :, i]
    for i in split.unstable:
        c = np.einsum("nj,nj->n", split.duals[:, i, :], x)
        s = _modal_window(c, split.stretches[:, i], n_max, idx,
                          source="future", invert=True, n_lo=n_lo_u,
                          weights=weights)
        v -= s[:, None] * split.vectors[idx, :, i]

    eta = None
    if orbit.is_flow:
        cidx = split.center[0]
        eta = np.einsum("nj,nj->n", split.duals[idx, cidx, :], x[idx])
    pair = ShadowingPair(orbit=orbit, v=v, eta=eta,
                         diagnostics={"indices": idx,
                                      "tail_bound": _tail_bound(split, x, n_max)})
    return pair


def expand_shadowing_covector(orbit, split, omega=None, psi=None, n_max=40,
                              indices=None, omega_values=None, psi_values=None):
    """Truncated split-propagate expansion of the shadowing covector.

    Stable dual content is summed from the future, unstable dual content
    from the past.  For flows the center term is + psi eps^c, matching the
    nu(F) = psi orientation of the nonintrusive flow solve, which flips the
    stable/unstable signs relative to the map case.
    """
    if split.duals is None:
        raise ValueError("expansion needs dual frames; run adjoint_clvs first")
    idx = expansion_indices(split, n_max) if indices is None else np.asarray(indices)
    if omega is None and omega_values is None:
        omega = orbit.system.d_observable
    if omega_values is None:
        w = np.asarray(omega(orbit.states), dtype=float)
    else:
        w = np.asarray(omega_values, dtype=float)
    dt = orbit.dt if orbit.is_flow else None
    weights = _trapezoid_weights(n_max, dt) if orbit.is_flow else None
    sign = -1.0 if orbit.is_flow else 1.0

    n_lo_u = 0 if orbit.is_flow else 1
    nu = np.zeros((idx.size, orbit.dim))
    for i in split.stable:
        d = np.einsum("nj,nj->n", w, split.vectors[:, :, i])
        s = _modal_window(d, split.stretches[:, i], n_max, idx,
                          source="future", invert=False, n_lo=0, weights=weights)
        nu += sign * s[:, None] * split.duals[idx, i, :]
    for i in split.unstable:
        d = np.einsum("nj,nj->n", w, split.vectors[:, :, i])
        s = _modal_window(d, split.stretches[:, i], n_max, idx,
                          source="past", invert=True, n_lo=n_lo_u,
                          weights=weights)
        nu -= sign * s[:, None] * split.duals[idx, i, :]

    if orbit.is_flow:
        if psi_values is None:
            psi_values = np.asarray(psi(orbit.states), dtype=float)
        cidx = split.center[0]
        nu += psi_values[idx, None] * split.duals[idx, cidx, :]
    cov = ShadowingCovector(orbit=orbit, nu=nu,
                            diagnostics={"indices": idx,
                                         "tail_bound": _tail_bound(split, w, n_max)})
    return cov


def _modal_window(coeff, stretch, n_max, idx, source, invert, n_lo, weights=None):
    """Window sums of modal coefficients carried by stretch products.

    source="past" pulls coeff[j-n] into j across the product of stretches
    over [j-n, j); source="future" pulls coeff[j+n] across [j, j+n).  invert
    divides by the product instead (propagation against the stretch), which
    is the decaying direction for unstable modes.  The pullback of a dual
    covector scales by the same per-step stretch as its tangent vector, so
    the covector expansions reuse this with source and invert swapped.
    Cumulative log/sign sums keep window products overflow-free.
    """
    lcum = np.concatenate([[0.0], np.cumsum(np.log(np.abs(stretch)))])
    sign = np.sign(stretch)
    sign[sign == 0.0] = 1.0
    scum = np.concatenate([[1.0], np.cumprod(sign)])
    out = np.zeros(idx.shape)
    for n in range(n_lo, n_max + 1):
        if source == "past":
            src = idx - n
            logp = lcum[idx] - lcum[src]
        else:
            src = idx + n
            logp = lcum[src] - lcum[idx]
        if invert:
            logp = -logp
        w = 1.0 if weights is None else weights[n]
        out += w * coeff[src] * (scum[idx] * scum[src]) * np.exp(logp)
    return out


def _trapezoid_weights(n_max, dt):
    w = np.full(n_max + 1, dt)
    w[0] = 0.5 * dt
    w[-1] = 0.5 * dt
    return w


def _forcing_series(orbit):
    """Perturbation vector at every orbit point (maps use the preimage rule)."""
    sys = orbit.system
    if orbit.is_flow:
        return sys.dparam(orbit.states)
    x = np.empty_like(orbit.states)
    x[1:] = sys.dparam(orbit.states[:-1])
    x[0] = sys.dparam(orbit.pre_state) if orbit.pre_state is not None else x[1]
    return x


def _tail_bound(split, fields, n_max):
    """Crude empirical tail bound C * lambda^{n_max} for the reports."""
    per = _per_unit(split.orbit)
    lam = []
    for i in split.stable:
        lam.append(np.exp(split.exponents[i] * per))
    for i in split.unstable:
        lam.append(np.exp(-split.exponents[i] * per))
    if not lam:
        return 0.0
    lam = max(lam)
    c = float(np.abs(fields).max())
    scale = per if split.orbit.is_flow else 1.0
    return c * scale * lam ** n_max / max(1e-12, 1.0 - lam)
