"""Adjoint (backpropagation) solvers and the nonintrusive adjoint shadowing solves.

Maps follow the backward recursion nu_n = f^* nu_{n+1} + omega_n; the
bounded solution is picked out by orthogonality constraints at step 0
against u pulled-back homogeneous covectors.

Flows use the convention that pins the covector's pairing with the
generating field to the pair's scalar: nu_t(F_t) = psi_t at all times.
With the backward one-step pullback D^T this means the forcing enters with
a minus sign (the recursion discretizes d(nu)/dt = -A^T nu + omega), the
terminal inhomogeneous covector is psi_T F_T / |F_T|^2, and the homogeneous
covectors start orthogonal to F so their conserved F-pairing stays zero.
The response module accounts for the orientation this convention gives the
covector when it assembles sensitivities.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import systems
from ._sweep import (make_boundaries, nonintrusive_solve, particular_sweep,
                     propagate_homogeneous, random_orthonormal)
from .errors import (AdmissibilityError, CenterDegeneracyError,
                     ConfigurationError, KindMismatchError, MagnitudeCapError)
from .tangent import MIN_DRIFT_NORM, _resolve_u, default_segment_length, flow_field_series


@dataclass
class AdjointBundle:
    """Covector solution columns along an orbit, stored forward-indexed."""

    orbit: systems.Orbit
    columns: np.ndarray            # (N+1, M, k), columns[n] lives at x_n
    boundaries: list               # renormalization positions, backward order
    factors: list
    homogeneous: bool
    psi_terminal: Optional[float] = None
    rdiag_logs: np.ndarray = field(default=None, repr=False)

    @property
    def k(self):
        return self.columns.shape[2]


@dataclass
class ShadowingCovector:
    """Bounded inhomogeneous adjoint solution along an orbit."""

    orbit: systems.Orbit
    nu: np.ndarray                 # (N+1, M)
    diagnostics: dict = field(default_factory=dict)


def _backward_mats(orbit):
    mats = systems.step_matrices(orbit)
    return mats.transpose(0, 2, 1)[::-1]


def homogeneous_adjoint(orbit, terminal, segment_length=None):
    """Pull k covectors back from x_N to x_0 with QR renormalization.

    After enough pullback steps the span converges to the unstable dual
    subspace when k equals the unstable dimension.
    """
    if segment_length is None:
        segment_length = default_segment_length(orbit.system, orbit.dt)
    terminal = np.asarray(terminal, dtype=float)
    if terminal.ndim == 1:
        terminal = terminal[:, None]
    bounds = make_boundaries(orbit.num_steps, segment_length, include_end=False)
    cols, factors, logs = propagate_homogeneous(_backward_mats(orbit), terminal,
                                                bounds)
    return AdjointBundle(orbit=orbit, columns=cols[::-1].copy(),
                         boundaries=bounds, factors=factors, homogeneous=True,
                         rdiag_logs=logs)


def inhomogeneous_adjoint(orbit, omega=None, terminal=None, values=None,
                          psi_terminal=None):
    """Conventional backward adjoint sweep with terminal value nu_N.

    For maps the forcing is omega at each point; for flows the covector
    forcing is integrated over each step and enters with the sign of the
    nu(F) = psi convention.  Overflow past the cap reports the orbit step.
    """
    sys = orbit.system
    n = orbit.num_steps
    if omega is None and values is None:
        omega = sys.d_observable
    if sys.is_flow:
        forcing = -systems.covector_forcing(orbit, omega, values)[::-1]
        if terminal is None:
            f_end = flow_field_series(orbit)[-1]
            psi_terminal = 0.0 if psi_terminal is None else float(psi_terminal)
            terminal = psi_terminal * f_end / (f_end @ f_end)
    else:
        if values is not None:
            forcing = np.asarray(values, dtype=float)[:-1][::-1]
        else:
            forcing = np.asarray(omega(orbit.states[:-1]), dtype=float)[::-1]
        if terminal is None:
            terminal = np.zeros(sys.dim)
    try:
        cols = particular_sweep(_backward_mats(orbit), forcing,
                                p0=np.asarray(terminal, dtype=float))
    except MagnitudeCapError as err:
        raise MagnitudeCapError(
            f"adjoint solution exceeded the cap at orbit step {n - err.step}",
            step=n - err.step) from None
    return AdjointBundle(orbit=orbit, columns=cols[::-1, :, None].copy(),
                         boundaries=[], factors=[], homogeneous=False,
                         psi_terminal=psi_terminal)


def nilsas_solve(orbit, omega=None, u=None, segment_length=None, seed=0,
                 values=None):
    """Nonintrusive adjoint shadowing solve for maps.

    nu = nu' + eps a with <nu_0, eps_0> = 0; the backward sweep QR-normalizes
    the homogeneous covectors per segment so the closure stays conditioned.
    """
    if orbit.is_flow:
        raise KindMismatchError("nilsas_solve handles maps; use nilsas_flow_solve")
    u = _resolve_u(orbit, u)
    if segment_length is None:
        segment_length = default_segment_length(orbit.system)
    sys = orbit.system
    if omega is None and values is None:
        omega = sys.d_observable
    if values is not None:
        w = np.asarray(values, dtype=float)[:-1]
    else:
        w = np.asarray(omega(orbit.states[:-1]), dtype=float)
    forcing = w[::-1]
    bounds = make_boundaries(orbit.num_steps, segment_length)
    q0 = None
    if u:
        rng = np.random.default_rng(seed)
        q0 = random_orthonormal(orbit.dim, u, rng)
    res = nonintrusive_solve(_backward_mats(orbit), forcing, q0, bounds)
    nu = res["solution"][::-1].copy()
    diag = _adjoint_diagnostics(res, nu)
    return ShadowingCovector(orbit=orbit, nu=nu, diagnostics=diag)


def nilsas_flow_solve(orbit, omega, psi, u=None, segment_length=None, seed=0,
                      omega_values=None, psi_values=None, admissibility_tol=1e-6):
    """Nonintrusive adjoint shadowing solve for flows.

    omega and psi form an admissible pair (F(psi) = omega(F), checked by
    differencing psi along the flow direction).  The returned covector
    satisfies the backward adjoint recursion, nu_t(F_t) = psi_t along the
    orbit, and <nu_0, eps^i_0> = 0.
    """
    if not orbit.is_flow:
        raise KindMismatchError("nilsas_flow_solve needs a flow orbit")
    u = _resolve_u(orbit, u)
    if segment_length is None:
        segment_length = default_segment_length(orbit.system, orbit.dt)
    f = flow_field_series(orbit)
    fnorm = np.linalg.norm(f, axis=1)
    if fnorm.min() < MIN_DRIFT_NORM * max(1.0, fnorm.max()):
        raise CenterDegeneracyError(
            f"|F| = {fnorm.min():.3e} on the orbit; center direction degenerate")

    psi_series = _psi_series(orbit, psi, psi_values)
    check_admissible(orbit, omega, psi, omega_values=omega_values,
                     psi_values=psi_values, atol=admissibility_tol)

    forcing = -systems.covector_forcing(orbit, omega, omega_values)[::-1]
    p0 = psi_series[-1] * f[-1] / (f[-1] @ f[-1])
    bounds = make_boundaries(orbit.num_steps, segment_length)
    q0 = None
    cleanup = None
    if u:
        rng = np.random.default_rng(seed)
        q0 = random_orthonormal(orbit.dim, u, rng, orth_against=f[-1])
        n = orbit.num_steps

        def cleanup(pos, q):
            # strip numerical drift of the conserved (and zero) F-pairing
            fb = f[n - pos]
            return q - np.outer(fb, (fb @ q) / (fb @ fb))

    res = nonintrusive_solve(_backward_mats(orbit), forcing, q0, bounds,
                             p0=p0, hom_cleanup=cleanup)
    nu = res["solution"][::-1].copy()
    diag = _adjoint_diagnostics(res, nu)
    diag["nu_f_minus_psi"] = np.einsum("ni,ni->n", nu, f) - psi_series
    return ShadowingCovector(orbit=orbit, nu=nu, diagnostics=diag)


def _psi_series(orbit, psi, psi_values):
    if psi_values is not None:
        return np.asarray(psi_values, dtype=float)
    if psi is None:
        raise ValueError("flows need psi (callable or per-step values)")
    return np.asarray(psi(orbit.states), dtype=float)


def check_admissible(orbit, omega, psi, omega_values=None, psi_values=None,
                     atol=1e-6, sample=64):
    """Verify F(psi) = omega(F) along the orbit; raises AdmissibilityError.

    Callable psi is differenced spatially along the flow direction; grid
    values fall back to time differencing, whose truncation error scales
    with dt^2 and widens the tolerance accordingly.
    """
    f = flow_field_series(orbit)
    n = orbit.num_steps
    idx = np.unique(np.linspace(1, n - 1, min(sample, n - 1)).astype(int))
    if omega_values is not None:
        om_f = np.einsum("ni,ni->n", np.asarray(omega_values, dtype=float)[idx],
                         f[idx])
    else:
        om_f = np.einsum("ni,ni->n", np.asarray(omega(orbit.states[idx])), f[idx])
    scale = max(1.0, np.abs(om_f).max())
    if psi_values is None and psi is not None and callable(psi):
        h = 6e-6
        xs = orbit.states[idx]
        fpsi = (np.asarray(psi(xs + h * f[idx])) -
                np.asarray(psi(xs - h * f[idx]))) / (2.0 * h)
        tol = atol * scale
    else:
        vals = _psi_series(orbit, psi, psi_values)
        fpsi = (vals[idx + 1] - vals[idx - 1]) / (2.0 * orbit.dt)
        tol = max(atol, 10.0 * orbit.dt ** 2) * scale
    worst = np.abs(fpsi - om_f).max()
    if worst > tol:
        raise AdmissibilityError(
            f"F(psi) - omega(F) reaches {worst:.3e} (tolerance {tol:.3e})")
    return float(worst)


def _adjoint_diagnostics(res, nu):
    diag = {
        "boundaries": res["boundaries"],
        "rdiag_logs": res["rdiag_logs"],
        "sup_norm": float(np.abs(nu).max()),
    }
    hom = res["homogeneous"]
    if hom is not None:
        end = hom[-1]
        raw = end if not res["factors"] else end @ res["factors"][-1]
        diag["constraint_residual"] = float(np.abs(raw.T @ nu[0]).max())
    return diag
