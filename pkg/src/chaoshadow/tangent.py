"""Tangent solvers and the nonintrusive shadowing solves.

The shadowing vector is the bounded solution of the inhomogeneous tangent
equation along an orbit; it is recovered as a particular solution plus u
homogeneous solutions fixed by orthogonality constraints at the final step.
For flows the solve runs on the projection perpendicular to the flow
direction and the time-dilation function is recovered afterwards from the
balance of the flow-direction components.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import systems
from ._sweep import (make_boundaries, nonintrusive_solve, particular_sweep,
                     propagate_homogeneous, random_orthonormal)
from .errors import CenterDegeneracyError, ConfigurationError, KindMismatchError

MIN_DRIFT_NORM = 1e-8


@dataclass
class TangentBundle:
    """Tangent solution columns along an orbit with per-segment factors."""

    orbit: systems.Orbit
    columns: np.ndarray            # (N+1, M, k)
    boundaries: list
    factors: list                  # upper-triangular (k, k) per boundary
    homogeneous: bool
    rdiag_logs: np.ndarray = field(default=None, repr=False)

    @property
    def k(self):
        return self.columns.shape[2]


@dataclass
class ShadowingPair:
    """Shadowing vector v (and time dilation eta for flows) along an orbit."""

    orbit: systems.Orbit
    v: np.ndarray                  # (N+1, M)
    eta: Optional[np.ndarray]      # (N+1,) for flows, None for maps
    diagnostics: dict = field(default_factory=dict)


def default_segment_length(system, dt=None):
    """Steps per segment keeping the per-segment growth near e^5."""
    lam = system.lyap_max
    if lam <= 0:
        return 50
    per_step = lam * (dt if system.is_flow else 1.0)
    return max(1, int(round(5.0 / per_step)))


def _resolve_u(orbit, u):
    sys = orbit.system
    if u is None:
        return sys.unstable_dim
    if u != sys.unstable_dim:
        raise ConfigurationError(
            f"u={u} inconsistent with the {sys.unstable_dim} positive "
            f"exponents of {sys.name!r}")
    return u


def homogeneous_tangent(orbit, w0, segment_length=None):
    """Propagate k tangent columns forward with QR renormalization.

    Renormalization happens at interior multiples of segment_length, so the
    raw growth within the final partial segment is preserved.
    """
    if segment_length is None:
        segment_length = default_segment_length(orbit.system, orbit.dt)
    mats = systems.step_matrices(orbit)
    bounds = make_boundaries(orbit.num_steps, segment_length, include_end=False)
    cols, factors, logs = propagate_homogeneous(mats, w0, bounds)
    return TangentBundle(orbit=orbit, columns=cols, boundaries=bounds,
                         factors=factors, homogeneous=True, rdiag_logs=logs)


def inhomogeneous_tangent(orbit):
    """Conventional tangent solution with zero initial condition (k = 1)."""
    mats = systems.step_matrices(orbit)
    forcing = systems.tangent_forcing(orbit)
    cols = particular_sweep(mats, forcing)
    return TangentBundle(orbit=orbit, columns=cols[:, :, None], boundaries=[],
                         factors=[], homogeneous=False)


def nilss_solve(orbit, u=None, segment_length=None, seed=0):
    """Nonintrusive shadowing solve for maps.

    Returns the solution of v_{n+1} = f_* v_n + X_{n+1} whose terminal value
    is orthogonal to the u propagated homogeneous solutions, computed
    segment-wise so conditioning stays bounded for long orbits.
    """
    if orbit.is_flow:
        raise KindMismatchError("nilss_solve handles maps; use nilss_flow_solve")
    u = _resolve_u(orbit, u)
    if segment_length is None:
        segment_length = default_segment_length(orbit.system)
    mats = systems.step_matrices(orbit)
    forcing = systems.tangent_forcing(orbit)
    bounds = make_boundaries(orbit.num_steps, segment_length)
    q0 = None
    if u:
        rng = np.random.default_rng(seed)
        q0 = random_orthonormal(orbit.dim, u, rng)
    res = nonintrusive_solve(mats, forcing, q0, bounds)
    v = res["solution"]
    diag = _solve_diagnostics(res, v)
    return ShadowingPair(orbit=orbit, v=v, eta=None, diagnostics=diag)


def nilss_flow_solve(orbit, u=None, segment_length=None, seed=0):
    """Nonintrusive shadowing solve for flows.

    Homogeneous and particular solutions are swept in the subspace
    perpendicular to the generating field, with the terminal constraint on
    those perpendicular projections; the time dilation eta follows from the
    flow-direction balance of the defining equation.
    """
    if not orbit.is_flow:
        raise KindMismatchError("nilss_flow_solve needs a flow orbit")
    u = _resolve_u(orbit, u)
    if segment_length is None:
        segment_length = default_segment_length(orbit.system, orbit.dt)
    f = flow_field_series(orbit)
    fnorm = np.linalg.norm(f, axis=1)
    if fnorm.min() < MIN_DRIFT_NORM * max(1.0, fnorm.max()):
        raise CenterDegeneracyError(
            f"|F| = {fnorm.min():.3e} on the orbit; center direction degenerate")
    mats = systems.step_matrices(orbit)
    forcing = systems.tangent_forcing(orbit)
    bounds = make_boundaries(orbit.num_steps, segment_length)
    q0 = None
    if u:
        rng = np.random.default_rng(seed)
        q0 = random_orthonormal(orbit.dim, u, rng, orth_against=f[0])
    res = nonintrusive_solve(mats, forcing, q0, bounds, perp=f)
    v = res["solution"]
    eta = _eta_from_balance(orbit, v, f)
    diag = _solve_diagnostics(res, v)
    return ShadowingPair(orbit=orbit, v=v, eta=eta, diagnostics=diag)


def flow_field_series(orbit):
    """Generating vector field F + gamma X along a flow orbit."""
    key = "flow_field"
    out = orbit._cache.get(key)
    if out is None:
        out = orbit.system.evaluate(orbit.states, orbit.gamma)
        orbit._cache[key] = out
    return out


def _eta_from_balance(orbit, v, f):
    # v is kept perpendicular to F, so d(v.F)/dt = 0 fixes eta pointwise:
    # eta |F|^2 = (A v + X).F + v.(A F)
    sys = orbit.system
    a = sys.jacobian(orbit.states, orbit.gamma)
    x = sys.dparam(orbit.states)
    av = np.einsum("nij,nj->ni", a, v)
    af = np.einsum("nij,nj->ni", a, f)
    f2 = np.einsum("ni,ni->n", f, f)
    return (np.einsum("ni,ni->n", av + x, f) + np.einsum("ni,ni->n", v, af)) / f2


def _solve_diagnostics(res, v):
    diag = {
        "boundaries": res["boundaries"],
        "rdiag_logs": res["rdiag_logs"],
        "sup_norm": float(np.abs(v).max()),
    }
    hom = res["homogeneous"]
    if hom is not None:
        end = hom[-1]
        raw = end if not res["factors"] else end @ res["factors"][-1]
        diag["terminal_constraint_residual"] = float(
            np.abs(raw.T @ v[-1]).max())
    return diag
