"""Parameterized dynamical systems, their linearizations, and orbit generation.

A SystemSpec bundles the map or vector field together with its analytic
Jacobian action, the parameter-derivative field, and the observable whose
long-time average is differentiated.  All state-valued callables broadcast
over leading axes, states living on the last axis of length ``dim``.

For flows every propagation uses the classical fourth-order explicit
one-step scheme; tangent steps use its exact state derivative and covector
steps use the transpose of that matrix, so tangent/adjoint duality holds to
machine precision per step.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DivergenceError, KindMismatchError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class SystemSpec:
    """A map (kind="map") or flow (kind="flow") with parameter gamma."""

    name: str
    kind: str
    dim: int
    evaluate: Callable        # maps: f(x, gamma); flows: F(x) + gamma*X(x)
    jacobian: Callable        # d evaluate / d state, shape (..., dim, dim)
    dparam: Callable          # maps: df/dgamma(x); flows: X(x)
    observable: Callable
    d_observable: Callable
    unstable_dim: int
    lyap_max: float           # rough top exponent per step / unit time
    default_x0: np.ndarray
    in_bounds: Callable       # states (..., dim) -> bool array
    drift: Optional[Callable] = None   # flows only: F(x) at base parameter
    default_dt: Optional[float] = None
    default_spinup: Optional[float] = None  # steps (maps) or time (flows)
    wrap: bool = False        # torus systems store states in [0, 1)

    @property
    def is_flow(self):
        return self.kind == "flow"


@dataclass(eq=False)
class Orbit:
    """A finite trajectory on the attractor after spin-up."""

    system: SystemSpec
    gamma: float
    states: np.ndarray                  # (N+1, dim)
    dt: Optional[float] = None
    spinup: int = 0
    seed: Optional[int] = None
    pre_state: Optional[np.ndarray] = None  # maps: last spin-up state x_{-1}
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_steps(self):
        return self.states.shape[0] - 1

    @property
    def dim(self):
        return self.states.shape[1]

    @property
    def is_flow(self):
        return self.system.is_flow

    @property
    def total_time(self):
        return None if self.dt is None else self.num_steps * self.dt

    def observable_series(self):
        return self.system.observable(self.states)


# ---------------------------------------------------------------------------
# single steps

def map_step(sys, x, gamma):
    """One application of the map at parameter gamma."""
    if sys.kind != "map":
        raise KindMismatchError(f"map_step called on {sys.kind} system {sys.name!r}")
    return sys.evaluate(np.asarray(x, dtype=float), gamma)


def _rk4_state(sys, x, gamma, dt):
    f = sys.evaluate
    k1 = f(x, gamma)
    k2 = f(x + 0.5 * dt * k1, gamma)
    k3 = f(x + 0.5 * dt * k2, gamma)
    k4 = f(x + dt * k3, gamma)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def flow_step(sys, x, gamma, dt):
    """Advance a flow state by time dt with the fourth-order one-step scheme."""
    if sys.kind != "flow":
        raise KindMismatchError(f"flow_step called on {sys.kind} system {sys.name!r}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    out = _rk4_state(sys, x, gamma, dt)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite state after flow step of {sys.name!r}")
    return out


def _rk4_substates(sys, x, gamma, dt):
    f = sys.evaluate
    k1 = f(x, gamma)
    x2 = x + 0.5 * dt * k1
    k2 = f(x2, gamma)
    x3 = x + 0.5 * dt * k2
    k3 = f(x3, gamma)
    x4 = x + dt * k3
    k4 = f(x4, gamma)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x_next, (x, x2, x3, x4)


def flow_step_matrix(sys, x, gamma, dt):
    """State after one step and the exact derivative matrix of that step."""
    x_next, xs, mats = _flow_step_data(sys, x, gamma, dt)
    return x_next, mats


def _flow_step_data(sys, x, gamma, dt):
    """One step: next state, substep states, and the discrete tangent matrix."""
    x_next, (x1, x2, x3, x4) = _rk4_substates(sys, x, gamma, dt)
    a1 = sys.jacobian(x1, gamma)
    a2 = sys.jacobian(x2, gamma)
    a3 = sys.jacobian(x3, gamma)
    a4 = sys.jacobian(x4, gamma)
    eye = np.eye(sys.dim)
    m1 = a1
    m2 = a2 @ (eye + 0.5 * dt * m1)
    m3 = a3 @ (eye + 0.5 * dt * m2)
    m4 = a4 @ (eye + dt * m3)
    d = eye + (dt / 6.0) * (m1 + 2.0 * m2 + 2.0 * m3 + m4)
    return x_next, (x1, x2, x3, x4), d


def _forcing_push(field_vals, jacs, dt):
    """Integral of a forcing field over one step, propagated to the right end.

    field_vals holds the field at the four substep states; matches the
    derivative of the discrete step with respect to an additive forcing.
    """
    g1, g2, g3, g4 = field_vals
    _, a2, a3, a4 = jacs
    h2 = g2 + 0.5 * dt * (a2 @ g1)
    h3 = g3 + 0.5 * dt * (a3 @ h2)
    h4 = g4 + dt * (a4 @ h3)
    return (dt / 6.0) * (g1 + 2.0 * h2 + 2.0 * h3 + h4)


def _forcing_pull(field_vals, jacs, dt):
    """Integral of a covector forcing over one step, pulled to the left end."""
    g1, g2, g3, g4 = field_vals
    a1, a2, a3, _ = jacs
    h2 = g3 + 0.5 * dt * (a3.T @ g4)
    h3 = g2 + 0.5 * dt * (a2.T @ h2)
    h4 = g1 + dt * (a1.T @ h3)
    return (dt / 6.0) * (g4 + 2.0 * h2 + 2.0 * h3 + h4)


def pushforward(sys, x, gamma, w, dt=None):
    """Tangent action: Jacobian-vector product (maps) or tangent step (flows)."""
    w = np.asarray(w, dtype=float)
    if sys.kind == "map":
        return sys.jacobian(np.asarray(x, dtype=float), gamma) @ w
    if dt is None:
        raise ValueError("flows need dt for the tangent step")
    _, _, d = _flow_step_data(sys, np.asarray(x, dtype=float), gamma, dt)
    return d @ w


def pullback(sys, x, gamma, eta, dt=None):
    """Covector action: exact adjoint of pushforward at the same point."""
    eta = np.asarray(eta, dtype=float)
    if sys.kind == "map":
        return sys.jacobian(np.asarray(x, dtype=float), gamma).T @ eta
    if dt is None:
        raise ValueError("flows need dt for the covector step")
    _, _, d = _flow_step_data(sys, np.asarray(x, dtype=float), gamma, dt)
    return d.T @ eta


def perturbation_at(orbit, n):
    """Inhomogeneous forcing vector at orbit index n.

    For maps this is the parameter derivative evaluated at the preimage of
    x_n, so index 0 needs the stored pre-spin-up state.  For flows it is the
    perturbation field at x_n.
    """
    if not 0 <= n <= orbit.num_steps:
        raise IndexError(f"orbit index {n} out of range 0..{orbit.num_steps}")
    sys = orbit.system
    if sys.is_flow:
        return sys.dparam(orbit.states[n])
    if n == 0:
        if orbit.pre_state is None:
            raise IndexError("forcing at index 0 needs an orbit with spin-up "
                             "(no preimage state stored)")
        return sys.dparam(orbit.pre_state)
    return sys.dparam(orbit.states[n - 1])


# ---------------------------------------------------------------------------
# orbit generation

def generate_orbit(sys, gamma=0.0, n_steps=1000, spinup=None, seed=None,
                   x0=None, dt=None):
    """Deterministic orbit of n_steps steps after discarding the spin-up.

    spinup counts steps for maps and time for flows (defaults per system).
    x0 overrides the seeded initial condition.
    """
    if n_steps <= 0:
        raise ValueError("n_steps must be positive")
    if sys.is_flow:
        dt = sys.default_dt if dt is None else float(dt)
        if dt is None or dt <= 0:
            raise ValueError("flows need a positive dt")
    spin = sys.default_spinup if spinup is None else spinup
    spin_steps = int(round(spin / dt)) if sys.is_flow else int(spin)
    if spin_steps < 0:
        raise ValueError("spinup must be nonnegative")

    if x0 is None:
        rng = np.random.default_rng(0 if seed is None else seed)
        x = sys.default_x0 + 0.1 * rng.standard_normal(sys.dim)
        if sys.wrap:
            x = np.mod(x, 1.0)
    else:
        x = np.asarray(x0, dtype=float).copy()

    pre_state = None
    if sys.is_flow:
        for _ in range(spin_steps):
            x = _rk4_state(sys, x, gamma, dt)
        states = np.empty((n_steps + 1, sys.dim))
        states[0] = x
        for n in range(n_steps):
            x = _rk4_state(sys, x, gamma, dt)
            states[n + 1] = x
    else:
        for k in range(spin_steps):
            if k == spin_steps - 1:
                pre_state = x.copy()
            x = sys.evaluate(x, gamma)
        states = np.empty((n_steps + 1, sys.dim))
        states[0] = x
        for n in range(n_steps):
            x = sys.evaluate(x, gamma)
            states[n + 1] = x

    bad = ~(np.all(np.isfinite(states), axis=1) & sys.in_bounds(states))
    if bad.any():
        step = int(np.argmax(bad))
        raise DivergenceError(
            f"orbit of {sys.name!r} left the declared bounded region at step {step}",
            step=step)
    return Orbit(system=sys, gamma=gamma, states=states,
                 dt=dt if sys.is_flow else None,
                 spinup=spin_steps, seed=seed, pre_state=pre_state)


# ---------------------------------------------------------------------------
# cached per-orbit step data for the solvers

def step_matrices(orbit):
    """Discrete tangent matrices D_n with x_{n+1} = f(x_n), shape (N, M, M)."""
    mats = orbit._cache.get("mats")
    if mats is None:
        sys = orbit.system
        if sys.is_flow:
            _build_flow_cache(orbit)
            mats = orbit._cache["mats"]
        else:
            mats = sys.jacobian(orbit.states[:-1], orbit.gamma)
            orbit._cache["mats"] = mats
    return mats


def tangent_forcing(orbit):
    """Per-step forcing of the parameter perturbation, pushed to step ends.

    Position n holds the forcing entering v_{n+1} = D_n v_n + G_n.
    """
    forcing = orbit._cache.get("tangent_forcing")
    if forcing is None:
        sys = orbit.system
        if sys.is_flow:
            _build_flow_cache(orbit)
            forcing = orbit._cache["tangent_forcing"]
        else:
            forcing = sys.dparam(orbit.states[:-1])
            orbit._cache["tangent_forcing"] = forcing
    return forcing


def _flow_substates(orbit):
    """Vectorized RK4 substep states and Jacobians for every orbit step."""
    sys, dt, gamma = orbit.system, orbit.dt, orbit.gamma
    x1 = orbit.states[:-1]
    k1 = sys.evaluate(x1, gamma)
    x2 = x1 + 0.5 * dt * k1
    k2 = sys.evaluate(x2, gamma)
    x3 = x1 + 0.5 * dt * k2
    k3 = sys.evaluate(x3, gamma)
    x4 = x1 + dt * k3
    xs = (x1, x2, x3, x4)
    jacs = tuple(sys.jacobian(x, gamma) for x in xs)
    return xs, jacs


def _build_flow_cache(orbit):
    sys, dt = orbit.system, orbit.dt
    xs, (a1, a2, a3, a4) = _flow_substates(orbit)
    eye = np.eye(sys.dim)
    m1 = a1
    m2 = a2 @ (eye + 0.5 * dt * m1)
    m3 = a3 @ (eye + 0.5 * dt * m2)
    m4 = a4 @ (eye + dt * m3)
    orbit._cache["mats"] = eye + (dt / 6.0) * (m1 + 2.0 * m2 + 2.0 * m3 + m4)

    g1, g2, g3, g4 = (sys.dparam(x) for x in xs)
    h2 = g2 + 0.5 * dt * np.einsum("nij,nj->ni", a2, g1)
    h3 = g3 + 0.5 * dt * np.einsum("nij,nj->ni", a3, h2)
    h4 = g4 + dt * np.einsum("nij,nj->ni", a4, h3)
    orbit._cache["tangent_forcing"] = (dt / 6.0) * (g1 + 2.0 * h2 + 2.0 * h3 + h4)


def covector_forcing(orbit, omega, values=None):
    """Per-step covector forcing pulled to step starts, shape (N, M).

    Position n holds the forcing entering nu_n = D_n^T nu_{n+1} +/- W_n.
    For maps this is omega at x_n.  For flows the field is integrated over
    the step; grid `values` (N+1, M) are interpolated linearly in time.
    """
    sys = orbit.system
    if not sys.is_flow:
        if values is not None:
            return np.asarray(values, dtype=float)[:-1]
        return np.asarray(omega(orbit.states[:-1]), dtype=float)
    dt = orbit.dt
    xs, (a1, a2, a3, _) = _flow_substates(orbit)
    if values is None:
        w1, w2, w3, w4 = (np.asarray(omega(x), dtype=float) for x in xs)
    else:
        vals = np.asarray(values, dtype=float)
        w1 = vals[:-1]
        w4 = vals[1:]
        w2 = w3 = 0.5 * (w1 + w4)
    h2 = w3 + 0.5 * dt * np.einsum("nji,nj->ni", a3, w4)
    h3 = w2 + 0.5 * dt * np.einsum("nji,nj->ni", a2, h2)
    h4 = w1 + dt * np.einsum("nji,nj->ni", a1, h3)
    return (dt / 6.0) * (w4 + 2.0 * h2 + 2.0 * h3 + h4)


def drift_series(orbit):
    """F(x_n) at the base parameter along a flow orbit, shape (N+1, M)."""
    if not orbit.is_flow:
        raise KindMismatchError("drift_series needs a flow orbit")
    f = orbit._cache.get("drift")
    if f is None:
        f = orbit.system.drift(orbit.states)
        orbit._cache["drift"] = f
    return f


# ---------------------------------------------------------------------------
# benchmark catalog

def _box_bounds(lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    def check(states):
        states = np.atleast_2d(states)
        return np.all((states >= lo) & (states <= hi), axis=-1)
    return check


def doubling_map():
    """Circle doubling map f(x) = 2x + gamma mod 1; expanding, u = 1."""
    def evaluate(x, gamma):
        return np.mod(2.0 * x + gamma, 1.0)

    def jacobian(x, gamma):
        return np.broadcast_to(np.array([[2.0]]), x.shape + (1,)).copy()

    def dparam(x):
        return np.ones_like(np.asarray(x, dtype=float))

    def observable(x):
        return np.sin(TWO_PI * x[..., 0])

    def d_observable(x):
        return TWO_PI * np.cos(TWO_PI * x[..., :1]) * np.ones_like(x[..., :1])

    return SystemSpec(
        name="doubling", kind="map", dim=1,
        evaluate=evaluate, jacobian=jacobian, dparam=dparam,
        observable=observable, d_observable=d_observable,
        unstable_dim=1, lyap_max=np.log(2.0),
        default_x0=np.array([0.37]), in_bounds=_box_bounds([-0.0], [1.0]),
        default_spinup=1000, wrap=True)


def cat_map():
    """Perturbed Arnold cat map on the 2-torus; u = 1, s = 1."""
    def evaluate(x, gamma):
        a = x[..., 0]
        b = x[..., 1]
        return np.stack([np.mod(2.0 * a + b + gamma * np.sin(TWO_PI * a), 1.0),
                         np.mod(a + b, 1.0)], axis=-1)

    def jacobian(x, gamma):
        a = x[..., 0]
        j = np.empty(a.shape + (2, 2))
        j[..., 0, 0] = 2.0 + gamma * TWO_PI * np.cos(TWO_PI * a)
        j[..., 0, 1] = 1.0
        j[..., 1, 0] = 1.0
        j[..., 1, 1] = 1.0
        return j

    def dparam(x):
        return np.stack([np.sin(TWO_PI * x[..., 0]),
                         np.zeros_like(x[..., 1])], axis=-1)

    def observable(x):
        return np.sin(TWO_PI * (x[..., 0] + x[..., 1]))

    def d_observable(x):
        c = TWO_PI * np.cos(TWO_PI * (x[..., 0] + x[..., 1]))
        return np.stack([c, c], axis=-1)

    return SystemSpec(
        name="cat", kind="map", dim=2,
        evaluate=evaluate, jacobian=jacobian, dparam=dparam,
        observable=observable, d_observable=d_observable,
        unstable_dim=1, lyap_max=np.log((3.0 + np.sqrt(5.0)) / 2.0),
        default_x0=np.array([0.21, 0.54]), in_bounds=_box_bounds([0, 0], [1, 1]),
        default_spinup=1000, wrap=True)


def contracting_map():
    """Stable sanity map f(x) = x/2 + gamma; fixed point 2*gamma, u = 0."""
    def evaluate(x, gamma):
        return 0.5 * x + gamma

    def jacobian(x, gamma):
        return np.broadcast_to(np.array([[0.5]]), x.shape + (1,)).copy()

    def dparam(x):
        return np.ones_like(np.asarray(x, dtype=float))

    def observable(x):
        return x[..., 0]

    def d_observable(x):
        return np.ones_like(x[..., :1])

    return SystemSpec(
        name="contracting", kind="map", dim=1,
        evaluate=evaluate, jacobian=jacobian, dparam=dparam,
        observable=observable, d_observable=d_observable,
        unstable_dim=0, lyap_max=-np.log(2.0),
        default_x0=np.array([0.5]), in_bounds=_box_bounds([-100.0], [100.0]),
        default_spinup=1000, wrap=False)


LORENZ_SIGMA = 10.0
LORENZ_BETA = 8.0 / 3.0
LORENZ_RHO = 28.0


def lorenz63():
    """Lorenz 63 flow at (10, 8/3, 28); gamma perturbs rho via X = (0, x, 0)."""
    sig, beta, rho = LORENZ_SIGMA, LORENZ_BETA, LORENZ_RHO

    def drift(x):
        a = x[..., 0]
        b = x[..., 1]
        c = x[..., 2]
        return np.stack([sig * (b - a), a * (rho - c) - b, a * b - beta * c],
                        axis=-1)

    def evaluate(x, gamma):
        out = drift(x)
        if gamma != 0.0:
            out = out + gamma * dparam(x)
        return out

    def jacobian(x, gamma):
        a = x[..., 0]
        b = x[..., 1]
        c = x[..., 2]
        j = np.zeros(a.shape + (3, 3))
        j[..., 0, 0] = -sig
        j[..., 0, 1] = sig
        j[..., 1, 0] = rho + gamma - c
        j[..., 1, 1] = -1.0
        j[..., 1, 2] = -a
        j[..., 2, 0] = b
        j[..., 2, 1] = a
        j[..., 2, 2] = -beta
        return j

    def dparam(x):
        z = np.zeros_like(x[..., 0])
        return np.stack([z, x[..., 0], z], axis=-1)

    def observable(x):
        return x[..., 2]

    def d_observable(x):
        out = np.zeros_like(x)
        out[..., 2] = 1.0
        return out

    return SystemSpec(
        name="lorenz63", kind="flow", dim=3,
        evaluate=evaluate, jacobian=jacobian, dparam=dparam,
        observable=observable, d_observable=d_observable,
        unstable_dim=1, lyap_max=0.91,
        default_x0=np.array([2.0, 4.0, 25.0]),
        in_bounds=_box_bounds([-60.0, -80.0, -20.0], [60.0, 80.0, 90.0]),
        drift=drift, default_dt=0.005, default_spinup=50.0, wrap=False)


CATALOG = {
    "doubling": doubling_map,
    "cat": cat_map,
    "contracting": contracting_map,
    "lorenz63": lorenz63,
}


def get_system(name):
    try:
        return CATALOG[name]()
    except KeyError:
        raise KeyError(f"unknown system {name!r}; known: {sorted(CATALOG)}") from None
