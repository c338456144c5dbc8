"""Fixed-step RK4 time integration: full flows, slow subsystem flows,
linear processes (two-parameter semigroups), variational flows, and the
bounded solution that underlies the slow-manifold fixed point.

Only the classic 4th-order Runge-Kutta scheme is provided; reproducibility
of certified numbers matters more than adaptivity here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import FastSlowSystem, GridFunction, as_slow_function
from .errors import (CapabilityError, ContractionError, DomainExitError,
                     PreconditionError)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 0.01
    method: str = "rk4"
    richardson_check: bool = False
    max_steps: int = 5_000_000

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.method != "rk4":
            raise ValueError("only the rk4 method is implemented")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    @staticmethod
    def default_for(mu, N1, diameter, cap=0.01):
        """Default step: min(cap, 0.1 / (mu + N1 * diameter))."""
        return IntegratorConfig(dt=min(cap, 0.1 / (mu + N1 * diameter + 1e-300)))

    def steps_for(self, span):
        n = max(1, int(math.ceil(abs(span) / self.dt - 1e-12)))
        if n > self.max_steps:
            raise ValueError(f"horizon {span} needs {n} steps > max_steps {self.max_steps}")
        return n


def rk4_path(field, u0, t0, t1, n_steps):
    """Integrate u' = field(t, u) from t0 to t1, returning all samples.

    u0 may have any shape; the field must return the same shape.  t1 < t0
    integrates backward.  Returns (times (S+1,), states (S+1,) + u0.shape).
    """
    u = np.array(u0, dtype=float)
    h = (t1 - t0) / n_steps
    times = t0 + h * np.arange(n_steps + 1)
    out = np.empty((n_steps + 1,) + u.shape)
    out[0] = u
    t = t0
    for k in range(n_steps):
        k1 = field(t, u)
        k2 = field(t + h / 2, u + (h / 2) * k1)
        k3 = field(t + h / 2, u + (h / 2) * k2)
        k4 = field(t + h, u + h * k3)
        u = u + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = times[k + 1]
        out[k + 1] = u
    return times, out


def rk4_final(field, u0, t0, t1, n_steps, watcher=None):
    """Streaming RK4; keeps only the current state.  Optional per-step watcher
    callback (t_new, u_new) -> bool may stop the integration early."""
    u = np.array(u0, dtype=float)
    h = (t1 - t0) / n_steps
    t = t0
    for k in range(n_steps):
        k1 = field(t, u)
        k2 = field(t + h / 2, u + (h / 2) * k1)
        k3 = field(t + h / 2, u + (h / 2) * k2)
        k4 = field(t + h, u + h * k3)
        u = u + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t0 + (k + 1) * h
        if watcher is not None and watcher(t, u):
            break
    return t, u


@dataclass
class OrbitPath:
    """A time-sampled trajectory with fast and slow tracks.

    `meta` records integrator step size, truncation horizon, and any flags
    (domain exit, Richardson ratio).
    """

    times: np.ndarray
    fast: np.ndarray
    slow: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        self.times = t
        self.fast = np.asarray(self.fast, dtype=float)
        self.slow = np.asarray(self.slow, dtype=float)
        if self.fast.shape[0] != t.shape[0] or self.slow.shape[0] != t.shape[0]:
            raise ValueError("fast/slow arrays must match times in length")

    def __len__(self):
        return self.times.shape[0]

    def _track(self, component):
        if component == "fast":
            return self.fast
        if component == "slow":
            return self.slow
        if component == "joint":
            return np.concatenate([self.fast, self.slow], axis=-1)
        raise ValueError(component)

    def weighted_norm(self, gamma, component="fast", norm=None):
        """max over samples of e^{gamma |t|} |value(t)|."""
        vals = self._track(component)
        norms = np.linalg.norm(vals, axis=-1) if norm is None else norm(vals)
        return float(np.max(np.exp(gamma * np.abs(self.times)) * norms))

    def at(self, t):
        """Linear interpolation of both tracks at time t."""
        fast = np.stack([np.interp(t, self.times, self.fast[:, i])
                         for i in range(self.fast.shape[1])], axis=-1)
        slow = np.stack([np.interp(t, self.times, self.slow[:, i])
                         for i in range(self.slow.shape[1])], axis=-1)
        return fast, slow


def _full_field(sys):
    m = sys.m

    def field(t, u):
        x, y = u[..., :m], u[..., m:]
        return np.concatenate([sys.eval_F(x, y), sys.eval_g(x, y)], axis=-1)

    return field


def flow(sys: FastSlowSystem, x0, y0, t_span, cfg: IntegratorConfig,
         check_domain=True, stop_on_exit=False) -> OrbitPath:
    """Sampled solution of the full system over t_span = (t0, t1).

    If the slow state leaves the box (only possible when boundary_flag is
    false), raises DomainExitError carrying the exit time and partial path,
    or truncates there with a meta flag when stop_on_exit is set.  With
    cfg.richardson_check, a half-step re-integration is run and the endpoint
    Richardson ratio (~16 for a 4th-order method) stored in meta.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if check_domain and not sys.domain.contains(y0):
        raise DomainExitError("initial slow state outside the box", exit_time=float(t_span[0]))
    t0, t1 = float(t_span[0]), float(t_span[1])
    n = cfg.steps_for(t1 - t0)
    times, states = rk4_path(_full_field(sys), np.concatenate([x0, y0]), t0, t1, n)
    path = _package(sys, times, states, cfg, horizon=t1 - t0)

    exit_idx = None
    if check_domain and not sys.boundary_flag:
        inside = sys.domain.contains(path.slow)
        if not np.all(inside):
            exit_idx = int(np.argmin(inside))
    if exit_idx is not None:
        t_exit = float(path.times[exit_idx])
        keep = max(exit_idx, 1)
        partial = _package(sys, path.times[:keep + 1], states[:keep + 1], cfg,
                           horizon=t1 - t0)
        partial.meta["domain_exit"] = t_exit
        if stop_on_exit:
            return partial
        raise DomainExitError(f"slow state left the box at t = {t_exit:g}",
                              exit_time=t_exit, path=partial)

    if cfg.richardson_check:
        _, fine = rk4_path(_full_field(sys), np.concatenate([x0, y0]), t0, t1, 2 * n)
        _, coarse2 = rk4_path(_full_field(sys), np.concatenate([x0, y0]), t0, t1,
                              max(1, n // 2))
        err_c = np.max(np.abs(coarse2[-1] - fine[-1]))
        err_f = np.max(np.abs(states[-1] - fine[-1]))
        path.meta["richardson_ratio"] = float(err_c / err_f) if err_f > 0 else float("inf")
    return path


def _package(sys, times, states, cfg, horizon):
    m = sys.m
    order = np.argsort(times)  # backward solves stored with increasing time
    return OrbitPath(times[order], states[order, :m], states[order, m:],
                     meta={"dt": cfg.dt, "horizon": horizon})


def slow_ivp(sys: FastSlowSystem, sigma, eta, t_span, cfg: IntegratorConfig) -> OrbitPath:
    """Solution psi(.; eta, sigma) of y' = g(sigma(y), y), y(0) = eta.

    Integrable forward and backward; the fast track carries sigma(psi(t)).
    sigma may be a GridFunction (clamped-extension interpolation) or callable.
    """
    sig = as_slow_function(sigma)
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    t0, t1 = float(t_span[0]), float(t_span[1])

    def field(t, y):
        return sys.eval_g(np.asarray(sig(y), dtype=float), y)

    n = cfg.steps_for(t1 - t0)
    times, ys = rk4_path(field, eta, t0, t1, n)
    order = np.argsort(times)
    times, ys = times[order], ys[order]
    fast = np.asarray(sig(ys), dtype=float)
    return OrbitPath(times, fast, ys, meta={"dt": cfg.dt, "horizon": t1 - t0})


# -- linear processes (two-parameter semigroups) ------------------------------

@dataclass
class ProcessHandle:
    """Solution operator T(t, s) of a non-autonomous linear ODE v' = A(t) v.

    `matrix` maps t to the generator A(t).  Dissipative generators (frozen
    fast linearization A0, linearization along the manifold Ah) are
    forward-only; the slow-projection generator Z is reversible.
    """

    matrix: Callable
    dim: int
    reversible: bool = False
    label: str = ""


def process_A0(sys: FastSlowSystem, driver) -> ProcessHandle:
    """Process of v' = A0(psi(t)) v for a slow driver path psi (callable t -> y)."""
    drv = _as_driver(driver)
    return ProcessHandle(matrix=lambda t: sys.eval_A0(drv(t)), dim=sys.m, label="A0")


def process_Ah(sys: FastSlowSystem, h, driver) -> ProcessHandle:
    """Process of the fast linearization along the manifold, D_x F(h(psi), psi)."""
    drv = _as_driver(driver)
    hf = as_slow_function(h)

    def mat(t):
        y = drv(t)
        return sys.DxF(np.asarray(hf(y), dtype=float), y)

    return ProcessHandle(matrix=mat, dim=sys.m, label="Ah")


def process_Z(sys: FastSlowSystem, p_driver) -> ProcessHandle:
    """Reversible process of w' = D_y g(0, p(t)) w along a projected slow path p."""
    drv = _as_driver(p_driver)
    zeros = np.zeros(sys.m)

    def mat(t):
        return sys.Dyg(zeros, drv(t))

    return ProcessHandle(matrix=mat, dim=sys.n, reversible=True, label="Z")


def _as_driver(driver):
    if callable(driver):
        return driver
    if isinstance(driver, OrbitPath):
        return lambda t: driver.at(t)[1]
    raise TypeError("driver must be a callable t -> y or an OrbitPath")


def process_apply(handle: ProcessHandle, t, s, xi, cfg: IntegratorConfig):
    """T(t, s) xi by integrating the linear ODE from s to t.  Linear in xi."""
    t, s = float(t), float(s)
    if t < s and not handle.reversible:
        raise PreconditionError("t < s for a forward-only (dissipative) process")
    xi = np.asarray(xi, dtype=float)
    if t == s:
        return xi.copy()
    n = cfg.steps_for(t - s)
    _, out = rk4_final(lambda tau, v: np.einsum("ij,...j->...i", handle.matrix(tau), v),
                       xi, s, t, n)
    return out


def process_matrix(handle: ProcessHandle, t, s, cfg: IntegratorConfig):
    """Materialize T(t, s) as a dense matrix.  Guarded to small dimensions."""
    if handle.dim > 64:
        raise CapabilityError("full-operator mode is limited to dim <= 64")
    return process_apply(handle, t, s, np.eye(handle.dim), cfg)


# -- variational flows --------------------------------------------------------

@dataclass
class VariationalFlow:
    """Derivatives of the flow map w.r.t. its initial condition along one orbit."""

    times: np.ndarray
    states: np.ndarray          # (S, m+n) re-integrated base orbit
    first: np.ndarray           # (S, m+n, m+n)
    second: Optional[np.ndarray] = None   # (S, m+n, m+n, m+n)

    def split_first(self, m):
        return self.first[:, :m, :], self.first[:, m:, :]


def variational_flow(sys: FastSlowSystem, base: OrbitPath, order, cfg: IntegratorConfig) -> VariationalFlow:
    """First (and optionally second) variational flow along the base orbit.

    The base orbit is re-integrated jointly with the variational equations so
    that the RK4 stage values are exact; base.times fixes the span and the
    initial condition.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if not sys.has_derivatives(1):
        raise CapabilityError("variational_flow needs DF and Dg")
    if order == 2 and not sys.has_derivatives(2):
        raise CapabilityError("second variational flow needs D2F and D2g")
    m, n = sys.m, sys.n
    d = m + n
    t0, t1 = float(base.times[0]), float(base.times[-1])
    u0 = np.concatenate([base.fast[0], base.slow[0]])

    def jac(x, y):
        return np.concatenate([sys.eval_DF(x, y), sys.eval_Dg(x, y)], axis=-2)

    def hess(x, y):
        return np.concatenate([sys.eval_D2F(x, y), sys.eval_D2g(x, y)], axis=-3)

    nU = d * d
    if order == 1:
        def field(t, u):
            z, U = u[:d], u[d:].reshape(d, d)
            J = jac(z[:m], z[m:])
            return np.concatenate([
                np.concatenate([sys.eval_F(z[:m], z[m:]), sys.eval_g(z[:m], z[m:])]),
                (J @ U).ravel()])
        w0 = np.concatenate([u0, np.eye(d).ravel()])
    else:
        def field(t, u):
            z = u[:d]
            U = u[d:d + nU].reshape(d, d)
            V = u[d + nU:].reshape(d, d, d)
            J = jac(z[:m], z[m:])
            H = hess(z[:m], z[m:])
            dV = np.einsum("ic,cab->iab", J, V) + np.einsum("icd,ca,db->iab", H, U, U)
            return np.concatenate([
                np.concatenate([sys.eval_F(z[:m], z[m:]), sys.eval_g(z[:m], z[m:])]),
                (J @ U).ravel(), dV.ravel()])
        w0 = np.concatenate([u0, np.eye(d).ravel(), np.zeros(d * d * d)])

    n_steps = cfg.steps_for(t1 - t0)
    times, path = rk4_path(field, w0, t0, t1, n_steps)
    states = path[:, :d]
    first = path[:, d:d + nU].reshape(-1, d, d)
    second = path[:, d + nU:].reshape(-1, d, d, d) if order == 2 else None
    return VariationalFlow(times=times, states=states, first=first, second=second)


# -- bounded solution ---------------------------------------------------------

def truncation_horizon(cert, tol, rate=None, amplitude=None):
    """Backward horizon T with K * amplitude * e^{-rate T} <= tol.

    Default rate is the straightened contraction rate mu - K*M1x and the
    default amplitude the ball diameter 2*(K M0/mu + delta).
    """
    rate = rate if rate is not None else cert.mu - cert.K * cert.M1x
    if rate <= 0:
        raise ContractionError("no positive contraction rate: K*M1x >= mu")
    if amplitude is None:
        delta = cert.delta if np.isfinite(cert.delta) else 0.0
        amplitude = 2.0 * (cert.K * cert.M0 / cert.mu + delta)
    amplitude = max(amplitude, 10 * tol)
    return math.log(cert.K * amplitude / tol) / rate


def bounded_solution(sys: FastSlowSystem, sigma, eta, horizon=None,
                     cfg: IntegratorConfig = IntegratorConfig(), cert=None,
                     tol=1e-9, method="forward") -> OrbitPath:
    """The unique bounded solution phi of x' = F(x, psi(t; eta, sigma)) on [-T, 0].

    Default route: integrate psi backward to -T, then the joint system
    (x' = F(x,y), y' = g(sigma(y), y)) forward from (sigma(psi(-T)), psi(-T)).
    The attracting contraction at rate mu - K*M1x makes the startup error at
    most K e^{-(mu - K M1x) T} * 2(K M0/mu + delta) by the decay estimate, so
    T from the truncation rule pins phi(0) to `tol`.

    method="picard" instead iterates the variation-of-constants map on the
    same time grid (each sweep one inhomogeneous linear solve); it exists to
    cross-validate the forward route and is not the default.
    """
    if cert is not None:
        if cert.K * cert.M1x >= cert.mu:
            raise ContractionError("bounded solution needs K*M1x < mu")
        if horizon is None:
            horizon = truncation_horizon(cert, tol)
    if horizon is None:
        raise ValueError("pass a horizon or a certificate to derive one")
    T = float(horizon)
    if T <= 0:
        raise ValueError("horizon must be positive")
    sig = as_slow_function(sigma)
    eta = np.atleast_1d(np.asarray(eta, dtype=float))

    def slow_field(t, y):
        return sys.eval_g(np.asarray(sig(y), dtype=float), y)

    n_b = cfg.steps_for(T)
    _, y_T = rk4_final(slow_field, eta, 0.0, -T, n_b)

    if method == "forward":
        def joint(t, u):
            x, y = u[..., : sys.m], u[..., sys.m:]
            return np.concatenate([sys.eval_F(x, y), slow_field(t, y)], axis=-1)

        x_T = np.asarray(sig(y_T), dtype=float)
        times, states = rk4_path(joint, np.concatenate([x_T, y_T]), -T, 0.0, n_b)
        return OrbitPath(times, states[:, : sys.m], states[:, sys.m:],
                         meta={"dt": cfg.dt, "horizon": T, "method": "forward"})
    if method == "picard":
        return _picard_bounded(sys, sig, y_T, T, cfg, tol)
    raise ValueError(f"unknown method {method!r}")


def _picard_bounded(sys, sig, y_T, T, cfg, tol, max_sweeps=200):
    from scipy.interpolate import CubicSpline

    n_b = cfg.steps_for(T)
    times, ys = rk4_path(lambda t, y: sys.eval_g(np.asarray(sig(y), dtype=float), y),
                         y_T, -T, 0.0, n_b)
    y_spline = CubicSpline(times, ys, axis=0)
    phi = np.zeros((len(times), sys.m))
    for sweep in range(max_sweeps):
        spline = CubicSpline(times, phi, axis=0)

        def lin(t, v):
            y = y_spline(t)
            return sys.eval_A0(y) @ v + sys.R0(spline(t), y)

        _, out = rk4_path(lin, np.zeros(sys.m), -T, 0.0, n_b)
        change = float(np.max(np.abs(out - phi)))
        phi = out
        if change <= tol:
            break
    return OrbitPath(times, phi, ys, meta={"dt": cfg.dt, "horizon": T,
                                           "method": "picard", "sweeps": sweep + 1})


def bounded_solution_batch(sys: FastSlowSystem, sigma, etas, horizon,
                           cfg: IntegratorConfig):
    """phi(0; eta, sigma) for a batch of eta rows at once (forward route).

    Internal workhorse for grid sweeps; returns (B, m).
    """
    sig = as_slow_function(sigma)
    etas = np.asarray(etas, dtype=float)
    T = float(horizon)

    def slow_field(t, y):
        return sys.eval_g(np.asarray(sig(y), dtype=float), y)

    n_b = cfg.steps_for(T)
    _, y_T = rk4_final(slow_field, etas, 0.0, -T, n_b)

    def joint(t, u):
        x, y = u[..., : sys.m], u[..., sys.m:]
        return np.concatenate([sys.eval_F(x, y), slow_field(t, y)], axis=-1)

    x_T = np.asarray(sig(y_T), dtype=float)
    _, u0 = rk4_final(joint, np.concatenate([x_T, y_T], axis=-1), -T, 0.0, n_b)
    return u0[..., : sys.m]
