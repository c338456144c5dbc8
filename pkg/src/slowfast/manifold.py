"""Slow-manifold computation: the contraction map sigma -> phi(0; ., sigma) on a
ball of Lipschitz grid functions, its fixed point h, the first- and
second-derivative fixed points, residual diagnostics, and the reduced flow.

Every node evaluation is a two-pass solve: the slow path is integrated
backward to the truncation horizon, then the coupled (fast, slow[, variational])
system is integrated forward, so that all RK4 stage values are exact field
evaluations (no path interpolation enters the inner loops).  Sweeps are full
Jacobi sweeps: every node reads the previous iterate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .certify import ConstantsCertificate
from .core import FastSlowSystem, GridDomain, GridFunction, as_slow_function
from .errors import (CapabilityError, ContractionError, ConvergenceError,
                     InfeasibleBudgetError, PreconditionError)
from .integrate import (IntegratorConfig, OrbitPath, flow, rk4_final, rk4_path,
                        truncation_horizon)


@dataclass
class LPConfig:
    """Configuration of the fixed-point solves."""

    grid: GridDomain
    horizon: Optional[float] = None          # None: truncation rule from the certificate
    max_iters: int = 60
    tol_fixed_point: float = 1e-9
    tol_bounded: float = 1e-10               # startup tolerance for the bounded solution
    ball_radius: Optional[float] = None      # None: K M0/mu + delta from the certificate
    ball_safety: float = 1.1                 # safety factor on the Lipschitz estimate
    initial: str = "zero"                    # or "newton"

    def __post_init__(self):
        if self.tol_fixed_point <= 0:
            raise ValueError("tol_fixed_point must be positive")
        if self.initial not in ("zero", "newton"):
            raise ValueError("initial must be 'zero' or 'newton'")

    def resolved_horizon(self, cert):
        if self.horizon is not None:
            return float(self.horizon)
        return truncation_horizon(cert, self.tol_bounded)

    def resolved_radius(self, cert):
        if self.ball_radius is not None:
            return float(self.ball_radius)
        return cert.ball_radius


@dataclass
class ContractionReport:
    """Per-sweep residuals of a fixed-point iteration and the contraction verdict."""

    residuals: list = field(default_factory=list)
    theoretical_ratio: float = float("nan")
    converged: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def iterations(self):
        return len(self.residuals)

    @property
    def measured_ratio(self):
        r = np.asarray(self.residuals, dtype=float)
        good = r[:-1] > 0
        if np.sum(good) == 0:
            return 0.0
        return float(np.median(r[1:][good] / r[:-1][good]))


# -- the manifold map ----------------------------------------------------------

def _ball_check(sigma: GridFunction, radius, safety):
    return sigma.ball_norm(safety=safety) <= radius * (1.0 + 1e-12)


def _lp_apply(sys, sigma, T, cfg_int):
    """One application of the manifold map: bounded-solution values at all nodes."""
    from .integrate import bounded_solution_batch

    etas = sigma.domain.node_coords()
    vals = bounded_solution_batch(sys, sigma, etas, T, cfg_int)
    return sigma.with_values(vals.reshape(sigma.domain.shape + (sys.m,)))


def lp_map(sys: FastSlowSystem, sigma: GridFunction, cert: ConstantsCertificate,
           cfg: LPConfig, cfg_int: IntegratorConfig = IntegratorConfig()) -> GridFunction:
    """The manifold map evaluated on the grid: node eta -> phi(0; eta, sigma).

    Requires sigma in the certified ball (sup norm plus safety-factored
    Lipschitz estimate) and a feasible existence budget.
    """
    if not cert.existence_ok:
        raise ContractionError("certificate does not satisfy the existence budget")
    if not _ball_check(sigma, cfg.resolved_radius(cert), cfg.ball_safety):
        raise PreconditionError("sigma lies outside the certified ball")
    return _lp_apply(sys, sigma, cfg.resolved_horizon(cert), cfg_int)


def _newton_sheet(sys, grid, iters=50, tol=1e-12):
    """Per-node Newton solve of F(x, y) = 0 (fast-equilibrium branch from x = 0)."""
    nodes = grid.node_coords()
    x = np.zeros((nodes.shape[0], sys.m))
    for _ in range(iters):
        fval = sys.eval_F(x, nodes)
        if np.max(np.abs(fval)) < tol:
            break
        for i in range(nodes.shape[0]):
            J = sys.DxF(x[i], nodes[i]) if sys.DF is not None else None
            if J is None:
                from .core import _fd_dx
                J = _fd_dx(sys.eval_F, x[i], nodes[i], sys.m)
            x[i] = x[i] - np.linalg.solve(J, fval[i])
    return GridFunction(grid, x.reshape(grid.shape + (sys.m,)),
                        value_norm=None if sys.norm_kind == "euclidean" else sys.norm_x)


def lp_solve(sys: FastSlowSystem, cert: ConstantsCertificate, cfg: LPConfig,
             cfg_int: IntegratorConfig = IntegratorConfig(), sigma0=None):
    """Iterate the manifold map to its fixed point h.

    Returns (h, report).  The report's theoretical ratio is the certified
    contraction factor K M1y / ((delta+1)(mu - K M1x - N1 (delta+1))); sweep
    residuals are sup-norm changes between Jacobi sweeps.
    """
    if not cert.existence_ok:
        raise ContractionError("certificate does not satisfy the existence budget")
    value_norm = None if sys.norm_kind == "euclidean" else sys.norm_x
    if sigma0 is None:
        if cfg.initial == "newton":
            sigma = _newton_sheet(sys, cfg.grid)
        else:
            sigma = GridFunction.zeros(cfg.grid, (sys.m,), value_norm=value_norm)
    else:
        sigma = sigma0
    radius = cfg.resolved_radius(cert)
    if not _ball_check(sigma, radius, cfg.ball_safety):
        raise PreconditionError("initial iterate lies outside the certified ball")
    T = cfg.resolved_horizon(cert)
    report = ContractionReport(theoretical_ratio=cert.lp_ratio())
    report.diagnostics["horizon"] = T
    report.diagnostics["ball_radius"] = radius
    norm = sys.norm_x
    for _ in range(cfg.max_iters):
        new = _lp_apply(sys, sigma, T, cfg_int)
        resid = float(np.max(norm(new.values - sigma.values)))
        report.residuals.append(resid)
        sigma = new
        if resid <= cfg.tol_fixed_point:
            report.converged = True
            break
    report.diagnostics["in_ball"] = bool(_ball_check(sigma, radius, cfg.ball_safety))
    report.diagnostics["sup_norm"] = sigma.sup_norm()
    if not report.converged:
        raise ConvergenceError(
            f"manifold iteration did not reach {cfg.tol_fixed_point:g} "
            f"in {cfg.max_iters} sweeps (last residual {report.residuals[-1]:.3e})",
            report=report)
    return sigma, report


# -- residual diagnostics --------------------------------------------------------

def eqv_residual(sys: FastSlowSystem, h: GridFunction, cert: ConstantsCertificate,
                 cfg: LPConfig, cfg_int: IntegratorConfig = IntegratorConfig()):
    """Max node residual of the invariance integral condition

        h(eta) = int_{-inf}^0 T0(0, s; eta, h) R0(h(psi(s)), psi(s)) ds,

    with the integral truncated at the certificate horizon and evaluated as an
    inhomogeneous linear forward solve.  Small residual certifies (numerically)
    that h parameterizes an invariant graph.
    """
    T = cfg.resolved_horizon(cert)
    hf = as_slow_function(h)
    etas = cfg.grid.node_coords()
    m, n = sys.m, sys.n

    def slow_field(t, y):
        return sys.eval_g(np.asarray(hf(y), dtype=float), y)

    n_steps = cfg_int.steps_for(T)
    _, y_T = rk4_final(slow_field, etas, 0.0, -T, n_steps)

    def joint(t, u):
        y, v = u[..., :n], u[..., n:]
        hy = np.asarray(hf(y), dtype=float)
        A = sys.eval_A0(y)
        r0 = sys.eval_F(hy, y) - np.einsum("...ij,...j->...i", A, hy)
        dv = np.einsum("...ij,...j->...i", A, v) + r0
        return np.concatenate([slow_field(t, y), dv], axis=-1)

    u0 = np.concatenate([y_T, np.zeros((etas.shape[0], m))], axis=-1)
    _, uf = rk4_final(joint, u0, -T, 0.0, n_steps)
    vals = np.asarray(hf(etas), dtype=float)
    resid = sys.norm_x(vals - uf[..., n:])
    return float(np.max(resid))


@dataclass
class InvarianceResult:
    max_deviation: float
    partial: bool = False
    exit_time: Optional[float] = None
    path: Optional[OrbitPath] = None


def invariance_residual(sys: FastSlowSystem, h, eta, t_max,
                        cfg_int: IntegratorConfig = IntegratorConfig()) -> InvarianceResult:
    """Integrate the full system from (h(eta), eta) and report max |x(t) - h(y(t))|.

    Domain exit before t_max truncates the orbit and flags the result partial.
    """
    hf = as_slow_function(h)
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    x0 = np.asarray(hf(eta), dtype=float)
    path = flow(sys, x0, eta, (0.0, float(t_max)), cfg_int, stop_on_exit=True)
    dev = sys.norm_x(path.fast - np.asarray(hf(path.slow), dtype=float))
    exit_t = path.meta.get("domain_exit")
    return InvarianceResult(max_deviation=float(np.max(dev)),
                            partial=exit_t is not None, exit_time=exit_t, path=path)


# -- first derivative -------------------------------------------------------------

def _dh_horizon(cert, tol):
    rate = cert.mu - cert.K * cert.M1x - cert.N1 * (cert.rho + 1.0)
    if rate <= 0:
        raise InfeasibleBudgetError("derivative budget N1(rho+1) >= mu - K*M1x")
    tol = max(tol, 1e-10)
    amp = max(cert.K * max(cert.M1y, 1e-6) / rate, 10 * tol)
    return math.log(amp / tol) / rate


def _dh_apply(sys, h, w_field, T, cfg_int):
    """One application of the derivative map on the whole grid.

    Backward pass: (psi, z) from (eta, I) with z' = [D_x g . W(psi) + D_y g] z,
    the variational flow of the slow subsystem constrained to the graph of the
    candidate field W.  Forward pass re-integrates (psi, z) and accumulates
    v' = D_x F(h,psi) v + D_y F(h,psi) z from v(-T) = 0; the node update is v(0).
    """
    hf = as_slow_function(h)
    wf = as_slow_function(w_field)
    grid = h.domain if isinstance(h, GridFunction) else w_field.domain
    etas = grid.node_coords()
    B, m, n = etas.shape[0], sys.m, sys.n

    def unpack_b(u):
        return u[..., :n], u[..., n:].reshape(u.shape[:-1] + (n, n))

    def back_field(t, u):
        y, z = unpack_b(u)
        hy = np.asarray(hf(y), dtype=float)
        Dg = sys.eval_Dg(hy, y)
        Wy = np.asarray(wf(y), dtype=float)
        gen = np.einsum("...ij,...jk->...ik", Dg[..., :, :m], Wy) + Dg[..., :, m:]
        dz = np.einsum("...ij,...jk->...ik", gen, z)
        return np.concatenate([sys.eval_g(hy, y), dz.reshape(u.shape[:-1] + (n * n,))],
                              axis=-1)

    z0 = np.broadcast_to(np.eye(n).ravel(), (B, n * n))
    u0 = np.concatenate([etas, z0], axis=-1)
    n_steps = cfg_int.steps_for(T)
    _, u_T = rk4_final(back_field, u0, 0.0, -T, n_steps)

    def fwd_field(t, u):
        y, z = unpack_b(u[..., : n + n * n])
        v = u[..., n + n * n:].reshape(u.shape[:-1] + (m, n))
        hy = np.asarray(hf(y), dtype=float)
        Dg = sys.eval_Dg(hy, y)
        Wy = np.asarray(wf(y), dtype=float)
        gen = np.einsum("...ij,...jk->...ik", Dg[..., :, :m], Wy) + Dg[..., :, m:]
        dz = np.einsum("...ij,...jk->...ik", gen, z)
        DFh = sys.eval_DF(hy, y)
        dv = (np.einsum("...ij,...jk->...ik", DFh[..., :, :m], v)
              + np.einsum("...ij,...jk->...ik", DFh[..., :, m:], z))
        return np.concatenate([sys.eval_g(hy, y),
                               dz.reshape(u.shape[:-1] + (n * n,)),
                               dv.reshape(u.shape[:-1] + (m * n,))], axis=-1)

    u0f = np.concatenate([u_T, np.zeros((B, m * n))], axis=-1)
    _, uf = rk4_final(fwd_field, u0f, -T, 0.0, n_steps)
    vals = uf[..., n + n * n:].reshape(grid.shape + (m, n))
    return GridFunction(grid, vals)


def dh_map(sys: FastSlowSystem, h: GridFunction, w_field: GridFunction,
           cert: ConstantsCertificate, cfg: LPConfig,
           cfg_int: IntegratorConfig = IntegratorConfig(), tol=1e-10) -> GridFunction:
    """One sweep of the derivative fixed-point map on an operator field."""
    if not sys.has_derivatives(1):
        raise CapabilityError("dh_map needs DF and Dg")
    if not cert.smooth_ok:
        raise ContractionError("certificate does not satisfy the smoothness budget")
    return _dh_apply(sys, h, w_field, _dh_horizon(cert, tol), cfg_int)


def dh_solve(sys: FastSlowSystem, h: GridFunction, cert: ConstantsCertificate,
             cfg: LPConfig, cfg_int: IntegratorConfig = IntegratorConfig()):
    """Fixed point of the derivative map; returns (Dh field, report).

    The theoretical ratio is K M1y / (rho (mu - K M1x - N1 (rho+1))).  The
    certified sup bound on the result presumes slow paths confined to the box
    (boundary-vanishing drift); for systems whose paths exit, constants
    sampled on the box understate the effective ones and the bound is
    reported in the diagnostics without being enforced.
    """
    if not sys.has_derivatives(1):
        raise CapabilityError("dh_solve needs DF and Dg")
    if not cert.smooth_ok:
        raise ContractionError("certificate does not satisfy the smoothness budget")
    grid = h.domain
    w = GridFunction.zeros(grid, (sys.m, sys.n))
    T = _dh_horizon(cert, cfg.tol_bounded)
    report = ContractionReport(theoretical_ratio=cert.dh_ratio())
    report.diagnostics["horizon"] = T
    for _ in range(cfg.max_iters):
        new = _dh_apply(sys, h, w, T, cfg_int)
        resid = float(np.max(np.abs(new.values - w.values)))
        report.residuals.append(resid)
        w = new
        if resid <= cfg.tol_fixed_point:
            report.converged = True
            break
    if not report.converged:
        raise ConvergenceError("derivative iteration did not converge", report=report)
    bound = cert.K * cert.M1y / (cert.mu - cert.K * cert.M1x - cert.N1 * (cert.rho + 1))
    report.diagnostics["sup_bound"] = bound
    report.diagnostics["sup_norm"] = w.sup_norm()
    report.diagnostics["sup_bound_applicable"] = bool(sys.boundary_flag)
    return w, report


def fd_derivative_error(h: GridFunction, dh: GridFunction):
    """Max interior-node mismatch between dh and central differences of h.

    The independent check used to validate the derivative fixed point.
    """
    dom = h.domain
    worst = 0.0
    for a in range(dom.n):
        sl_lo = [slice(None)] * dom.n
        sl_hi = [slice(None)] * dom.n
        sl_mid = [slice(None)] * dom.n
        sl_lo[a] = slice(0, -2)
        sl_hi[a] = slice(2, None)
        sl_mid[a] = slice(1, -1)
        fd = (h.values[tuple(sl_hi)] - h.values[tuple(sl_lo)]) / (2 * dom.spacing[a])
        got = dh.values[tuple(sl_mid)][..., a]
        worst = max(worst, float(np.max(np.abs(fd - got))))
    return worst


# -- second derivative -------------------------------------------------------------

def _d2h_budget_ok(cert):
    gap = cert.mu - cert.K * cert.M1x
    if not 2.0 * cert.N1 < gap:
        return False
    g2 = gap - 2.0 * cert.N1 * (cert.rho + 1.0)
    return g2 > 0 and cert.K * cert.M1y < (2.0 * (cert.rho + 1.0) - 1.0) * g2


def d2h_solve(sys: FastSlowSystem, h: GridFunction, dh: GridFunction,
              cert: ConstantsCertificate, cfg: LPConfig,
              cfg_int: IntegratorConfig = IntegratorConfig()):
    """Fixed point of the order-2 variational integral system; returns
    (second-derivative field with values (m, n, n), report).

    The inhomogeneity stacks the second derivatives of (F, g) against the
    first-order flow (w1, z1) = (Dh(psi) z1, z1); the candidate field enters
    the slow variational equation through the chain-rule path
    w2 = W2(psi)[z1, z1] + Dh(psi) z2.
    """
    if not sys.has_derivatives(2):
        raise CapabilityError("d2h_solve needs D2F and D2g")
    if not _d2h_budget_ok(cert):
        raise InfeasibleBudgetError("order-2 budget violated "
                                    "(needs 2 N1 < mu - K M1x and the k=2 inequality)")
    grid = h.domain
    m, n = sys.m, sys.n
    hf, dhf = as_slow_function(h), as_slow_function(dh)
    etas = grid.node_coords()
    B = etas.shape[0]
    rate = cert.mu - cert.K * cert.M1x - 2.0 * cert.N1 * (cert.rho + 1.0)
    T = math.log(max(cert.K * max(cert.M1y, 1e-6) / (rate * cfg.tol_bounded), 10.0)) / rate

    sz1, sz2, sv = n * n, n * n * n, m * n * n

    def terms(y, z1, z2, W2y):
        hy = np.asarray(hf(y), dtype=float)
        Dhy = np.asarray(dhf(y), dtype=float)
        w1 = np.einsum("...ij,...ja->...ia", Dhy, z1)
        V1 = np.concatenate([w1, z1], axis=-2)                    # (..., m+n, n)
        Dg = sys.eval_Dg(hy, y)
        D2g = sys.eval_D2g(hy, y)
        Sy = np.einsum("...icd,...ca,...db->...iab", D2g, V1, V1)
        w2 = (np.einsum("...icd,...ca,...db->...iab", W2y, z1, z1)
              + np.einsum("...ij,...jab->...iab", Dhy, z2))
        dz1 = np.einsum("...ij,...ja->...ia",
                        np.einsum("...ic,...cj->...ij", Dg[..., :, :m], Dhy) + Dg[..., :, m:],
                        z1)
        dz2 = (np.einsum("...ic,...cab->...iab", Dg[..., :, :m], w2)
               + np.einsum("...ij,...jab->...iab", Dg[..., :, m:], z2) + Sy)
        return hy, Dhy, w1, V1, dz1, dz2

    def unpack(u, with_v):
        y = u[..., :n]
        z1 = u[..., n:n + sz1].reshape(u.shape[:-1] + (n, n))
        z2 = u[..., n + sz1:n + sz1 + sz2].reshape(u.shape[:-1] + (n, n, n))
        v = None
        if with_v:
            v = u[..., n + sz1 + sz2:].reshape(u.shape[:-1] + (m, n, n))
        return y, z1, z2, v

    def make_field(W2, with_v):
        w2f = as_slow_function(W2)

        def fld(t, u):
            y, z1, z2, v = unpack(u, with_v)
            W2y = np.asarray(w2f(y), dtype=float)
            hy, Dhy, w1, V1, dz1, dz2 = terms(y, z1, z2, W2y)
            parts = [sys.eval_g(hy, y), dz1.reshape(u.shape[:-1] + (sz1,)),
                     dz2.reshape(u.shape[:-1] + (sz2,))]
            if with_v:
                DFh = sys.eval_DF(hy, y)
                D2F = sys.eval_D2F(hy, y)
                Sx = np.einsum("...icd,...ca,...db->...iab", D2F, V1, V1)
                dv = (np.einsum("...ij,...jab->...iab", DFh[..., :, :m], v)
                      + np.einsum("...ij,...jab->...iab", DFh[..., :, m:], z2) + Sx)
                parts.append(dv.reshape(u.shape[:-1] + (sv,)))
            return np.concatenate(parts, axis=-1)

        return fld

    report = ContractionReport()
    report.diagnostics["horizon"] = T
    W2 = GridFunction.zeros(grid, (m, n, n))
    n_steps = cfg_int.steps_for(T)
    z1_0 = np.broadcast_to(np.eye(n).ravel(), (B, sz1))
    for _ in range(cfg.max_iters):
        u0 = np.concatenate([etas, z1_0, np.zeros((B, sz2))], axis=-1)
        _, u_T = rk4_final(make_field(W2, with_v=False), u0, 0.0, -T, n_steps)
        u0f = np.concatenate([u_T, np.zeros((B, sv))], axis=-1)
        _, uf = rk4_final(make_field(W2, with_v=True), u0f, -T, 0.0, n_steps)
        new = GridFunction(grid, uf[..., n + sz1 + sz2:].reshape(grid.shape + (m, n, n)))
        resid = float(np.max(np.abs(new.values - W2.values)))
        report.residuals.append(resid)
        W2 = new
        if resid <= cfg.tol_fixed_point:
            report.converged = True
            break
    if not report.converged:
        raise ConvergenceError("second-derivative iteration did not converge",
                               report=report)
    return W2, report


# -- reduced flow -------------------------------------------------------------------

def reduced_flow(sys: FastSlowSystem, h0, eta, t_span,
                 cfg_int: IntegratorConfig = IntegratorConfig(),
                 slow_field=None, slow_time=True) -> OrbitPath:
    """Flow of the reduced (critical-manifold) system, lifted to the sheet.

    Integrates y' = g(h0(y), y) in the slow time when the system carries an
    `eps` in its meta (the stored g includes the eps factor, so dividing it
    out rescales time); otherwise in the native time.  The fast track is the
    lift x(t) = h0(y(t)).
    """
    h0f = as_slow_function(h0)
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    eps = sys.meta.get("eps")
    scale = 1.0 / eps if (slow_time and eps) else 1.0

    if slow_field is None:
        def slow_field(x, y):
            return sys.eval_g(x, y) * scale

    def fieldt(t, y):
        return slow_field(np.asarray(h0f(y), dtype=float), y)

    t0, t1 = float(t_span[0]), float(t_span[1])
    n = cfg_int.steps_for(t1 - t0)
    times, ys = rk4_path(fieldt, eta, t0, t1, n)
    order = np.argsort(times)
    times, ys = times[order], ys[order]
    exit_flag = None
    inside = sys.domain.contains(ys)
    if not np.all(inside):
        idx = int(np.argmin(inside))
        exit_flag = float(times[idx])
        times, ys = times[: idx + 1], ys[: idx + 1]
        if len(times) < 2:
            raise PreconditionError("reduced flow exits the box immediately")
    fast = np.asarray(h0f(ys), dtype=float)
    meta = {"dt": cfg_int.dt, "horizon": t1 - t0, "slow_time": bool(slow_time and eps)}
    if exit_flag is not None:
        meta["domain_exit"] = exit_flag
    return OrbitPath(times, fast, ys, meta=meta)
