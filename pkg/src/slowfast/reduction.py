"""Slow-manifold reduction: the straightening transform, the orbit-local fixed
point for the slow projection defect Q, the reduction map P = id_y - Q with its
first derivative, and the matched-asymptotics decomposition of orbits.

Q is never built as a global grid function over the full phase space; the
defining integral only ever consumes Q along the forward orbit of the queried
point, so each query iterates a functional on that orbit's own time grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .certify import ConstantsCertificate
from .core import FastSlowSystem, GridFunction, as_slow_function
from .errors import (CapabilityError, ContractionError, ConvergenceError,
                     InfeasibleBudgetError, PreconditionError,
                     UnderdeterminedError)
from .integrate import IntegratorConfig, OrbitPath, flow, rk4_path
from .manifold import ContractionReport


@dataclass
class StraightenedSystem:
    """The system in graph coordinates xt = x - h(y).

    Exposes Ft(xt, y) = F(xt + h(y), y) - Dh(y) g(xt + h(y), y) and
    gt(xt, y) = g(xt + h(y), y); the manifold sits at {xt = 0}.  `system` is a
    full FastSlowSystem usable by every integrator.  Derivatives are available
    when the base system has them and h was given smoothly (callables with a
    second derivative, or an exact second-derivative field).
    """

    base: FastSlowSystem
    h: object
    dh: object
    d2h: Optional[object] = None
    system: FastSlowSystem = None

    def to_original(self, xt, y):
        return np.asarray(xt, dtype=float) + np.asarray(self.h(y), dtype=float), y

    def from_original(self, x, y):
        return np.asarray(x, dtype=float) - np.asarray(self.h(y), dtype=float), y


def straighten(sys: FastSlowSystem, h, dh, d2h=None, report=None) -> StraightenedSystem:
    """Build the straightened system from a converged manifold parameterization.

    h, dh may be GridFunctions (from lp_solve/dh_solve) or smooth callables.
    When a report is attached it must be converged.  Derivative callables of
    the straightened field need the second derivative of h; without it the
    straightened system carries no DF and derivative-consuming operations
    will raise.
    """
    if report is not None and not report.converged:
        raise PreconditionError("straighten requires a converged manifold report")
    hf, dhf = as_slow_function(h), as_slow_function(dh)
    d2hf = as_slow_function(d2h) if d2h is not None else None
    m, n = sys.m, sys.n

    def H(y):
        return np.asarray(hf(y), dtype=float)

    def DH(y):
        return np.asarray(dhf(y), dtype=float)

    def Ft(xt, y):
        xt = np.asarray(xt, dtype=float)
        x = xt + H(y)
        return sys.eval_F(x, y) - np.einsum("...ij,...j->...i", DH(y), sys.eval_g(x, y))

    def gt(xt, y):
        xt = np.asarray(xt, dtype=float)
        return sys.eval_g(xt + H(y), y)

    def A0t(y):
        h0 = H(y)
        dxF = sys.DxF(h0, y)
        dxg = sys.Dxg(h0, y)
        return dxF - np.einsum("...ij,...jk->...ik", DH(y), dxg)

    DFt = Dgt = None
    if sys.has_derivatives(1):
        def Dgt(xt, y):
            xt = np.asarray(xt, dtype=float)
            x = xt + H(y)
            Dg = sys.eval_Dg(x, y)
            dxg, dyg = Dg[..., :, :m], Dg[..., :, m:]
            dy = dyg + np.einsum("...ij,...jk->...ik", dxg, DH(y))
            return np.concatenate([dxg, dy], axis=-1)

        if d2hf is not None:
            def DFt(xt, y):
                xt = np.asarray(xt, dtype=float)
                x = xt + H(y)
                Dh = DH(y)
                D2h = np.asarray(d2hf(y), dtype=float)
                DF = sys.eval_DF(x, y)
                Dg = sys.eval_Dg(x, y)
                gv = sys.eval_g(x, y)
                dxF, dyF = DF[..., :, :m], DF[..., :, m:]
                dxg, dyg = Dg[..., :, :m], Dg[..., :, m:]
                dx = dxF - np.einsum("...ij,...jk->...ik", Dh, dxg)
                dy = (dyF + np.einsum("...ij,...jk->...ik", dxF, Dh)
                      - np.einsum("...iab,...b->...ia", D2h, gv)
                      - np.einsum("...ij,...jk->...ik", Dh,
                                  dyg + np.einsum("...ij,...jk->...ik", dxg, Dh)))
                return np.concatenate([dx, dy], axis=-1)

    inner = FastSlowSystem(m=m, n=n, F=Ft, g=gt, A0=A0t, domain=sys.domain,
                           DF=DFt, Dg=Dgt, boundary_flag=sys.boundary_flag,
                           norm_kind=sys.norm_kind, quad_weights=sys.quad_weights,
                           vectorized=sys.vectorized,
                           meta={**sys.meta, "straightened": True})
    return StraightenedSystem(base=sys, h=hf, dh=dhf, d2h=d2hf, system=inner)


@dataclass
class ReductionResult:
    """Outcome of one reduction query at (xi, eta)."""

    P: np.ndarray                 # projected slow base point
    Q: np.ndarray                 # eta - P
    q_path: OrbitPath             # slow track carries q(t) along the orbit
    E_ratio: float                # |Q| / |xi| (0 for xi = 0)
    report: ContractionReport
    xi: np.ndarray
    eta: np.ndarray
    horizon: float
    orbit: Optional[OrbitPath] = None

    def to_dict(self):
        return {
            "P": self.P.tolist(), "Q": self.Q.tolist(),
            "E_ratio": self.E_ratio, "horizon": self.horizon,
            "xi": self.xi.tolist(), "eta": self.eta.tolist(),
            "converged": self.report.converged,
            "sweeps": self.report.iterations,
            "measured_ratio": self.report.measured_ratio,
            "theoretical_ratio": self.report.theoretical_ratio,
        }


def _mu_prime(cert):
    """Decay rate of the straightened fast component."""
    return cert.mu - cert.K * cert.M1x


def forward_horizon(cert, xi_norm, tol):
    """Smallest T with K e^{-mu' T} |xi| below the defect tolerance budget."""
    mu_p = _mu_prime(cert)
    if mu_p <= 0:
        raise ContractionError("straightened decay rate is not positive")
    e_bound = cert.K * cert.N1 / max(mu_p - cert.K * cert.N1, 1e-300)
    denom = 2.0 * cert.N1 * (1.0 + e_bound)
    if denom <= 0 or xi_norm == 0:
        return 0.0
    target = tol / denom
    if cert.K * xi_norm <= target:
        return 0.0
    return math.log(cert.K * xi_norm / target) / mu_p


def q_along_orbit(ssys: StraightenedSystem, xi, eta, cert: ConstantsCertificate,
                  cfg_int: IntegratorConfig = IntegratorConfig(),
                  tol_q=1e-10, max_sweeps=80) -> ReductionResult:
    """Fixed point of the orbit-local defect functional

        q_{k+1}(t) = int_t^T [ gt(0, y(s) - q_k(s)) - gt(xt(s), y(s)) ] ds

    from q_0 = 0 on the forward orbit of (xi, eta); P = eta - q(0).  The
    measured sweep ratio must respect the certified factor K N1 / mu'.

    `cert` carries the straightened constants: its mu is the straightened
    decay rate and its N1 the straightened slow Lipschitz constant.
    """
    sys_t = ssys.system
    mu_p = _mu_prime(cert)
    if not cert.reduction_ok or cert.K * cert.N1 >= mu_p:
        raise ContractionError("reduction budget K N1 < mu' violated")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    T = forward_horizon(cert, float(sys_t.norm_x(xi)), tol_q)
    report = ContractionReport(theoretical_ratio=cert.K * cert.N1 / mu_p)

    if T == 0.0:
        times = np.array([0.0, cfg_int.dt])
        qp = OrbitPath(times, np.zeros((2, sys_t.m)), np.zeros((2, sys_t.n)))
        report.converged = True
        return ReductionResult(P=eta.copy(), Q=np.zeros(sys_t.n), q_path=qp,
                               E_ratio=0.0, report=report, xi=xi, eta=eta, horizon=0.0)

    orbit = flow(sys_t, xi, eta, (0.0, T), cfg_int, check_domain=False)
    times, xts, ys = orbit.times, orbit.fast, orbit.slow
    dts = np.diff(times)
    g_orbit = sys_t.eval_g(xts, ys)
    zeros = np.zeros_like(xts)

    q = np.zeros_like(ys)
    for _ in range(max_sweeps):
        integrand = sys_t.eval_g(zeros, ys - q) - g_orbit
        seg = 0.5 * (integrand[1:] + integrand[:-1]) * dts[:, None]
        new = np.concatenate([np.cumsum(seg[::-1], axis=0)[::-1],
                              np.zeros((1, sys_t.n))], axis=0)
        resid = float(np.max(np.linalg.norm(new - q, axis=-1)))
        report.residuals.append(resid)
        q = new
        if resid <= tol_q:
            report.converged = True
            break
    if not report.converged:
        raise ConvergenceError("defect iteration did not converge", report=report)

    Q = q[0].copy()
    P = eta - Q
    xin = float(sys_t.norm_x(xi))
    e_ratio = float(np.linalg.norm(Q)) / xin if xin > 0 else 0.0
    qp = OrbitPath(times, xts, q, meta={"dt": cfg_int.dt, "horizon": T})
    return ReductionResult(P=P, Q=Q, q_path=qp, E_ratio=e_ratio, report=report,
                           xi=xi, eta=eta, horizon=T, orbit=orbit)


def e_norm_sweep(ssys: StraightenedSystem, xis, etas, cert: ConstantsCertificate,
                 cfg_int: IntegratorConfig = IntegratorConfig(), tol_q=1e-9,
                 max_sweeps=80):
    """Defect queries for a whole batch of (xi, eta) pairs at once.

    Integrates all orbits jointly (one vectorized solve over the longest
    needed horizon), then runs the defect sweeps vectorized across queries.
    Returns (P (B, n), Q (B, n), E_ratio (B,)).  Same functional iteration as
    q_along_orbit, batched; per-query horizons are inherited from the worst
    query.
    """
    sys_t = ssys.system
    mu_p = _mu_prime(cert)
    if not cert.reduction_ok or cert.K * cert.N1 >= mu_p:
        raise ContractionError("reduction budget K N1 < mu' violated")
    xis = np.atleast_2d(np.asarray(xis, dtype=float))
    etas = np.atleast_2d(np.asarray(etas, dtype=float))
    B = xis.shape[0]
    xi_norms = sys_t.norm_x(xis)
    T = max(forward_horizon(cert, float(np.max(xi_norms)), tol_q), 2 * cfg_int.dt)

    def fld(t, u):
        x, y = u[..., : sys_t.m], u[..., sys_t.m:]
        return np.concatenate([sys_t.eval_F(x, y), sys_t.eval_g(x, y)], axis=-1)

    n_steps = cfg_int.steps_for(T)
    times, states = rk4_path(fld, np.concatenate([xis, etas], axis=-1), 0.0, T, n_steps)
    xts, ys = states[..., : sys_t.m], states[..., sys_t.m:]
    dts = np.diff(times)[:, None, None]
    g_orbit = sys_t.eval_g(xts, ys)
    zeros = np.zeros_like(xts)
    q = np.zeros_like(ys)
    for _ in range(max_sweeps):
        integrand = sys_t.eval_g(zeros, ys - q) - g_orbit
        seg = 0.5 * (integrand[1:] + integrand[:-1]) * dts
        new = np.concatenate([np.cumsum(seg[::-1], axis=0)[::-1],
                              np.zeros((1, B, sys_t.n))], axis=0)
        resid = float(np.max(np.linalg.norm(new - q, axis=-1)))
        q = new
        if resid <= tol_q:
            break
    else:
        raise ConvergenceError("batched defect iteration did not converge")
    Q = q[0]
    P = etas - Q
    ratios = np.where(xi_norms > 0, np.linalg.norm(Q, axis=-1) / np.maximum(xi_norms, 1e-300), 0.0)
    return P, Q, ratios


def projected_flow(ssys: StraightenedSystem, P, t_span, cfg_int) -> OrbitPath:
    """Flow of the straightened system started on the manifold, (0, P)."""
    return flow(ssys.system, np.zeros(ssys.system.m), P, t_span, cfg_int,
                check_domain=False)


def semiconjugacy_residual(ssys: StraightenedSystem, result: ReductionResult,
                           t_max, cfg_int: IntegratorConfig = IntegratorConfig(),
                           cert: ConstantsCertificate = None, n_checks=9,
                           tol_q=1e-10):
    """max over sampled t of |P(orbit(t)) - y_projected(t)|.

    Re-runs the defect query at points along the orbit and compares with the
    projected slow flow started at (0, P): the two must agree if P really
    semi-conjugates the flow to the on-manifold flow.
    """
    if not result.report.converged:
        raise PreconditionError("semiconjugacy check needs a converged result")
    if cert is None:
        raise ValueError("pass the straightened-constants certificate")
    orbit = flow(ssys.system, result.xi, result.eta, (0.0, float(t_max)), cfg_int,
                 check_domain=False)
    proj = projected_flow(ssys, result.P, (0.0, float(t_max)), cfg_int)
    ts = np.linspace(0.0, float(t_max), n_checks)
    worst = 0.0
    for t in ts:
        xt_t, y_t = orbit.at(t)
        res_t = q_along_orbit(ssys, xt_t, y_t, cert, cfg_int, tol_q=tol_q)
        _, y_proj = proj.at(t)
        worst = max(worst, float(np.linalg.norm(res_t.P - y_proj)))
    return worst


@dataclass
class RateFit:
    rate: float
    prefactor: float
    r2: float
    underdetermined: bool = False
    slow_prefactor: Optional[float] = None
    slow_prefactor_bound: Optional[float] = None

    @property
    def slow_prefactor_ok(self):
        if self.slow_prefactor is None or self.slow_prefactor_bound is None:
            return None
        return bool(self.slow_prefactor <= 1.05 * self.slow_prefactor_bound)


def attraction_rate_fit(ssys: StraightenedSystem, result: ReductionResult,
                        t_max, cfg_int: IntegratorConfig = IntegratorConfig(),
                        cert: ConstantsCertificate = None,
                        noise_floor=1e-11) -> RateFit:
    """Least-squares exponential fit of |orbit(t) - projected orbit(t)|.

    Fits log-gap over the window where the gap exceeds the noise floor; also
    fits the slow-component gap alone and compares its prefactor against the
    certified bound K^2 N1 / (mu' - K N1) |xi|.
    """
    from .harness import fit_exponential

    if not result.report.converged:
        raise PreconditionError("rate fit needs a converged result")
    orbit = flow(ssys.system, result.xi, result.eta, (0.0, float(t_max)), cfg_int,
                 check_domain=False)
    proj = projected_flow(ssys, result.P, (0.0, float(t_max)), cfg_int)
    sys_t = ssys.system
    gap = sys_t.norm_xy(orbit.fast - proj.fast, orbit.slow - proj.slow)
    try:
        fit = fit_exponential(list(zip(orbit.times, gap)), noise_floor)
    except UnderdeterminedError:
        return RateFit(rate=float("nan"), prefactor=float("nan"), r2=float("nan"),
                       underdetermined=True)
    out = RateFit(rate=fit.rate, prefactor=fit.prefactor, r2=fit.r2)
    slow_gap = np.linalg.norm(orbit.slow - proj.slow, axis=-1)
    if np.max(slow_gap) > noise_floor:
        sfit = fit_exponential(list(zip(orbit.times, slow_gap)), noise_floor)
        out.slow_prefactor = sfit.prefactor
        if cert is not None:
            mu_p = _mu_prime(cert)
            out.slow_prefactor_bound = (cert.K ** 2 * cert.N1
                                        / max(mu_p - cert.K * cert.N1, 1e-300)
                                        * float(sys_t.norm_x(result.xi)))
    return out


def dp_point(ssys: StraightenedSystem, xi, eta, result: ReductionResult,
             cert: ConstantsCertificate, cfg_int: IntegratorConfig = IntegratorConfig(),
             tol=1e-10):
    """First derivative of the reduction map at (xi, eta).

    Integrates, in one pass: the straightened orbit, the defect q(t) (by its
    own ODE from the converged Q), the first variational flow U(t), the
    left-evolved reversible slow process Y(s) = Z(0, s), and the accumulating
    defect-derivative integral.  Returns the pair (P1, Q1) with
    P1 = (0, I) - Q1 of shape (n, m+n).
    """
    sys_t = ssys.system
    if not sys_t.has_derivatives(1):
        raise CapabilityError("dp_point needs derivatives of the straightened system "
                              "(smooth h with a second derivative)")
    mu_p = _mu_prime(cert)
    if 2.0 * cert.N1 >= mu_p:
        raise InfeasibleBudgetError("derivative budget 2 N1 < mu' violated")
    m, n = sys_t.m, sys_t.n
    d = m + n
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    if not (np.allclose(xi, result.xi) and np.allclose(eta, result.eta)):
        raise PreconditionError("result was computed at a different point")

    xin = float(sys_t.norm_x(xi))
    rate = mu_p - 2.0 * cert.N1
    amp = max(cert.K * max(xin, 1.0) * (cert.N1 + 1.0), 10 * tol)
    T = math.log(amp / tol) / rate

    sU, sY, sG = d * d, n * n, n * d

    def unpack(u):
        o = 0
        xt = u[o:o + m]; o += m
        y = u[o:o + n]; o += n
        q = u[o:o + n]; o += n
        U = u[o:o + sU].reshape(d, d); o += sU
        Y = u[o:o + sY].reshape(n, n); o += sY
        G = u[o:].reshape(n, d)
        return xt, y, q, U, Y, G

    zeros_m = np.zeros(m)

    def fld(t, u):
        xt, y, q, U, Y, G = unpack(u)
        p = y - q
        Fv = sys_t.eval_F(xt, y)
        gv = sys_t.eval_g(xt, y)
        g0p = sys_t.eval_g(zeros_m, p)
        DF = sys_t.eval_DF(xt, y)
        Dg = sys_t.eval_Dg(xt, y)
        J = np.concatenate([DF, Dg], axis=0)
        Az = sys_t.Dyg(zeros_m, p)
        dU = J @ U
        dY = -Y @ Az
        integrand = Y @ (Az @ U[m:, :] - Dg @ U)
        return np.concatenate([Fv, gv, gv - g0p, dU.ravel(), dY.ravel(),
                               integrand.ravel()])

    u0 = np.concatenate([xi, eta, result.Q, np.eye(d).ravel(), np.eye(n).ravel(),
                         np.zeros(sG)])
    n_steps = cfg_int.steps_for(T)
    times, path = rk4_path(fld, u0, 0.0, T, n_steps)
    *_, G = unpack(path[-1])
    Q1 = G
    P1 = np.concatenate([np.zeros((n, m)), np.eye(n)], axis=1) - Q1
    return P1, Q1


def decompose_orbit(sys: FastSlowSystem, h, result: ReductionResult, t_max,
                    cfg_int: IntegratorConfig = IntegratorConfig()):
    """Matched-asymptotics split of the original-coordinates orbit:

        orbit(t) = outer(t) + layer(t),

    outer the slow-manifold orbit from the projected point (h(P), P), layer
    the exponentially decaying correction.  Reconstruction is exact by
    construction; the layer magnitude is the caller's to check against the
    certified decay.
    """
    if not result.report.converged:
        raise PreconditionError("decompose_orbit needs a converged result")
    hf = as_slow_function(h)
    P = result.P
    x0 = np.asarray(hf(result.eta), dtype=float) + result.xi   # original x of the query
    orbit = flow(sys, x0, result.eta, (0.0, float(t_max)), cfg_int, check_domain=False)
    outer = flow(sys, np.asarray(hf(P), dtype=float), P, (0.0, float(t_max)), cfg_int,
                 check_domain=False)
    layer = OrbitPath(orbit.times, orbit.fast - outer.fast, orbit.slow - outer.slow,
                      meta={"dt": cfg_int.dt, "horizon": float(t_max)})
    return outer, layer
