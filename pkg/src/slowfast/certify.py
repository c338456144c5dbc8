"""Estimation and validation of the constants behind every contraction argument:
the process bound (K, mu), the Lipschitz/sup constants (M0, M1x, M1y, N0, N1),
the delta/rho budgets, and the frozen-coefficient window machinery for slowly
driven linear systems.

Sampled values are falsifiable estimates, not proofs: sups are approached from
below, decay rates from above.  Every hypothesis predicate is a pure function
of the certificate fields, applied with a configurable relative margin to
absorb sampling noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
import numpy as np

from .core import FastSlowSystem, as_slow_function
from .errors import (CapabilityError, InfeasibleBudgetError, NoDecayError,
                     NumericError, PreconditionError)
from .integrate import IntegratorConfig

_FIELDS = ("K", "mu", "M0", "M1x", "M1y", "N0", "N1", "delta", "rho")


@dataclass(frozen=True)
class ConstantsCertificate:
    """The constant bundle with per-field provenance and hypothesis predicates."""

    K: float = float("nan")
    mu: float = float("nan")
    M0: float = float("nan")
    M1x: float = float("nan")
    M1y: float = float("nan")
    N0: float = float("nan")
    N1: float = float("nan")
    delta: float = float("nan")
    rho: float = float("nan")
    provenance: dict = field(default_factory=dict)
    margin: float = 0.01

    def _lt(self, lhs, rhs):
        """Strict inequality with relative safety margin."""
        return lhs * (1.0 + self.margin) < rhs

    @property
    def H_ok(self):
        return (self.K >= 1.0 and self.mu > 0.0
                and self._lt(self.K * self.M1x, self.mu))

    @property
    def existence_ok(self):
        gap = self.mu - self.K * self.M1x - self.N1 * (self.delta + 1.0)
        return (self.H_ok and gap > 0.0
                and self._lt(self.K * self.M1y, self.delta * gap))

    @property
    def smooth_ok(self):
        gap = self.mu - self.K * self.M1x - self.N1 * (self.rho + 1.0)
        return (self.H_ok and gap > 0.0
                and self._lt(self.K * self.M1y, self.rho * gap))

    @property
    def reduction_ok(self):
        return self._lt(self.K * self.N1, self.mu)

    @property
    def ball_radius(self):
        return self.K * self.M0 / self.mu + self.delta

    def contraction_rate(self):
        return self.mu - self.K * self.M1x

    def lp_ratio(self):
        """Contraction factor of the manifold map on the delta-ball."""
        gap = self.mu - self.K * self.M1x - self.N1 * (self.delta + 1.0)
        return self.K * self.M1y / ((self.delta + 1.0) * gap)

    def dh_ratio(self):
        """Contraction factor of the derivative map at weight rho."""
        gap = self.mu - self.K * self.M1x - self.N1 * (self.rho + 1.0)
        return self.K * self.M1y / (self.rho * gap)

    def hypothesis_table(self):
        def status(flag, needed):
            if any(math.isnan(getattr(self, f)) for f in needed):
                return "unknown"
            return "pass" if flag else "fail"

        return [
            ("H1 process decay (K, mu)", status(self.K >= 1.0 and self.mu > 0, ("K", "mu"))),
            ("H2 contraction K*M1x < mu", status(self.H_ok, ("K", "mu", "M1x"))),
            ("H3 timescale N1 < mu - K*M1x",
             status(self._lt(self.N1, self.mu - self.K * self.M1x), ("K", "mu", "M1x", "N1"))),
            ("existence (delta budget)", status(self.existence_ok,
                                                ("K", "mu", "M1x", "M1y", "N1", "delta"))),
            ("smoothness (rho budget)", status(self.smooth_ok,
                                               ("K", "mu", "M1x", "M1y", "N1", "rho"))),
            ("S1 straightened decay", status(self.H_ok, ("K", "mu", "M1x"))),
            ("S2 reduction K*N1 < mu", status(self.reduction_ok, ("K", "mu", "N1"))),
        ]

    def to_json(self):
        data = {f: getattr(self, f) for f in _FIELDS}
        data["provenance"] = dict(self.provenance)
        data["margin"] = self.margin
        data["hypotheses"] = {name: st for name, st in self.hypothesis_table()}
        return json.dumps(data, indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_dict(cls, data):
        kw = {f: float(data.get(f, float("nan"))) for f in _FIELDS}
        return cls(provenance=dict(data.get("provenance", {})),
                   margin=float(data.get("margin", 0.01)), **kw)


# -- (H1): process bound ------------------------------------------------------

class DriverSet:
    """A batch of slow driver paths, evaluated together.

    Each path is center + sum_k amp_k sin(om_k t + ph_k) per component; frozen
    paths have zero amplitude.  Time-shifted copies fold the shift into the
    phases, so sampling T(t, 0) over a shifted set covers T(t, s) of the
    originals.
    """

    def __init__(self, center, amp, om, ph):
        self.center = np.asarray(center, dtype=float)   # (B, n)
        self.amp = np.asarray(amp, dtype=float)          # (B, M, n)
        self.om = np.asarray(om, dtype=float)
        self.ph = np.asarray(ph, dtype=float)

    def __len__(self):
        return self.center.shape[0]

    def batch(self, t):
        """Values of all paths at scalar time t, shape (B, n)."""
        return self.center + np.sum(self.amp * np.sin(self.om * t + self.ph), axis=1)

    def __getitem__(self, i):
        def path(t, i=i):
            t = np.asarray(t, dtype=float)
            vals = self.amp[i] * np.sin(np.multiply.outer(t, self.om[i]) + self.ph[i])
            return self.center[i] + np.sum(vals, axis=-2)
        return path

    def shifted(self, shifts):
        reps = len(shifts)
        return DriverSet(np.repeat(self.center, reps, axis=0),
                         np.repeat(self.amp, reps, axis=0),
                         np.repeat(self.om, reps, axis=0),
                         (self.ph[:, None] + self.om[:, None]
                          * np.asarray(shifts)[None, :, None, None]).reshape(
                             -1, *self.ph.shape[1:]))


def band_limited_drivers(domain, N0, count, seed=0, modes=3, include_frozen=True):
    """Random smooth paths in the box with |psi'| <= N0, plus frozen worst cases.

    Fourier sums with amplitudes scaled to respect both the speed cap and the
    box; frozen paths sit at the box corners and center.
    """
    rng = np.random.default_rng(seed)
    lo, hi = domain.lower, domain.upper
    center, halfw = (lo + hi) / 2.0, (hi - lo) / 2.0
    centers, amps, oms, phs = [], [], [], []
    for _ in range(count):
        om = rng.uniform(0.1, 1.0, size=(modes, domain.n))
        ph = rng.uniform(0, 2 * np.pi, size=(modes, domain.n))
        amp = rng.uniform(0.2, 1.0, size=(modes, domain.n))
        speed = np.sum(np.abs(amp * om), axis=0)          # per-component |psi'| bound
        scale_speed = N0 / (np.linalg.norm(speed) + 1e-300)
        scale_box = np.min(halfw / (np.sum(amp, axis=0) + 1e-300))
        s = min(1.0, scale_speed, scale_box)
        centers.append(center)
        amps.append(amp * s)
        oms.append(om)
        phs.append(ph)
    if include_frozen:
        for c in (lo, hi, center):
            centers.append(c)
            amps.append(np.zeros((modes, domain.n)))
            oms.append(np.ones((modes, domain.n)))
            phs.append(np.zeros((modes, domain.n)))
    return DriverSet(np.stack(centers), np.stack(amps), np.stack(oms), np.stack(phs))


def estimate_process_bound(sys: FastSlowSystem, drivers, t_max,
                           cfg: IntegratorConfig, probe="auto", n_probes=10,
                           shifts=4, sample_stride=None, seed=0):
    """Sampled (K, mu) with |T0(t,s; psi) xi| <= K e^{-mu (t-s)} |xi|.

    All (driver, start-shift) combinations are integrated as one batched
    linear solve and the operator norm sampled along the way.  mu is the
    smallest pairwise decay rate -log||T||/gap over the tail half of the gap
    range (so the claimed rate is what the worst sampled pair actually shows);
    K is the max over all samples of ||T|| e^{mu * gap}.  Operator norms are
    exact for m <= 8 and probed with random unit vectors above that.
    """
    if not isinstance(drivers, DriverSet):
        raise TypeError("drivers must be a DriverSet (band_limited_drivers / frozen_drivers)")
    dset = drivers
    if len(dset) == 0:
        raise ValueError("need a non-empty driver sample")
    if shifts > 1:
        dset = dset.shifted(np.linspace(0.0, 0.5 * t_max, shifts))
    B, m = len(dset), sys.m
    if probe == "auto":
        probe = "matrix" if m <= 8 else "vectors"
    if probe == "matrix" and m > 64:
        raise CapabilityError("full-operator mode is limited to m <= 64")

    if probe == "matrix":
        U = np.broadcast_to(np.eye(m), (B, m, m)).copy()

        def norms(U):
            return np.asarray([_op_norm(sys, U[b]) for b in range(B)])
    else:
        rng = np.random.default_rng(seed)
        V = rng.normal(size=(B, n_probes, m))
        V /= np.maximum(sys.norm_x(V)[..., None], 1e-300)
        U = V

        def norms(U):
            return np.max(sys.norm_x(U), axis=-1)

    def field(t, U):
        A = sys.eval_A0(dset.batch(t))
        return np.einsum("bij,b...j->b...i", A, U)

    n_steps = cfg.steps_for(t_max)
    stride = sample_stride or max(1, n_steps // 80)
    h = t_max / n_steps
    gaps, lognorms = [], []
    t, cur = 0.0, U
    for k in range(n_steps):
        k1 = field(t, cur)
        k2 = field(t + h / 2, cur + (h / 2) * k1)
        k3 = field(t + h / 2, cur + (h / 2) * k2)
        k4 = field(t + h, cur + h * k3)
        cur = cur + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = (k + 1) * h
        if (k + 1) % stride == 0 or k + 1 == n_steps:
            gaps.append(np.full(B, t))
            lognorms.append(np.log(np.maximum(norms(cur), 1e-300)))
    gaps = np.concatenate(gaps)
    lognorms = np.concatenate(lognorms)

    tail = gaps >= 0.5 * t_max
    rates = -lognorms[tail] / gaps[tail]
    mu = float(np.min(rates))
    if mu <= 0:
        raise NoDecayError(f"sampled process norms grow (worst tail rate {mu:.3g} <= 0)")
    K = max(1.0, float(np.max(np.exp(lognorms + mu * gaps))))
    return K, mu


def frozen_drivers(points):
    """A DriverSet of constant paths through the given slow points (N, n)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    B, n = pts.shape
    return DriverSet(pts, np.zeros((B, 1, n)), np.ones((B, 1, n)), np.zeros((B, 1, n)))


def _op_norm(sys, M):
    """Operator norm induced by the fast-space norm."""
    if sys.norm_kind == "sup":
        return float(np.max(np.sum(np.abs(M), axis=1)))
    if sys.norm_kind == "euclidean":
        return float(np.linalg.norm(M, 2))
    w = np.sqrt(np.asarray(sys.quad_weights, dtype=float))
    return float(np.linalg.norm((M * w[None, :]) / w[:, None], 2))


# -- (H2)/(H3): Lipschitz and sup constants -----------------------------------

def estimate_lipschitz(sys: FastSlowSystem, n_samples=2000, x_radius=2.0,
                       seed=0, pair_scale=1e-4, overrides=None):
    """Sampled sup / difference-quotient estimates of (M0, M1x, M1y, N1, N0).

    Lower bounds on the true constants (sampling never overshoots a sup).
    `overrides` entries replace sampled values and are marked as supplied.
    """
    if n_samples < 1000:
        raise PreconditionError("sampling budget must be at least 10^3")
    rng = np.random.default_rng(seed)
    values = {"M0": 0.0, "M1x": 0.0, "M1y": 0.0, "N0": 0.0, "N1": 0.0}
    # fixed chunk size: a larger budget at the same seed replays the smaller
    # budget's chunks exactly, so sampled sups are monotone in the budget
    chunk = 1000
    done = 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        done += b
        ys = sys.domain.sample(rng, b)
        xs = rng.uniform(-x_radius, x_radius, size=(b, sys.m))

        values["M0"] = max(values["M0"], float(np.max(sys.norm_x(sys.R0(xs, ys)))))
        values["N0"] = max(values["N0"], float(np.max(sys.norm_y(sys.eval_g(xs, ys)))))

        # difference quotients: small offsets pick up local slopes, random
        # pairs the non-local variation
        dx = rng.normal(size=xs.shape)
        dx *= pair_scale / np.maximum(np.linalg.norm(dx, axis=-1, keepdims=True), 1e-300)
        q = sys.norm_x(sys.R0(xs + dx, ys) - sys.R0(xs, ys)) / sys.norm_x(dx)
        xs2 = rng.uniform(-x_radius, x_radius, size=xs.shape)
        qp = sys.norm_x(sys.R0(xs2, ys) - sys.R0(xs, ys)) \
            / np.maximum(sys.norm_x(xs2 - xs), 1e-300)
        values["M1x"] = max(values["M1x"], float(np.max(q)), float(np.max(qp)))

        dy = rng.normal(size=ys.shape)
        dy *= pair_scale / np.maximum(np.linalg.norm(dy, axis=-1, keepdims=True), 1e-300)
        qy = sys.norm_x(sys.eval_F(xs, ys + dy) - sys.eval_F(xs, ys)) / sys.norm_y(dy)
        ys2 = sys.domain.sample(rng, b)
        qyp = sys.norm_x(sys.eval_F(xs, ys2) - sys.eval_F(xs, ys)) \
            / np.maximum(sys.norm_y(ys2 - ys), 1e-300)
        values["M1y"] = max(values["M1y"], float(np.max(qy)), float(np.max(qyp)))

        du = np.concatenate([dx, dy], axis=-1)
        qg = sys.norm_y(sys.eval_g(xs + dx, ys + dy) - sys.eval_g(xs, ys)) \
            / np.maximum(np.linalg.norm(du, axis=-1), 1e-300)
        qgp = sys.norm_y(sys.eval_g(xs2, ys2) - sys.eval_g(xs, ys)) \
            / np.maximum(np.sqrt(sys.norm_x(xs2 - xs) ** 2 + sys.norm_y(ys2 - ys) ** 2),
                         1e-300)
        values["N1"] = max(values["N1"], float(np.max(qg)), float(np.max(qgp)))
    provenance = {k: "sampled" for k in values}
    for k, v in (overrides or {}).items():
        if k not in values:
            raise ValueError(f"unknown override {k!r}")
        values[k] = float(v)
        provenance[k] = "supplied"
    return values, provenance


# -- budgets -------------------------------------------------------------------

_DELTA_FLOOR = 64 * np.finfo(float).eps


def delta_budget(cert: ConstantsCertificate):
    """delta = 2 K M1y / (mu - K M1x) and the slow-Lipschitz cap that makes the
    existence inequality hold for every N1 below it.

    Degenerate M1y = 0 returns a machine-floor delta; then any
    N1 < (mu - K M1x)/2 suffices.
    """
    gap = cert.mu - cert.K * cert.M1x
    if gap <= 0:
        raise InfeasibleBudgetError("K*M1x >= mu: no contraction budget exists")
    delta = 2.0 * cert.K * cert.M1y / gap
    degenerate = delta <= _DELTA_FLOOR
    if degenerate:
        delta = _DELTA_FLOOR
    n1_cap = gap / (2.0 * (delta + 1.0))
    return delta, n1_cap


def rho_budget(cert: ConstantsCertificate, tol=1e-10):
    """Smallest rho > delta with N1 (rho+1) < mu - K M1x and
    K M1y / (mu - K M1x - N1 (rho+1)) < rho, by bisection on the feasible edge.
    """
    gap = cert.mu - cert.K * cert.M1x
    if gap <= 0:
        raise InfeasibleBudgetError("K*M1x >= mu")
    delta = cert.delta if np.isfinite(cert.delta) else 0.0
    if cert.N1 <= 0:
        rho = max(delta, cert.K * cert.M1y / gap) * (1.0 + 1e-9) + 1e-15
        return rho

    cap = gap / cert.N1 - 1.0
    if cap <= delta:
        raise InfeasibleBudgetError("no admissible rho above delta")

    def feasible(rho):
        g = gap - cert.N1 * (rho + 1.0)
        return g > 0 and cert.K * cert.M1y < rho * g

    grid = np.linspace(delta, cap, 512)[1:-1]
    ok = [r for r in grid if feasible(r)]
    if not ok:
        raise InfeasibleBudgetError("no admissible rho for this certificate")
    hi = ok[0]
    lo = delta
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    rho = float(hi * (1.0 + 1e-9))
    assert rho > delta
    return rho


# -- frozen-coefficient window machinery --------------------------------------

def frozen_coefficient_window(K, mu, eps):
    """Smallest window l with K e^{-mu l} <= e^{-(mu-eps) l}, i.e. l = ln(K)/eps.

    If the generator drifts by at most eps/K over any window of length l, the
    driven process obeys ||T(t,s)|| <= K e^{-(mu-eps)(t-s)}.
    """
    if K < 1.0:
        raise ValueError("K must be >= 1")
    if not 0 < eps < mu:
        raise ValueError("need 0 < eps < mu")
    return math.log(K) / eps


def slow_drift_budget(K, mu_tilde, mu_target, M1nu):
    """Caps (M0_cap, N0_cap, l) so that K (M1nu N0 l + 2 M0) <= mu_tilde - mu_target.

    l satisfies K e^{-mu_tilde l} <= e^{-mu_target l}; the budget is split
    equally between the drift term and the remainder term.  K = 1 makes any
    l admissible; the convention then is l = 1.
    """
    if not 0 < mu_target < mu_tilde:
        raise ValueError("need 0 < mu_target < mu_tilde")
    if K < 1.0:
        raise ValueError("K must be >= 1")
    if M1nu <= 0:
        raise InfeasibleBudgetError("drift Lipschitz constant must be positive")
    l = 1.0 if K == 1.0 else math.log(K) / (mu_tilde - mu_target)
    budget = mu_tilde - mu_target
    N0_cap = budget / (2.0 * K * M1nu * l)
    M0_cap = budget / (4.0 * K)
    assert K * (M1nu * N0_cap * l + 2.0 * M0_cap) <= budget * (1 + 1e-12)
    return M0_cap, N0_cap, l


# -- spectral gap --------------------------------------------------------------

@dataclass(frozen=True)
class SpectralGapResult:
    max_real: float
    mu_req: float
    ok: bool

    @property
    def margin(self):
        return -self.max_real - self.mu_req


def spectral_gap_check(sys: FastSlowSystem, h0, mu_req) -> SpectralGapResult:
    """Max over grid nodes y of max Re spec(D_x F(h0(y), y)) against -mu_req."""
    if sys.m > 512:
        raise CapabilityError("dense eigenvalue check limited to m <= 512")
    h0f = as_slow_function(h0)
    worst = -np.inf
    for y in sys.domain.node_coords():
        x = np.asarray(h0f(y), dtype=float)
        if sys.DF is not None:
            J = sys.DxF(x, y)
        else:
            from .core import _fd_dx
            J = _fd_dx(sys.eval_F, x, y, sys.m)
        try:
            lam = np.linalg.eigvals(J)
        except np.linalg.LinAlgError as exc:  # pragma: no cover
            raise NumericError(f"eigensolver failed at y = {y}") from exc
        worst = max(worst, float(np.max(lam.real)))
    return SpectralGapResult(max_real=worst, mu_req=float(mu_req), ok=worst < -mu_req)


# -- assembly ------------------------------------------------------------------

def straightened_constants(cert: ConstantsCertificate, dh_sup):
    """(S1)/(S2) constants of the straightened system from the original bundle:
    mu' = mu - K M1x, N1' = (1 + ||Dh||) N1."""
    mu_p = cert.mu - cert.K * cert.M1x
    if mu_p <= 0:
        raise InfeasibleBudgetError("K*M1x >= mu: straightened system has no decay")
    n1_p = (1.0 + float(dh_sup)) * cert.N1
    prov = dict(cert.provenance)
    prov.update(mu="closed-form", M1x="closed-form", N1="closed-form")
    return replace(cert, mu=mu_p, M1x=0.0, N1=n1_p, provenance=prov)


def assemble_certificate(sys: FastSlowSystem, cfg: IntegratorConfig = IntegratorConfig(),
                         seed=0, n_samples=2000, x_radius=2.0, t_max=10.0,
                         n_drivers=4, overrides=None, margin=0.01,
                         process_dt=0.02) -> ConstantsCertificate:
    """Full estimation pipeline: Lipschitz bundle first (its N0 caps the driver
    speed), then (K, mu) from sampled drivers, then the delta and rho budgets."""
    overrides = dict(overrides or {})
    prov = {}
    lip_over = {k: v for k, v in overrides.items() if k in ("M0", "M1x", "M1y", "N0", "N1")}
    values, lip_prov = estimate_lipschitz(sys, n_samples=n_samples, x_radius=x_radius,
                                          seed=seed, overrides=lip_over)
    prov.update(lip_prov)
    if "K" in overrides and "mu" in overrides:
        K, mu = float(overrides.pop("K")), float(overrides.pop("mu"))
        prov.update(K="supplied", mu="supplied")
    else:
        drivers = band_limited_drivers(sys.domain, max(values["N0"], 1e-6),
                                       n_drivers, seed=seed)
        cfg_p = IntegratorConfig(dt=max(cfg.dt, process_dt), max_steps=cfg.max_steps)
        K, mu = estimate_process_bound(sys, drivers, t_max, cfg_p)
        prov.update(K="sampled", mu="sampled")
    cert = ConstantsCertificate(K=K, mu=mu, margin=margin, provenance=prov, **values)
    if "delta" in overrides:
        cert = replace(cert, delta=float(overrides["delta"]))
        prov["delta"] = "supplied"
    else:
        delta, _ = delta_budget(cert)
        cert = replace(cert, delta=delta)
        prov["delta"] = "closed-form"
    if "rho" in overrides:
        cert = replace(cert, rho=float(overrides["rho"]))
        prov["rho"] = "supplied"
    else:
        try:
            rho = rho_budget(cert)
            prov["rho"] = "closed-form"
        except InfeasibleBudgetError:
            rho = float("nan")
            prov["rho"] = "infeasible"
        cert = replace(cert, rho=rho)
    return replace(cert, provenance=prov)
