"""Domain types for fast-slow systems: states, grids, grid functions, systems.

A fast-slow system here is the autonomous pair

    x' = F(x, y) = A0(y) x + R0(x, y),      x in R^m  (the fast space),
    y' = g(x, y),                           y in a compact box Vbar in R^n,

with A0(y) = D_x F(0, y).  The fast space may carry a non-Euclidean norm
(sup norm, or a quadrature-weighted norm standing in for a discretized
function space).  Everything downstream (norm estimates, contraction
certificates) is generic in that norm.

All types here are immutable after construction (grid-function value arrays
are treated as frozen by convention) and every evaluation is pure, so
concurrent sweeps over grids or parameter sets need no locking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CapabilityError, DomainError, PreconditionError

NORM_KINDS = ("euclidean", "sup", "weighted-quadrature")


def vector_norm(v, kind="euclidean", weights=None):
    """Norm of v along its last axis.  Batched input is fine."""
    v = np.asarray(v, dtype=float)
    if kind == "euclidean":
        return np.linalg.norm(v, axis=-1)
    if kind == "sup":
        return np.max(np.abs(v), axis=-1)
    if kind == "weighted-quadrature":
        if weights is None:
            raise ValueError("weighted-quadrature norm needs weights")
        w = np.asarray(weights, dtype=float)
        return np.sqrt(np.sum(w * v * v, axis=-1))
    raise ValueError(f"unknown norm kind {kind!r}")


@dataclass(frozen=True)
class FastState:
    """A point of the fast space together with the norm it is measured in."""

    coords: np.ndarray
    norm_kind: str = "euclidean"
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        coords = np.atleast_1d(np.asarray(self.coords, dtype=float))
        if coords.ndim != 1:
            raise ValueError("FastState coords must be a vector")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.norm_kind!r}")
        if self.norm_kind == "weighted-quadrature":
            w = np.asarray(self.weights, dtype=float)
            if w.shape != coords.shape or np.any(w <= 0):
                raise ValueError("quadrature weights must be positive, one per coord")
            object.__setattr__(self, "weights", w)
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self):
        return self.coords.shape[0]

    def norm(self):
        return float(vector_norm(self.coords, self.norm_kind, self.weights))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.coords, dtype=dtype)


@dataclass(frozen=True)
class GridDomain:
    """Compact box Vbar = prod_a [lower_a, upper_a] with a uniform tensor grid."""

    lower: np.ndarray
    upper: np.ndarray
    points_per_axis: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        pts = np.atleast_1d(np.asarray(self.points_per_axis, dtype=int))
        if pts.shape == (1,) and lo.shape[0] > 1:
            pts = np.full(lo.shape, pts[0])
        if not (lo.shape == hi.shape == pts.shape) or lo.ndim != 1 or lo.size < 1:
            raise ValueError("lower/upper/points_per_axis must be matching vectors")
        if not np.all(lo < hi):
            raise ValueError("need lower < upper componentwise")
        if not np.all(pts >= 2):
            raise ValueError("need at least 2 grid points per axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "points_per_axis", pts)

    @property
    def n(self):
        return self.lower.shape[0]

    @property
    def shape(self):
        return tuple(int(p) for p in self.points_per_axis)

    @property
    def spacing(self):
        return (self.upper - self.lower) / (self.points_per_axis - 1)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.upper - self.lower))

    def axes(self):
        return [np.linspace(self.lower[a], self.upper[a], self.shape[a]) for a in range(self.n)]

    @property
    def node_count(self):
        return int(np.prod(self.points_per_axis))

    def node_coords(self):
        """All grid nodes as an (N, n) array, C-ordered over the tensor grid."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def contains(self, y, rtol=1e-12):
        y = np.asarray(y, dtype=float)
        slack = rtol * np.maximum(1.0, np.abs(self.upper - self.lower))
        return np.all((y >= self.lower - slack) & (y <= self.upper + slack), axis=-1)

    def clamp(self, y):
        return np.clip(np.asarray(y, dtype=float), self.lower, self.upper)

    def refine(self, factor=2):
        """Same box, every grid cell split `factor` times per axis."""
        new_pts = (self.points_per_axis - 1) * int(factor) + 1
        return GridDomain(self.lower, self.upper, new_pts)

    def sample(self, rng, size):
        return rng.uniform(self.lower, self.upper, size=(size, self.n))


@dataclass(frozen=True)
class SlowState:
    """A point of the slow box.  Out-of-domain coordinates are an error, never clamped."""

    coords: np.ndarray
    domain: GridDomain

    def __post_init__(self):
        coords = np.atleast_1d(np.asarray(self.coords, dtype=float))
        if coords.shape != (self.domain.n,):
            raise ValueError("SlowState dimension does not match its domain")
        if not self.domain.contains(coords):
            raise DomainError(f"slow state {coords} outside box "
                              f"[{self.domain.lower}, {self.domain.upper}]")
        object.__setattr__(self, "coords", coords)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.coords, dtype=dtype)


def _flat_norm(values):
    """Euclidean norm over all trailing (value) axes, batched over the first axes."""
    return np.sqrt(np.sum(values * values, axis=tuple(range(-(values.ndim - 1), 0)))) \
        if values.ndim > 1 else np.abs(values)


class GridFunction:
    """A map sigma: Vbar -> values sampled on the tensor grid, with multilinear
    interpolation between nodes.

    `values` has shape grid_shape + value_shape; value_shape may be (m,) for a
    manifold parameterization, (m, n) for a derivative field, (m, n, n) for a
    second-derivative field.  Evaluation at a grid node returns the stored
    value exactly.  Evaluation outside the box uses constant (clamped)
    extension, which preserves both the sup norm and the Lipschitz estimate.
    """

    def __init__(self, domain: GridDomain, values, value_norm=None):
        values = np.asarray(values, dtype=float)
        if values.shape[: domain.n] != domain.shape:
            raise ValueError("values leading shape must equal the grid shape")
        self.domain = domain
        self.values = values
        self.value_shape = values.shape[domain.n:]
        self._flat = values.reshape((domain.node_count,) + self.value_shape)
        self.value_norm = value_norm

    @classmethod
    def from_callable(cls, domain, fn, value_norm=None, vectorized=True):
        nodes = domain.node_coords()
        if vectorized:
            vals = np.asarray(fn(nodes), dtype=float)
        else:
            vals = np.stack([np.asarray(fn(nodes[i]), dtype=float)
                             for i in range(nodes.shape[0])])
        vals = vals.reshape(domain.shape + vals.shape[1:])
        return cls(domain, vals, value_norm=value_norm)

    @classmethod
    def zeros(cls, domain, value_shape=(), value_norm=None):
        return cls(domain, np.zeros(domain.shape + tuple(value_shape)), value_norm=value_norm)

    def with_values(self, values):
        return GridFunction(self.domain, values, value_norm=self.value_norm)

    def copy(self):
        return self.with_values(self.values.copy())

    def __call__(self, y):
        """Multilinear interpolation at y of shape (..., n); clamped outside."""
        dom = self.domain
        y = np.asarray(y, dtype=float)
        lead = y.shape[:-1]
        yf = y.reshape(-1, dom.n)
        t = (dom.clamp(yf) - dom.lower) / dom.spacing          # in [0, P-1]
        i0 = np.minimum(np.floor(t).astype(int), np.asarray(dom.shape) - 2)
        i0 = np.maximum(i0, 0)
        frac = t - i0
        strides = np.cumprod((dom.shape + (1,))[::-1])[::-1][1:]  # ravel strides
        base = i0 @ strides
        out = np.zeros((yf.shape[0],) + self.value_shape)
        for corner in range(2 ** dom.n):
            offs = np.array([(corner >> a) & 1 for a in range(dom.n)])
            w = np.prod(np.where(offs, frac, 1.0 - frac), axis=-1)
            idx = base + offs @ strides
            out += w.reshape((-1,) + (1,) * len(self.value_shape)) * self._flat[idx]
        return out.reshape(lead + self.value_shape)

    def node_norms(self):
        if self.value_norm is not None:
            return np.asarray([self.value_norm(v) for v in self._flat])
        return _flat_norm(self._flat.reshape(self._flat.shape[0], -1))

    def sup_norm(self):
        """Max over grid nodes of the value norm (exact on nodes by definition)."""
        return float(np.max(self.node_norms()))

    def lipschitz_estimate(self):
        """Max over adjacent node pairs of |delta sigma| / |delta eta|.

        A lower bound on the true Lipschitz constant of the interpolant.
        """
        dom = self.domain
        best = 0.0
        for a in range(dom.n):
            d = np.diff(self.values, axis=a)
            flat = d.reshape(-1, int(np.prod(self.value_shape)) or 1)
            if self.value_norm is not None:
                norms = np.asarray([self.value_norm(v.reshape(self.value_shape)) for v in flat])
            else:
                norms = _flat_norm(flat)
            if norms.size:
                best = max(best, float(np.max(norms)) / dom.spacing[a])
        return best

    def ball_norm(self, safety=1.1):
        """sup norm plus safety * Lipschitz estimate; used for ball membership."""
        return self.sup_norm() + safety * self.lipschitz_estimate()


def as_slow_function(sigma):
    """Coerce a GridFunction or plain callable into a callable y -> value."""
    if isinstance(sigma, GridFunction):
        return sigma
    if callable(sigma):
        return sigma
    raise TypeError("expected GridFunction or callable")


@dataclass
class FastSlowSystem:
    """The pair (F, g) with its linearization A0 and optional derivatives.

    Callables take plain arrays.  With ``vectorized=True`` they must accept
    stacked inputs x: (..., m), y: (..., n) broadcasting over leading axes;
    otherwise the system wraps them in a loop.  Derivative conventions:

      DF(x, y)  -> (m, m+n)      Jacobian w.r.t. the joint variable (x, y)
      Dg(x, y)  -> (n, m+n)
      D2F(x, y) -> (m, m+n, m+n) symmetric bilinear second derivative
      D2g(x, y) -> (n, m+n, m+n)
    """

    m: int
    n: int
    F: Callable
    g: Callable
    A0: Callable
    domain: GridDomain
    DF: Optional[Callable] = None
    Dg: Optional[Callable] = None
    D2F: Optional[Callable] = None
    D2g: Optional[Callable] = None
    boundary_flag: bool = False
    norm_kind: str = "euclidean"
    quad_weights: Optional[np.ndarray] = None
    vectorized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("systems with no slow variables (n = 0) are not supported")
        if self.m < 1:
            raise ValueError("need at least one fast variable")
        if self.domain.n != self.n:
            raise ValueError("domain dimension does not match n")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.norm_kind!r}")

    # -- norms ------------------------------------------------------------
    def norm_x(self, v):
        return vector_norm(v, self.norm_kind, self.quad_weights)

    def norm_y(self, v):
        return vector_norm(v, "euclidean")

    def norm_xy(self, vx, vy):
        """Product norm on X x R^n: max of the component norms."""
        return np.maximum(self.norm_x(vx), self.norm_y(vy))

    # -- batched call wrappers ---------------------------------------------
    def _batched(self, fn, args, out_shape):
        arrs = [np.asarray(a, dtype=float) for a in args]
        if self.vectorized or all(a.ndim == 1 for a in arrs):
            return np.asarray(fn(*arrs), dtype=float)
        lead = np.broadcast_shapes(*[a.shape[:-1] for a in arrs])
        arrs = [np.broadcast_to(a, lead + a.shape[-1:]).reshape((-1, a.shape[-1]))
                for a in arrs]
        out = np.empty((arrs[0].shape[0],) + out_shape)
        for i in range(arrs[0].shape[0]):
            out[i] = fn(*[a[i] for a in arrs])
        return out.reshape(lead + out_shape)

    def eval_F(self, x, y):
        return self._batched(self.F, (x, y), (self.m,))

    def eval_g(self, x, y):
        return self._batched(self.g, (x, y), (self.n,))

    def eval_A0(self, y):
        return self._batched(self.A0, (y,), (self.m, self.m))

    def _need(self, name):
        fn = getattr(self, name)
        if fn is None:
            raise CapabilityError(f"system does not supply {name}")
        return fn

    def eval_DF(self, x, y):
        return self._batched(self._need("DF"), (x, y), (self.m, self.m + self.n))

    def eval_Dg(self, x, y):
        return self._batched(self._need("Dg"), (x, y), (self.n, self.m + self.n))

    def eval_D2F(self, x, y):
        d = self.m + self.n
        return self._batched(self._need("D2F"), (x, y), (self.m, d, d))

    def eval_D2g(self, x, y):
        d = self.m + self.n
        return self._batched(self._need("D2g"), (x, y), (self.n, d, d))

    def DxF(self, x, y):
        return self.eval_DF(x, y)[..., :, : self.m]

    def DyF(self, x, y):
        return self.eval_DF(x, y)[..., :, self.m:]

    def Dxg(self, x, y):
        return self.eval_Dg(x, y)[..., :, : self.m]

    def Dyg(self, x, y):
        return self.eval_Dg(x, y)[..., :, self.m:]

    def has_derivatives(self, order=1):
        if order >= 1 and (self.DF is None or self.Dg is None):
            return False
        if order >= 2 and (self.D2F is None or self.D2g is None):
            return False
        return True

    def R0(self, x, y):
        """Remainder of the linear decomposition, F(x,y) - A0(y) x."""
        x = np.asarray(x, dtype=float)
        ax = np.einsum("...ij,...j->...i", self.eval_A0(y), x)
        return self.eval_F(x, y) - ax


def eval_R0(sys: FastSlowSystem, x, y):
    """R0(x, y) with the slow argument checked against the box."""
    yv = np.asarray(y, dtype=float)
    if not np.all(sys.domain.contains(yv)):
        raise DomainError("eval_R0: slow argument outside the box")
    return sys.R0(np.asarray(x, dtype=float), yv)


# -- finite-difference consistency checks ----------------------------------

def _fd_jacobian(fn, u, h=1e-6):
    u = np.asarray(u, dtype=float)
    f0 = np.asarray(fn(u), dtype=float)
    cols = []
    for i in range(u.size):
        du = np.zeros_like(u)
        du[i] = h
        cols.append((np.asarray(fn(u + du)) - np.asarray(fn(u - du))) / (2 * h))
    return np.stack(cols, axis=-1), f0


def check_derivatives(sys: FastSlowSystem, n_points=100, seed=0, tol=1e-5, x_radius=1.0):
    """Max relative mismatch between supplied Jacobians and central differences.

    Also checks that A0 matches D_x F(0, y).  Raises nothing; returns the
    worst relative error so callers/tests can assert against their tolerance.
    """
    rng = np.random.default_rng(seed)
    ys = sys.domain.sample(rng, n_points)
    xs = rng.uniform(-x_radius, x_radius, size=(n_points, sys.m))
    worst = 0.0

    def rel(a, b):
        return float(np.max(np.abs(a - b)) / (1.0 + np.max(np.abs(b))))

    for x, y in zip(xs, ys):
        joint = lambda u: sys.eval_F(u[: sys.m], u[sys.m:])
        fd, _ = _fd_jacobian(joint, np.concatenate([x, y]))
        a0fd, _ = _fd_jacobian(lambda u: sys.eval_F(u, y), np.zeros(sys.m))
        worst = max(worst, rel(a0fd, sys.eval_A0(y)))
        if sys.DF is not None:
            worst = max(worst, rel(fd, sys.eval_DF(x, y)))
        if sys.Dg is not None:
            gfd, _ = _fd_jacobian(lambda u: sys.eval_g(u[: sys.m], u[sys.m:]),
                                  np.concatenate([x, y]))
            worst = max(worst, rel(gfd, sys.eval_Dg(x, y)))
    return worst


# -- epsilon augmentation ---------------------------------------------------

def augment_epsilon(sys: FastSlowSystem, eps_range, family=None) -> FastSlowSystem:
    """Append epsilon as a frozen slow variable: y~ = (y, eps), d/dt y~_{n+1} = 0.

    The epsilon-dependence must come from somewhere: pass ``family`` (a
    callable eps -> FastSlowSystem with the same dimensions) or store it in
    ``sys.meta['family']``.  The returned system evaluates the family member
    at the epsilon carried in the last slow coordinate.
    """
    lo, hi = float(eps_range[0]), float(eps_range[1])
    if not hi > lo:
        raise ValueError("empty eps_range")
    family = family or sys.meta.get("family")
    if family is None:
        raise CapabilityError("augment_epsilon needs an eps family "
                              "(argument or sys.meta['family'])")
    m, n = sys.m, sys.n
    dom = GridDomain(np.append(sys.domain.lower, lo),
                     np.append(sys.domain.upper, hi),
                     np.append(sys.domain.points_per_axis, 2))

    def split(yt):
        return yt[..., :n], yt[..., n]

    def F(x, yt):
        y, eps = split(yt)
        return _family_apply(family, eps, lambda s, xx, yy: s.eval_F(xx, yy), x, y, (m,))

    def g(x, yt):
        y, eps = split(yt)
        gy = _family_apply(family, eps, lambda s, xx, yy: s.eval_g(xx, yy), x, y, (n,))
        return np.concatenate([gy, np.zeros(gy.shape[:-1] + (1,))], axis=-1)

    def A0(yt):
        y, eps = split(yt)
        return _family_apply(family, eps, lambda s, xx, yy: s.eval_A0(yy), None, y, (m, m))

    return FastSlowSystem(m=m, n=n + 1, F=F, g=g, A0=A0, domain=dom,
                          boundary_flag=sys.boundary_flag, norm_kind=sys.norm_kind,
                          quad_weights=sys.quad_weights, vectorized=True,
                          meta={"augmented_from": sys.meta, "eps_range": (lo, hi)})


def _family_apply(family, eps, op, x, y, out_shape):
    eps = np.asarray(eps, dtype=float)
    if eps.ndim == 0:
        s = family(float(eps))
        return op(s, x if x is not None else None, y)
    flat_eps = eps.ravel()
    xb = None if x is None else np.broadcast_to(x, eps.shape + x.shape[-1:]).reshape(len(flat_eps), -1)
    yb = np.broadcast_to(y, eps.shape + y.shape[-1:]).reshape(len(flat_eps), -1)
    out = np.empty((len(flat_eps),) + out_shape)
    for i, e in enumerate(flat_eps):
        s = family(float(e))
        out[i] = op(s, None if xb is None else xb[i], yb[i])
    return out.reshape(eps.shape + out_shape)


# -- cutoff localization ------------------------------------------------------

@dataclass(frozen=True)
class CutoffSpec:
    """Smooth bump chi(r): 1 for r <= inner, 0 for r >= outer, C-infinity between."""

    inner: float = 0.5
    outer: float = 1.0

    def __post_init__(self):
        if not 0 < self.inner < self.outer:
            raise ValueError("need 0 < inner < outer")

    def chi(self, r):
        r = np.asarray(r, dtype=float)
        t = (r - self.inner) / (self.outer - self.inner)
        return _smooth_step(1.0 - t)

    def dchi(self, r, h=1e-6):
        # analytic derivative of the exp-type transition; FD-free
        r = np.asarray(r, dtype=float)
        t = (1.0 - (r - self.inner) / (self.outer - self.inner))
        return -_smooth_step_prime(t) / (self.outer - self.inner)


def _phi(s):
    """exp(-1/s) for s > 0, 0 otherwise; evaluated without overflow warnings."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    pos = s > 1e-12
    out[pos] = np.exp(-1.0 / s[pos])
    return out


def _smooth_step(t):
    """C-infinity monotone step: 0 for t <= 0, 1 for t >= 1."""
    t = np.asarray(t, dtype=float)
    a, b = _phi(t), _phi(1.0 - t)
    return a / (a + b + 1e-300)


def _smooth_step_prime(t):
    t = np.asarray(t, dtype=float)
    a, b = _phi(t), _phi(1.0 - t)
    da = np.zeros_like(t)
    db = np.zeros_like(t)
    pos = t > 1e-12
    da[pos] = a[pos] / t[pos] ** 2
    neg = (1.0 - t) > 1e-12
    db[neg] = b[neg] / (1.0 - t[neg]) ** 2
    denom = (a + b + 1e-300) ** 2
    return (da * b + a * db) / denom


def localize(sys: FastSlowSystem, h0, radius, bump: CutoffSpec = CutoffSpec(),
             dh0=None, tol=1e-8) -> FastSlowSystem:
    """Shift the critical sheet x = h0(y) to the origin and cut the remainder off.

    The returned system in xt = x - h0(y) is

        xt' = A(y) xt + chi(|xt|/radius) * R(xt, y),
        y'  = g(chi(|xt|/radius) * xt + h0(y), y),

    where A(y) is the exact fast linearization of the shifted field at xt = 0
    and R its remainder.  Inside |xt| <= radius*inner the flow coincides with
    the plain shifted system; beyond radius*outer the remainder vanishes, so
    the remainder sup M0 is finite.

    h0 (and optionally dh0) may be a GridFunction or a smooth callable;
    without dh0, the derivative of a callable h0 comes from central
    differences and of a GridFunction from node differences.
    """
    h0f = as_slow_function(h0)
    if isinstance(h0, GridFunction):
        nodes = h0.domain.node_coords()
        res = sys.norm_x(sys.eval_F(h0(nodes), nodes))
        if np.max(res) > tol:
            raise PreconditionError(
                f"h0 is not a critical sheet: max |F(h0(y),y)| = {np.max(res):.3e} > {tol:g}")
        if dh0 is None:
            dh0 = _grid_derivative(h0)
    else:
        nodes = sys.domain.node_coords()
        res = sys.norm_x(sys.eval_F(_call_on(h0f, nodes, sys.m), nodes))
        if np.max(res) > tol:
            raise PreconditionError(
                f"h0 is not a critical sheet: max |F(h0(y),y)| = {np.max(res):.3e} > {tol:g}")
        if dh0 is None:
            dh0 = _fd_slow_derivative(h0f, sys.m, sys.n)
    dh0f = as_slow_function(dh0)
    radius = float(radius)
    if radius <= 0:
        raise ValueError("radius must be positive")

    m, n = sys.m, sys.n

    def H(y):
        return _call_on(h0f, y, m)

    def DH(y):
        return _call_on(dh0f, y, m * n, shape=(m, n))

    def shifted_F(xt, y):
        x = xt + H(y)
        gval = sys.eval_g(x, y)
        return sys.eval_F(x, y) - np.einsum("...ij,...j->...i", DH(y), gval)

    def A(y):
        h = H(y)
        dxF = sys.DxF(h, y) if sys.DF is not None else _fd_dx(sys.eval_F, h, y, m)
        dxg = sys.Dxg(h, y) if sys.Dg is not None else _fd_dx(sys.eval_g, h, y, m)
        return dxF - np.einsum("...ij,...jk->...ik", DH(y), dxg)

    def chi_of(xt):
        return bump.chi(sys.norm_x(xt) / radius)

    def F_loc(xt, y):
        xt = np.asarray(xt, dtype=float)
        Ay = A(y)
        lin = np.einsum("...ij,...j->...i", Ay, xt)
        R = shifted_F(xt, y) - lin
        return lin + chi_of(xt)[..., None] * R

    def g_loc(xt, y):
        xt = np.asarray(xt, dtype=float)
        return sys.eval_g(chi_of(xt)[..., None] * xt + H(y), y)

    meta = dict(sys.meta)
    meta.update(localized_from=sys, h0=h0f, radius=radius, bump=bump)
    return FastSlowSystem(m=m, n=n, F=F_loc, g=g_loc, A0=A, domain=sys.domain,
                          boundary_flag=sys.boundary_flag, norm_kind=sys.norm_kind,
                          quad_weights=sys.quad_weights, vectorized=sys.vectorized,
                          meta=meta)


def _call_on(fn, y, flat_size, shape=None):
    out = np.asarray(fn(y), dtype=float)
    if shape is not None:
        y = np.asarray(y)
        want = y.shape[:-1] + shape
        return out.reshape(want)
    return out


def _grid_derivative(h0: GridFunction) -> GridFunction:
    """Central-difference derivative field of a grid function (one-sided at edges)."""
    dom = h0.domain
    vals = h0.values
    parts = []
    for a in range(dom.n):
        parts.append(np.gradient(vals, dom.spacing[a], axis=a))
    # stack as (..., m, n)
    d = np.stack(parts, axis=-1)
    return GridFunction(dom, d)


def _fd_slow_derivative(h0f, m, n, h=1e-6):
    def d(y):
        y = np.asarray(y, dtype=float)
        cols = []
        for a in range(n):
            dy = np.zeros_like(y)
            dy[..., a] = h
            cols.append((np.asarray(h0f(y + dy)) - np.asarray(h0f(y - dy))) / (2 * h))
        return np.stack(cols, axis=-1)
    return d


def _fd_dx(fn, x, y, m, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(m):
        dx = np.zeros_like(x)
        dx[..., i] = h
        cols.append((fn(x + dx, y) - fn(x - dx, y)) / (2 * h))
    return np.stack(cols, axis=-1)
