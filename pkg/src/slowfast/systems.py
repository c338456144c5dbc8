"""Built-in example systems with analytic oracles where they exist.

Five named systems are registered:

  L1       x' = -x + y,         y' = eps        (exact manifold y - eps)
  Q1       x' = -x + y^2,       y' = eps        (exact manifold y^2 - 2 eps y + 2 eps^2)
  L2       x' = -x,             y' = eps x      (manifold 0, reduction P = eta + eps xi)
  VDP-cut  cubic fast nullcline, attracting branch shifted and cut off
  NF1      quadrature-discretized integro-differential fast field with one
           slowly drifting gain parameter, sup norm over nodes

All callables broadcast over leading axes (vectorized systems).  Each system
stores `eps` and an `eps -> system` family in its meta so epsilon augmentation
and continuation sweeps can rebuild members.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import CutoffSpec, FastSlowSystem, GridDomain, localize


def _box(lo, hi, points):
    return GridDomain(np.atleast_1d(lo), np.atleast_1d(hi), np.atleast_1d(points))


# -- L1 -------------------------------------------------------------------------

def build_l1(eps=0.1, domain=(-0.5, 0.5), points=101):
    dom = _box(domain[0], domain[1], points)

    def F(x, y):
        return -x + y

    def g(x, y):
        return np.broadcast_to(float(eps), y.shape).copy()

    def A0(y):
        return np.broadcast_to(-np.eye(1), y.shape[:-1] + (1, 1)).copy()

    def DF(x, y):
        out = np.empty(x.shape[:-1] + (1, 2))
        out[..., 0, 0] = -1.0
        out[..., 0, 1] = 1.0
        return out

    def Dg(x, y):
        return np.zeros(x.shape[:-1] + (1, 2))

    def D2F(x, y):
        return np.zeros(x.shape[:-1] + (1, 2, 2))

    D2g = D2F
    return FastSlowSystem(m=1, n=1, F=F, g=g, A0=A0, domain=dom, DF=DF, Dg=Dg,
                          D2F=D2F, D2g=D2g, vectorized=True,
                          meta={"name": "L1", "eps": float(eps),
                                "family": lambda e: build_l1(e, domain, points)})


def l1_h(y, eps):
    return np.asarray(y, dtype=float) - eps


# -- Q1 -------------------------------------------------------------------------

def build_q1(eps=0.1, domain=(-1.0, 1.0), points=101):
    dom = _box(domain[0], domain[1], points)

    def F(x, y):
        return -x + y * y

    def g(x, y):
        return np.broadcast_to(float(eps), y.shape).copy()

    def A0(y):
        return np.broadcast_to(-np.eye(1), y.shape[:-1] + (1, 1)).copy()

    def DF(x, y):
        out = np.empty(x.shape[:-1] + (1, 2))
        out[..., 0, 0] = -1.0
        out[..., 0, 1] = 2.0 * y[..., 0]
        return out

    def Dg(x, y):
        return np.zeros(x.shape[:-1] + (1, 2))

    def D2F(x, y):
        out = np.zeros(x.shape[:-1] + (1, 2, 2))
        out[..., 0, 1, 1] = 2.0
        return out

    def D2g(x, y):
        return np.zeros(x.shape[:-1] + (1, 2, 2))

    return FastSlowSystem(m=1, n=1, F=F, g=g, A0=A0, domain=dom, DF=DF, Dg=Dg,
                          D2F=D2F, D2g=D2g, vectorized=True,
                          meta={"name": "Q1", "eps": float(eps),
                                "family": lambda e: build_q1(e, domain, points)})


def q1_h(y, eps):
    y = np.asarray(y, dtype=float)
    return y * y - 2.0 * eps * y + 2.0 * eps * eps


def q1_dh(y, eps):
    return 2.0 * np.asarray(y, dtype=float) - 2.0 * eps


# -- L2 -------------------------------------------------------------------------

def build_l2(eps=0.1, domain=(-1.0, 1.0), points=41):
    dom = _box(domain[0], domain[1], points)

    def F(x, y):
        return -x

    def g(x, y):
        return float(eps) * x

    def A0(y):
        return np.broadcast_to(-np.eye(1), y.shape[:-1] + (1, 1)).copy()

    def DF(x, y):
        out = np.zeros(x.shape[:-1] + (1, 2))
        out[..., 0, 0] = -1.0
        return out

    def Dg(x, y):
        out = np.zeros(x.shape[:-1] + (1, 2))
        out[..., 0, 0] = float(eps)
        return out

    def D2(x, y):
        return np.zeros(x.shape[:-1] + (1, 2, 2))

    return FastSlowSystem(m=1, n=1, F=F, g=g, A0=A0, domain=dom, DF=DF, Dg=Dg,
                          D2F=D2, D2g=D2, vectorized=True,
                          meta={"name": "L2", "eps": float(eps),
                                "family": lambda e: build_l2(e, domain, points)})


def l2_P(xi, eta, eps):
    """Closed-form reduction map of L2: the slow drift eta + eps xi."""
    return np.asarray(eta, dtype=float) + eps * np.asarray(xi, dtype=float)


# -- coupled variant (not in the named registry) ---------------------------------

def build_coupled(eps=0.02, domain=(-1.0, 1.0), points=81):
    """A genuinely coupled scalar system: the slow drift feels both variables,
    so the manifold map has a nonzero contraction factor and the reduction
    defect Q is nonzero.  The drift vanishes smoothly on the box boundary
    (boundary_flag), so orbits stay in the box for all time -- the setting in
    which every global estimate is stated.  Used to make contraction and
    defect-norm measurements non-trivial.
    """
    from .core import _smooth_step, _smooth_step_prime

    dom = _box(domain[0], domain[1], points)
    e = float(eps)
    lo, hi = float(domain[0]), float(domain[1])
    width = 0.25 * (hi - lo)

    def beta(y):
        # 1 in the core of the box, 0 on the boundary
        edge = np.minimum(y - lo, hi - y) / width
        return _smooth_step(edge)

    def dbeta(y):
        edge_lo = (y - lo) / width
        edge_hi = (hi - y) / width
        lower = edge_lo <= edge_hi
        d = np.where(lower, _smooth_step_prime(edge_lo) / width,
                     -_smooth_step_prime(edge_hi) / width)
        return d

    def base_g(x, y):
        return 1.0 + 0.3 * np.tanh(x[..., 0]) + 0.2 * np.sin(y[..., 0])

    def F(x, y):
        return -x + 0.5 * y + 0.25 * np.sin(y) + 0.1 * np.tanh(x) ** 3

    def g(x, y):
        return (e * base_g(x, y) * beta(y[..., 0]))[..., None]

    def A0(y):
        return np.broadcast_to(-np.eye(1), y.shape[:-1] + (1, 1)).copy()

    def DF(x, y):
        t = np.tanh(x[..., 0])
        out = np.empty(x.shape[:-1] + (1, 2))
        out[..., 0, 0] = -1.0 + 0.3 * t * t * (1.0 - t * t)
        out[..., 0, 1] = 0.5 + 0.25 * np.cos(y[..., 0])
        return out

    def Dg(x, y):
        t = np.tanh(x[..., 0])
        yy = y[..., 0]
        out = np.empty(x.shape[:-1] + (1, 2))
        out[..., 0, 0] = e * 0.3 * (1.0 - t * t) * beta(yy)
        out[..., 0, 1] = e * (0.2 * np.cos(yy) * beta(yy) + base_g(x, y) * dbeta(yy))
        return out

    def D2F(x, y):
        t = np.tanh(x[..., 0])
        s2 = 1.0 - t * t
        out = np.zeros(x.shape[:-1] + (1, 2, 2))
        out[..., 0, 0, 0] = 0.1 * (6.0 * t * s2 * s2 - 6.0 * t ** 3 * s2)
        out[..., 0, 1, 1] = -0.25 * np.sin(y[..., 0])
        return out

    return FastSlowSystem(m=1, n=1, F=F, g=g, A0=A0, domain=dom, DF=DF, Dg=Dg,
                          D2F=D2F, D2g=None, boundary_flag=True, vectorized=True,
                          meta={"name": "coupled", "eps": e,
                                "family": lambda x: build_coupled(x, domain, points)})


# -- VDP-cut ----------------------------------------------------------------------

def vdp_branch(y, x_init=2.0, iters=60, tol=1e-14):
    """Attracting outer branch of the cubic nullcline x - x^3/3 = y, x >= 1.5.

    Newton continuation; vectorized over y.
    """
    y = np.asarray(y, dtype=float)
    x = np.full(y.shape, float(x_init))
    for _ in range(iters):
        f = x - x ** 3 / 3.0 - y[..., 0] if y.ndim and y.shape[-1] == 1 else x - x ** 3 / 3.0 - y
        df = 1.0 - x * x
        step = f / df
        x = x - step
        if np.max(np.abs(step)) < tol:
            break
    return x


def _vdp_h0(y):
    y = np.asarray(y, dtype=float)
    x = vdp_branch(y[..., 0])
    return x[..., None]


def _vdp_dh0(y):
    y = np.asarray(y, dtype=float)
    x = vdp_branch(y[..., 0])
    return (1.0 / (1.0 - x * x))[..., None, None]


def build_vdp_raw(eps=0.005, domain=(-2.0, 0.0), points=81):
    dom = _box(domain[0], domain[1], points)
    e = float(eps)

    def F(x, y):
        return x - x ** 3 / 3.0 - y

    def g(x, y):
        return e * x

    def A0(y):
        return np.broadcast_to(np.eye(1), y.shape[:-1] + (1, 1)).copy()

    def DF(x, y):
        out = np.empty(x.shape[:-1] + (1, 2))
        out[..., 0, 0] = 1.0 - x[..., 0] ** 2
        out[..., 0, 1] = -1.0
        return out

    def Dg(x, y):
        out = np.zeros(x.shape[:-1] + (1, 2))
        out[..., 0, 0] = e
        return out

    return FastSlowSystem(m=1, n=1, F=F, g=g, A0=A0, domain=dom, DF=DF, Dg=Dg,
                          vectorized=True,
                          meta={"name": "VDP-raw", "eps": e,
                                "family": lambda x: build_vdp_raw(x, domain, points)})


def build_vdp_cut(eps=0.005, domain=(-2.0, 0.0), points=81, radius=0.1):
    """The outer-branch system shifted to the origin and cut off at `radius`."""
    raw = build_vdp_raw(eps, domain, points)
    loc = localize(raw, _vdp_h0, radius, CutoffSpec(), dh0=_vdp_dh0, tol=1e-10)
    loc.meta.update(name="VDP-cut", eps=float(eps), h0=_vdp_h0, dh0=_vdp_dh0,
                    family=lambda e: build_vdp_cut(e, domain, points, radius))
    return loc


# -- NF1 ---------------------------------------------------------------------------

_NF1_SHIFT = 0.4
_NF1_GAIN = 0.12
_NF1_CUT = CutoffSpec(inner=0.5, outer=1.0)   # applied to |u|/2: pure tanh up to 1


def _nf1_kernel(m, gain):
    xi = (np.arange(m) + 0.5) / m
    w = (np.sin(2 * np.pi * (xi[:, None] - xi[None, :]))
         + np.sin(2 * np.pi * xi)[:, None] - np.sin(2 * np.pi * xi)[None, :])
    return gain * w, xi


def _nf1_sigmoid(v):
    """Shifted tanh with its deviation from the tangent line cut off beyond |v| = 2."""
    a = _NF1_SHIFT
    s0 = math.tanh(a)
    s0p = 1.0 - s0 * s0
    t = np.tanh(v + a)
    dev = t - s0 - s0p * v
    return s0 + s0p * v + _NF1_CUT.chi(np.abs(v) / 2.0) * dev


def _nf1_sigmoid_prime(v):
    a = _NF1_SHIFT
    s0 = math.tanh(a)
    s0p = 1.0 - s0 * s0
    t = np.tanh(v + a)
    dev = t - s0 - s0p * v
    devp = (1.0 - t * t) - s0p
    chi = _NF1_CUT.chi(np.abs(v) / 2.0)
    dchi = _NF1_CUT.dchi(np.abs(v) / 2.0) * np.sign(v) / 2.0
    return s0p + dchi * dev + chi * devp


def build_nf1(eps=0.01, m=64, domain=(0.5, 1.5), points=41, gain=_NF1_GAIN):
    """Quadrature discretization of u_t(z) = -u(z) + y * int w(z, z') s(u(z')) dz'
    with a slowly drifting gain y.  Midpoint nodes, sup norm over nodes; the
    antisymmetric kernel keeps the fast linearization spectrum on Re = -1.
    """
    dom = _box(domain[0], domain[1], points)
    W, xi = _nf1_kernel(m, gain)
    dxi = 1.0 / m
    s0p = 1.0 - math.tanh(_NF1_SHIFT) ** 2
    A_lin = W * (dxi * s0p)

    def F(u, y):
        s = _nf1_sigmoid(u)
        return -u + y[..., 0:1] * dxi * np.einsum("ij,...j->...i", W, s)

    def g(u, y):
        return np.broadcast_to(float(eps), y.shape).copy()

    diag = np.arange(m)

    def A0(y):
        out = y[..., 0, None, None] * A_lin
        out[..., diag, diag] -= 1.0
        return out

    def DF(u, y):
        sp = _nf1_sigmoid_prime(u)
        out = np.empty(u.shape[:-1] + (m, m + 1))
        out[..., :, :m] = (-np.eye(m)
                           + y[..., 0, None, None] * dxi * W * sp[..., None, :])
        s = _nf1_sigmoid(u)
        out[..., :, m] = dxi * np.einsum("ij,...j->...i", W, s)
        return out

    def Dg(u, y):
        return np.zeros(u.shape[:-1] + (1, m + 1))

    return FastSlowSystem(m=m, n=1, F=F, g=g, A0=A0, domain=dom, DF=DF, Dg=Dg,
                          norm_kind="sup", vectorized=True,
                          meta={"name": "NF1", "eps": float(eps), "m": m,
                                "nodes": xi, "gain": gain,
                                "family": lambda e: build_nf1(e, m, domain, points, gain)})


def nf1_profile_interp(values, nodes, probes):
    """Periodic linear interpolation of node profiles onto probe locations.

    Lets manifolds computed at different quadrature sizes be compared on a
    common set of spatial points.
    """
    values = np.asarray(values, dtype=float)
    nodes = np.asarray(nodes, dtype=float)
    ext_nodes = np.concatenate([[nodes[-1] - 1.0], nodes, [nodes[0] + 1.0]])
    ext_vals = np.concatenate([values[..., -1:], values, values[..., :1]], axis=-1)
    flat = ext_vals.reshape(-1, ext_nodes.size)
    out = np.stack([np.interp(probes, ext_nodes, row) for row in flat])
    return out.reshape(values.shape[:-1] + (len(probes),))


# -- registry -----------------------------------------------------------------------

@dataclass(frozen=True)
class ExampleSystem:
    """A named example: builder plus optional closed-form oracles."""

    id: str
    build: Callable
    default_eps: float
    analytic_h: Optional[Callable] = None      # (y, eps) -> x
    analytic_dh: Optional[Callable] = None
    analytic_d2h: Optional[Callable] = None
    analytic_P: Optional[Callable] = None      # (xi, eta, eps) -> slow point
    sampling_radius: float = 2.0
    h_tol: float = 1e-5                        # oracle agreement tolerance
    notes: str = ""


# analytic oracles take the scalar slow track (any shape) and return the same
# shape, so harness wrappers can append value axes uniformly
EXAMPLES = {
    "L1": ExampleSystem(
        id="L1", build=build_l1, default_eps=0.1,
        analytic_h=l1_h,
        analytic_dh=lambda y, e: np.ones_like(np.asarray(y, dtype=float)),
        analytic_d2h=lambda y, e: np.zeros_like(np.asarray(y, dtype=float)),
        h_tol=1e-6, notes="linear fast pull toward the slow variable"),
    "Q1": ExampleSystem(
        id="Q1", build=build_q1, default_eps=0.1,
        analytic_h=q1_h, analytic_dh=q1_dh,
        analytic_d2h=lambda y, e: np.full_like(np.asarray(y, dtype=float), 2.0),
        h_tol=1e-5, notes="quadratic slow forcing"),
    "L2": ExampleSystem(
        id="L2", build=build_l2, default_eps=0.1,
        analytic_h=lambda y, e: np.zeros_like(np.asarray(y, dtype=float)),
        analytic_dh=lambda y, e: np.zeros_like(np.asarray(y, dtype=float)),
        analytic_P=l2_P,
        h_tol=1e-8, notes="pure fast decay driving a slow integrator"),
    "VDP-cut": ExampleSystem(
        id="VDP-cut", build=build_vdp_cut, default_eps=0.005,
        sampling_radius=0.1, h_tol=1e-4,
        notes="cubic nullcline outer branch, shifted and cut off"),
    "NF1": ExampleSystem(
        id="NF1", build=build_nf1, default_eps=0.01,
        sampling_radius=0.5, h_tol=1e-4,
        notes="discretized integro-differential fast field, sup norm"),
}


def get_example(name):
    if name not in EXAMPLES:
        raise KeyError(f"unknown example {name!r}; known: {sorted(EXAMPLES)}")
    return EXAMPLES[name]
