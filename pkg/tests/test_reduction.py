"""Straightening, the defect fixed point, semiconjugacy, rates, derivatives,
matched-asymptotics decomposition."""

import numpy as np
import pytest

from slowfast.certify import ConstantsCertificate, straightened_constants
from slowfast.core import FastSlowSystem, GridDomain
from slowfast.errors import (CapabilityError, ContractionError,
                             PreconditionError)
from slowfast.integrate import IntegratorConfig, flow
from slowfast.manifold import ContractionReport
from slowfast.reduction import (attraction_rate_fit, decompose_orbit, dp_point,
                                e_norm_sweep, q_along_orbit,
                                semiconjugacy_residual, straighten)
from slowfast.systems import l1_h, l2_P, q1_dh, q1_h

CFG = IntegratorConfig(dt=0.01)
CFG5 = IntegratorConfig(dt=0.005)


def l2_zero_straight(l2_pair):
    sys, cert = l2_pair
    zh = lambda y: np.zeros(np.asarray(y).shape[:-1] + (1,))
    zdh = lambda y: np.zeros(np.asarray(y).shape[:-1] + (1, 1))
    zd2h = lambda y: np.zeros(np.asarray(y).shape[:-1] + (1, 1, 1))
    return straighten(sys, zh, zdh, d2h=zd2h), straightened_constants(cert, 0.0)


def tc2_system(eps=0.1):
    """Analytic manifold h = 1 with a slow field that feels both variables:
    exercises the reversible slow process genuinely."""
    dom = GridDomain([-1.0], [1.0], [21])

    def F(x, y):
        return -x + 1.0

    def g(x, y):
        return eps * (1.0 + 0.3 * np.sin(y) + 0.4 * np.sin(y) * np.tanh(x - 1.0))

    def A0(y):
        return np.broadcast_to(-np.eye(1), y.shape[:-1] + (1, 1)).copy()

    def DF(x, y):
        out = np.zeros(x.shape[:-1] + (1, 2))
        out[..., 0, 0] = -1.0
        return out

    def Dg(x, y):
        t = np.tanh(x[..., 0] - 1.0)
        out = np.empty(x.shape[:-1] + (1, 2))
        out[..., 0, 0] = eps * 0.4 * np.sin(y[..., 0]) * (1.0 - t * t)
        out[..., 0, 1] = eps * (0.3 + 0.4 * t) * np.cos(y[..., 0])
        return out

    return FastSlowSystem(m=1, n=1, F=F, g=g, A0=A0, domain=dom, DF=DF, Dg=Dg,
                          vectorized=True)


def tc2_straight(eps=0.1):
    sys = tc2_system(eps)
    one = lambda y: np.ones(np.asarray(y).shape[:-1] + (1,))
    zdh = lambda y: np.zeros(np.asarray(y).shape[:-1] + (1, 1))
    zd2h = lambda y: np.zeros(np.asarray(y).shape[:-1] + (1, 1, 1))
    ssys = straighten(sys, one, zdh, d2h=zd2h)
    cert = ConstantsCertificate(K=1.0, mu=1.0, M0=1.0, M1x=0.0, M1y=0.0,
                                N0=2 * eps, N1=1.1 * eps, delta=1e-12, rho=0.1)
    return ssys, straightened_constants(cert, 0.0)


class TestStraighten:
    def test_manifold_maps_to_zero(self, coupled_straight):
        ssys, scert = coupled_straight
        nodes = ssys.system.domain.node_coords()
        vals = ssys.system.eval_F(np.zeros((nodes.shape[0], 1)), nodes)
        # straightened field vanishes on {xt = 0} up to solver tolerance
        assert np.max(np.abs(vals)) <= 1e-6

    def test_orbit_started_on_manifold_stays(self, coupled_straight):
        # grid-h straightening forces the orbit at the h-interpolation error
        # scale O(dy^2) between nodes; 41 points over [-1, 1] gives ~3e-4
        # forcing and ~1e-5 accumulated drift at worst
        ssys, _ = coupled_straight
        p = flow(ssys.system, [0.0], [0.1], (0.0, 10.0), CFG, check_domain=False)
        assert np.max(np.abs(p.fast)) <= 1e-5

    def test_l1_straightened_field_is_linear(self, l1):
        sys, _ = l1
        h = lambda y: l1_h(y, 0.1)
        dh = lambda y: np.ones(np.asarray(y).shape[:-1] + (1, 1))
        ssys = straighten(sys, h, dh)
        xt = np.linspace(-0.4, 0.4, 9)[:, None]
        ys = np.linspace(-0.4, 0.4, 9)[:, None]
        # F~(xt, y) = -xt exactly
        assert np.allclose(ssys.system.eval_F(xt, ys), -xt, atol=1e-14)

    def test_two_evaluation_routes_agree(self, q1):
        sys, _ = q1
        h = lambda y: q1_h(y[..., 0], 0.1)[..., None]
        dh = lambda y: q1_dh(y[..., 0], 0.1)[..., None, None]
        ssys = straighten(sys, h, dh)
        xt, y = np.array([0.1]), np.array([0.0])
        direct = ssys.system.eval_F(xt, y)
        composed = sys.eval_F(xt + h(y), y) - dh(y)[..., 0] * sys.eval_g(xt + h(y), y)
        assert np.allclose(direct, composed, atol=1e-12)

    def test_dg_bound(self, coupled_straight, coupled):
        ssys, _ = coupled_straight
        sys, cert = coupled
        rng = np.random.default_rng(0)
        xs = rng.uniform(-0.5, 0.5, (200, 1))
        ys = sys.domain.sample(rng, 200)
        Dg = ssys.system.eval_Dg(xs, ys)
        norms = np.linalg.norm(Dg.reshape(200, -1), axis=1)
        dh_sup = float(np.max(np.abs(ssys.dh(ys))))
        assert np.max(norms) <= (1.0 + dh_sup) * cert.N1 * (1 + 1e-6) + 1e-9

    def test_nonconverged_report_rejected(self, l1_solved):
        sys, cert, cfg, h, rep = l1_solved
        bad = ContractionReport(residuals=[1.0], converged=False)
        with pytest.raises(PreconditionError):
            straighten(sys, h, h, report=bad)


class TestQAlongOrbit:
    def test_vanishing_integrand(self, q1):
        # after straightening Q1 the slow field no longer feels xt at all
        sys, cert = q1
        h = lambda y: q1_h(y[..., 0], 0.1)[..., None]
        dh = lambda y: q1_dh(y[..., 0], 0.1)[..., None, None]
        ssys = straighten(sys, h, dh)
        scert = straightened_constants(cert, 2.2)
        res = q_along_orbit(ssys, [0.5], [0.0], scert, CFG)
        assert np.all(res.Q == 0.0)
        assert np.all(res.P == np.array([0.0]))

    def test_l2_closed_form(self, l2_straight):
        ssys, scert = l2_straight
        res = q_along_orbit(ssys, [1.0], [0.0], scert, CFG5)
        assert res.P[0] == pytest.approx(l2_P(1.0, 0.0, 0.1), abs=1e-6)
        assert res.Q[0] == pytest.approx(-0.1, abs=1e-6)

    def test_xi_zero_exact(self, l2_straight):
        ssys, scert = l2_straight
        res = q_along_orbit(ssys, [0.0], [0.4], scert, CFG)
        assert np.all(res.Q == 0.0) and res.E_ratio == 0.0
        assert np.all(res.P == np.array([0.4]))

    def test_contraction_budget_enforced(self, l2_straight):
        ssys, scert = l2_straight
        from dataclasses import replace
        bad = replace(scert, N1=2.0)
        with pytest.raises(ContractionError):
            q_along_orbit(ssys, [1.0], [0.0], bad, CFG)

    def test_sweep_ratio_below_certified(self, coupled_straight):
        ssys, scert = coupled_straight
        res = q_along_orbit(ssys, [0.5], [0.1], scert, CFG)
        assert res.report.measured_ratio <= res.report.theoretical_ratio * 1.05 + 1e-9

    def test_batch_matches_single(self, coupled_straight):
        ssys, scert = coupled_straight
        xis = np.array([[0.3], [-0.2]])
        etas = np.array([[0.1], [0.4]])
        P, Q, ratios = e_norm_sweep(ssys, xis, etas, scert, CFG, tol_q=1e-11)
        for i in range(2):
            single = q_along_orbit(ssys, xis[i], etas[i], scert, CFG, tol_q=1e-11)
            assert np.allclose(P[i], single.P, atol=1e-5)


class TestENormBound:
    def test_coupled_random_queries(self, coupled_straight):
        ssys, scert = coupled_straight
        rng = np.random.default_rng(11)
        xis = rng.uniform(-0.6, 0.6, (40, 1))
        etas = rng.uniform(-0.9, 0.9, (40, 1))
        _, _, ratios = e_norm_sweep(ssys, xis, etas, scert, CFG)
        bound = scert.K * scert.N1 / (scert.mu - scert.K * scert.N1)
        assert np.max(ratios) <= bound * 1.05

    def test_l2_exact_ratio(self, l2_straight):
        ssys, scert = l2_straight
        rng = np.random.default_rng(5)
        xis = rng.uniform(-1.0, 1.0, (30, 1))
        etas = rng.uniform(-0.8, 0.8, (30, 1))
        _, _, ratios = e_norm_sweep(ssys, xis, etas, scert, CFG)
        mask = np.abs(xis[:, 0]) > 1e-9
        assert np.allclose(ratios[mask], 0.1, atol=1e-4)
        bound = scert.K * scert.N1 / (scert.mu - scert.K * scert.N1)
        assert np.max(ratios) <= bound * 1.05


class TestSemiconjugacy:
    def test_l2_small_residual(self, l2_straight):
        ssys, scert = l2_straight
        res = q_along_orbit(ssys, [1.0], [0.0], scert, CFG5)
        semi = semiconjugacy_residual(ssys, res, 10.0, CFG5, cert=scert)
        assert semi <= 1e-6

    def test_perturbed_projection_detected(self, l2_straight):
        ssys, scert = l2_straight
        res = q_along_orbit(ssys, [1.0], [0.0], scert, CFG5)
        from slowfast.reduction import projected_flow
        orbit = flow(ssys.system, res.xi, res.eta, (0.0, 10.0), CFG5,
                     check_domain=False)
        wrong = projected_flow(ssys, res.P + 0.01, (0.0, 10.0), CFG5)
        t = 10.0
        xt_t, y_t = orbit.at(t)
        r_t = q_along_orbit(ssys, xt_t, y_t, scert, CFG5)
        _, y_w = wrong.at(t)
        assert np.linalg.norm(r_t.P - y_w) >= 0.009

    def test_semigroup_consistency(self, coupled_straight):
        # P(orbit(t1)) evolved to t2 equals P(orbit(t2))
        ssys, scert = coupled_straight
        res = q_along_orbit(ssys, [0.4], [-0.2], scert, CFG)
        orbit = flow(ssys.system, res.xi, res.eta, (0.0, 6.0), CFG,
                     check_domain=False)
        t1, t2 = 1.5, 5.0
        xt1, y1 = orbit.at(t1)
        xt2, y2 = orbit.at(t2)
        P1 = q_along_orbit(ssys, xt1, y1, scert, CFG).P
        P2 = q_along_orbit(ssys, xt2, y2, scert, CFG).P
        evolved = flow(ssys.system, np.zeros(1), P1, (0.0, t2 - t1), CFG,
                       check_domain=False).slow[-1]
        assert np.linalg.norm(evolved - P2) <= 1e-6


class TestAttractionRate:
    def test_l2_exact_gap(self, l2_straight):
        ssys, scert = l2_straight
        res = q_along_orbit(ssys, [1.0], [0.0], scert, CFG5)
        fit = attraction_rate_fit(ssys, res, 10.0, CFG5, cert=scert)
        assert fit.rate == pytest.approx(1.0, rel=0.02)
        assert fit.r2 >= 0.999
        assert fit.slow_prefactor_ok

    def test_xi_zero_underdetermined(self, l2_straight):
        ssys, scert = l2_straight
        res = q_along_orbit(ssys, [0.0], [0.3], scert, CFG)
        fit = attraction_rate_fit(ssys, res, 5.0, CFG, cert=scert)
        assert fit.underdetermined

    def test_fiber_constancy(self, coupled_straight):
        # two starts with the same projection converge to each other fast
        ssys, scert = coupled_straight
        res_a = q_along_orbit(ssys, [0.5], [0.1], scert, CFG, tol_q=1e-12)
        # find eta_b so that (0.25, eta_b) has the same projection: batched
        # grid-search refinement (P is monotone in eta here)
        target = res_a.P[0]
        lo, hi = -0.5, 0.5
        for _ in range(5):
            etas = np.linspace(lo, hi, 33)[:, None]
            xis = np.full_like(etas, 0.25)
            P, _, _ = e_norm_sweep(ssys, xis, etas, scert, CFG, tol_q=1e-12)
            k = int(np.searchsorted(P[:, 0], target))
            k = min(max(k, 1), 32)
            lo, hi = etas[k - 1, 0], etas[k, 0]
        eta_b = 0.5 * (lo + hi)
        pa = flow(ssys.system, [0.5], [0.1], (0.0, 8.0), CFG, check_domain=False)
        pb = flow(ssys.system, [0.25], [eta_b], (0.0, 8.0), CFG, check_domain=False)
        gap = np.linalg.norm(np.concatenate([pa.fast - pb.fast, pa.slow - pb.slow],
                                            axis=1), axis=1)
        from slowfast.harness import fit_exponential
        fit = fit_exponential(list(zip(pa.times, gap)), 1e-9)
        assert fit.rate >= 0.95 * scert.mu


class TestDpPoint:
    def test_l2_affine_exact(self, l2_straight):
        ssys, scert = l2_straight
        res = q_along_orbit(ssys, [1.0], [0.0], scert, CFG)
        P1, Q1 = dp_point(ssys, [1.0], [0.0], res, scert, CFG)
        assert np.allclose(P1, [[0.1, 1.0]], atol=1e-8)

    def test_xi_zero_identity(self, q1):
        sys, cert = q1
        h = lambda y: q1_h(y[..., 0], 0.1)[..., None]
        dh = lambda y: q1_dh(y[..., 0], 0.1)[..., None, None]
        d2h = lambda y: np.full(np.asarray(y).shape[:-1] + (1, 1, 1), 2.0)
        ssys = straighten(sys, h, dh, d2h=d2h)
        scert = straightened_constants(cert, 2.2)
        res = q_along_orbit(ssys, [0.0], [0.2], scert, CFG)
        P1, Q1 = dp_point(ssys, [0.0], [0.2], res, scert, CFG)
        assert np.allclose(Q1, 0.0, atol=1e-12)
        assert np.allclose(P1, [[0.0, 1.0]], atol=1e-12)

    def test_fd_agreement_nontrivial(self):
        ssys, scert = tc2_straight(eps=0.1)
        xi0, eta0 = 0.4, 0.2
        res = q_along_orbit(ssys, [xi0], [eta0], scert, CFG5, tol_q=1e-12)
        P1, _ = dp_point(ssys, [xi0], [eta0], res, scert, CFG5, tol=1e-11)

        def P_of(xi, eta):
            return q_along_orbit(ssys, [xi], [eta], scert, CFG5, tol_q=1e-12).P[0]

        d = 1e-5
        fd = np.array([(P_of(xi0 + d, eta0) - P_of(xi0 - d, eta0)) / (2 * d),
                       (P_of(xi0, eta0 + d) - P_of(xi0, eta0 - d)) / (2 * d)])
        assert np.max(np.abs(P1[0] - fd)) <= 1e-4

    def test_grid_h_requires_smoothness(self, coupled_straight):
        ssys, scert = coupled_straight
        res = q_along_orbit(ssys, [0.2], [0.1], scert, CFG)
        with pytest.raises(CapabilityError):
            dp_point(ssys, [0.2], [0.1], res, scert, CFG)

    def test_variational_decay_premise_sampled(self):
        # the smoothness hypothesis behind dp_point: first variational flows of
        # the straightened system decay at essentially the fast rate
        from slowfast.integrate import flow, variational_flow
        ssys, scert = tc2_straight(eps=0.1)
        base = flow(ssys.system, [0.5], [0.2], (0.0, 8.0), CFG, check_domain=False)
        vf = variational_flow(ssys.system, base, 1, CFG)
        ux = np.abs(vf.first[:, 0, 0])          # d x~(t) / d xi
        rate = scert.mu - scert.N1
        envelope = 1.05 * np.exp(-rate * vf.times)
        assert np.all(ux <= envelope + 1e-12)


class TestDecompose:
    def test_start_on_manifold_zero_layer(self, l2, l2_straight):
        sys, _ = l2
        ssys, scert = l2_straight
        res = q_along_orbit(ssys, [0.0], [0.3], scert, CFG)
        outer, layer = decompose_orbit(sys, ssys.h, res, 5.0, CFG)
        assert np.max(np.abs(layer.fast)) <= 1e-12
        assert np.max(np.abs(layer.slow)) <= 1e-12

    def test_l2_closed_form_layer(self, l2, l2_straight):
        sys, _ = l2
        ssys, scert = l2_straight
        res = q_along_orbit(ssys, [1.0], [0.0], scert, CFG5)
        outer, layer = decompose_orbit(sys, ssys.h, res, 5.0, CFG5)
        lx, ly = layer.at(2.0)
        assert lx[0] == pytest.approx(0.135335, abs=2e-6)
        assert ly[0] == pytest.approx(-0.0135335, abs=2e-6)

    def test_reconstruction_identity(self, l2, l2_straight):
        sys, _ = l2
        ssys, scert = l2_straight
        res = q_along_orbit(ssys, [1.0], [0.0], scert, CFG)
        outer, layer = decompose_orbit(sys, ssys.h, res, 5.0, CFG)
        orbit = flow(sys, [1.0], [0.0], (0.0, 5.0), CFG, check_domain=False)
        err = max(np.max(np.abs(orbit.fast - (outer.fast + layer.fast))),
                  np.max(np.abs(orbit.slow - (outer.slow + layer.slow))))
        assert err <= 1e-9

    def test_layer_decays_at_certified_rate(self, coupled, coupled_straight):
        sys, cert = coupled
        ssys, scert = coupled_straight
        res = q_along_orbit(ssys, [0.5], [0.0], scert, CFG)
        outer, layer = decompose_orbit(sys, ssys.h, res, 8.0, CFG)
        norms = np.linalg.norm(np.concatenate([layer.fast, layer.slow], axis=1),
                               axis=1)
        rate = (cert.mu - cert.K * cert.M1x) / 1.05
        start = norms[0]
        bound = 3.0 * start * np.exp(-rate * layer.times)
        assert np.all(norms[layer.times > 1.0] <= bound[layer.times > 1.0])
