"""End-to-end guarantees of the library, stated as the properties a user can
rely on: certified contraction, truncation, and series bounds from the exact
pipeline, and Monte Carlo results that reproduce the exact answers.

Each test pins its tolerances explicitly and asserts its runtime budget.
"""

import math
import time

import numpy as np
import pytest
from scipy.linalg import expm

from perturbwalk import (
    EnvModel,
    LatticeTorus,
    SpinConfig,
    build_layout,
    decoupled_walk,
    driven_probe,
    interface_walk,
)
from perturbwalk import estimators
from perturbwalk import oracle as orc

from conftest import make_system

SLACK = 1e-9


def _paths(system, horizon, n, seed):
    layout = build_layout(system.spec)
    eta0 = SpinConfig.from_index(system.torus, 0)
    return estimators.run_replicas(system.model, system.spec, layout, eta0,
                                   horizon=horizon, master_seed=seed,
                                   n_replicas=n)


# 1 -------------------------------------------------------------------------


def test_contraction_at_certified_rate_and_sharpness():
    """The mean-relaxation inequality holds at the certified rate on both an
    unconstrained and a constrained model (100 random functions, five times,
    1e-9 slack) and is sharp: inflating the rate by 1% breaks it."""
    start = time.monotonic()
    times = (0.1, 0.5, 1.0, 2.0, 5.0)
    rng = np.random.default_rng(2024)

    for system in (make_system("independent_flip", 0.37, 4,
                               interface_walk(0.01)),
                   make_system("east", 0.5, 5, interface_walk(0.01))):
        gens, gamma = system.gens, system.gap.gamma
        F = rng.standard_normal((gens.n_states, 100))
        ok, excess = orc.contraction_check(gens.L_env, gens.mu, gamma,
                                           times, F, slack=SLACK)
        assert ok, f"excess {excess} on {system.model.kind}"

        witness = np.column_stack([system.gap.slowest_mode, F])
        ok_inflated, excess = orc.contraction_check(
            gens.L_env, gens.mu, 1.01 * gamma, times, witness, slack=SLACK)
        assert not ok_inflated and excess > 0

    flip_gamma = make_system("independent_flip", 0.37, 4,
                             interface_walk(0.01)).gap.gamma
    assert flip_gamma == pytest.approx(1.0, abs=1e-10)
    assert time.monotonic() - start < 10.0


# 2 -------------------------------------------------------------------------


def test_semigroup_truncation_tail_bound():
    """Dropping all iterated-correction terms of order >= k leaves a
    remainder no larger than (eps/gamma)^k * 2*gamma/(gamma-eps) times the
    centred norm of the input, for k = 1..5 and three times."""
    start = time.monotonic()
    s = make_system("independent_flip", 0.3, 4, interface_walk(0.1))
    gens, gamma, eps = s.gens, s.gap.gamma, s.norm.epsilon
    assert eps / gamma <= 0.3

    rng = np.random.default_rng(7)
    F = rng.standard_normal((gens.n_states, 50))
    centred = np.sqrt(gens.mu @ (F - gens.mu @ F) ** 2)

    for t in (0.5, 1.0, 2.0):
        S_full = expm(t * gens.L_full)
        terms = orc.dyson_terms_upto(gens.L_ew, gens.L_hat, 4, t)
        partial = np.zeros_like(S_full)
        for k in range(1, 6):
            partial = partial + terms[k - 1]          # now sums n < k
            remainder = (S_full - partial) @ F
            lhs = np.sqrt(gens.mu @ remainder ** 2)
            rhs = (eps / gamma) ** k * (2 * gamma / (gamma - eps)) * centred
            assert np.all(lhs <= rhs + SLACK), f"k={k}, t={t}"
    assert time.monotonic() - start < 30.0


# 3 -------------------------------------------------------------------------


def _geometric_residuals(s, orders=6, floor=1e-12):
    gens, gamma, eps = s.gens, s.gap.gamma, s.norm.epsilon
    rep = orc.density_expansion(gens.L_ew, gens.L_hat, gens.mu, orders,
                                gamma=gamma, epsilon=eps)
    cap = eps / gamma + 0.02
    resid = np.asarray(rep.residuals)
    for k in range(orders - 1):
        if resid[k] <= floor:
            # converged to machine zero: decrease certified a fortiori
            break
        assert resid[k + 1] <= cap * resid[k] + 1e-14, (
            f"order {k}: ratio {resid[k + 1] / resid[k]:.4f} > {cap}")
    flat_dev = orc.mu_norm(gens.mu, rep.h_exact - 1.0)
    assert flat_dev <= eps / (gamma - eps) + SLACK
    return resid


def test_stationary_density_series_geometric():
    """Truncation residuals of the stationary-density series shrink by at
    least eps/gamma + 0.02 per order, and the density stays within
    eps/(gamma-eps) of flat."""
    s = make_system("independent_flip", 0.3, 4, interface_walk(0.1))
    resid = _geometric_residuals(s)
    # on this system the series closes exactly after two orders: beyond
    # the closure every residual sits at machine zero
    assert resid[0] > 1e-3 and resid[1] > 1e-4
    assert np.all(resid[2:] < 1e-12)

    # a same-size system whose series does not terminate exercises the
    # ratio bound through five measurable orders
    t = make_system("independent_flip", 0.3, 4, driven_probe(0.2))
    resid_t = _geometric_residuals(t)
    assert np.all(resid_t[:6] > 1e-12)


# 4 -------------------------------------------------------------------------


def test_velocity_series_certified_bounds():
    """Each truncated velocity sits within its certified geometric tail of
    the exact velocity, for truncation orders 0..5."""
    start = time.monotonic()
    s = make_system("independent_flip", 0.3, 4, interface_walk(0.1))
    gens, gamma, eps = s.gens, s.gap.gamma, s.norm.epsilon
    vel = orc.velocity(gens, 5, gamma=gamma, epsilon=eps)

    j_full, _ = orc.drift_vectors(gens)
    j_cent = j_full[:, 0] - gens.mu @ j_full[:, 0]
    j_norm = orc.mu_norm(gens.mu, j_cent)
    q = eps / gamma
    for k in range(6):
        tail = j_norm * sum(q ** (n + 1) for n in range(k + 1, 60))
        dev = abs(float(vel.v_exact[0] - vel.series[k][0]))
        assert dev <= tail + SLACK, f"k={k}: {dev} > {tail}"
    assert time.monotonic() - start < 10.0


# 5 -------------------------------------------------------------------------


def test_constrained_model_inequality_battery(east5):
    """All three certified semigroup inequalities hold on the constrained
    benchmark with 100 random functions across the full time grid."""
    assert east5.norm.epsilon / east5.gap.gamma <= 0.3
    rep = orc.semigroup_bounds_check(east5.gens, gamma=east5.gap.gamma,
                                     epsilon=east5.norm.epsilon,
                                     mu_eps=east5.st.mu_eps, n_random=100)
    assert rep.all_pass, f"worst excess {rep.worst_excess}"
    assert len(rep.records) == 3 * 5 * 100
    assert {r.paper_anchor for r in rep.records} == {
        "contraction-to-mean", "mean-relaxation",
        "perturbed-measure-contraction"}


# 6 -------------------------------------------------------------------------


def test_coupling_pathwise_identity_and_decoupling_rate():
    """With the perturbation off, both walkers coincide pathwise on every
    replica; at strength 0.1 the decoupling probability within one time unit
    stays below the certified intensity bound plus 3 standard errors."""
    start = time.monotonic()

    glued = make_system("independent_flip", 0.5, 4, interface_walk(0.0))
    for p in _paths(glued, horizon=5.0, n=1000, seed=61):
        np.testing.assert_array_equal(p.base_jump_times, p.pert_jump_times)
        np.testing.assert_array_equal(p.base_jump_disp, p.pert_jump_disp)
        assert p.separation_time == math.inf

    driven = make_system("independent_flip", 0.5, 4, interface_walk(0.1))
    c_eps = float(np.max(np.abs(driven.spec.perturb).sum(axis=0)))
    assert c_eps == pytest.approx(0.2, abs=1e-14)
    seps = np.array([p.separation_time
                     for p in _paths(driven, horizon=1.0, n=10_000, seed=62)])
    p_hat = float(np.mean(seps <= 1.0))
    se = math.sqrt(p_hat * (1.0 - p_hat) / len(seps))
    assert p_hat <= c_eps + 3.0 * se, f"{p_hat} vs {c_eps} + 3*{se}"
    assert time.monotonic() - start < 60.0


# 7 -------------------------------------------------------------------------


def test_monte_carlo_matches_exact_velocity_and_law():
    """Both velocity estimators land within 3 standard errors of the exact
    velocity, and the occupation histogram lands within 0.05 total variation
    of the exact stationary law (1000 replicas, horizon 200)."""
    start = time.monotonic()
    s = make_system("independent_flip", 0.3, 8, interface_walk(0.1))
    vel = orc.velocity(s.gens, 4, gamma=s.gap.gamma, epsilon=s.norm.epsilon)
    paths = _paths(s, horizon=200.0, n=1000, seed=77)
    burn = estimators.default_burn_in(s.gap.gamma)

    plain = estimators.estimate_velocity(paths, oracle_value=vel.v_exact,
                                         burn_in=burn)
    mart = estimators.estimate_velocity_mart(paths, s.spec,
                                             oracle_value=vel.v_exact,
                                             burn_in=burn)
    assert plain.oracle_gap_sigmas[0] <= 3.0
    assert mart.oracle_gap_sigmas[0] <= 3.0

    occ = estimators.estimate_occupation(paths, s.gens.space, burn_in=burn,
                                         target=s.st.mu_eps)
    assert occ.tv_to_target < 0.05
    assert time.monotonic() - start < 300.0


# 8 -------------------------------------------------------------------------


def test_diffusion_nondegenerate_and_calibrated():
    """The variational diffusion lower bound is strictly positive on the
    symmetric reversible benchmark and the measured coefficient respects it;
    on the environment-independent walk the measured coefficient agrees
    with the known value 1."""
    start = time.monotonic()

    bench = make_system("independent_flip", 0.3, 5, interface_walk(0.08))
    var = orc.diffusion_variational(bench.gens, gamma=bench.gap.gamma)
    assert var.value > 0
    paths = _paths(bench, horizon=40.0, n=400, seed=88)
    v_hat = estimators.estimate_velocity_mart(paths, bench.spec,
                                              burn_in=10.0).estimate
    d_hat = estimators.estimate_diffusion(paths, v=v_hat)
    assert d_hat.estimate[0, 0] >= var.value - 3.0 * d_hat.stderr[0, 0]

    free = make_system("independent_flip", 0.4, 4, decoupled_walk(0.5))
    free_paths = _paths(free, horizon=25.0, n=400, seed=89)
    rep = estimators.estimate_diffusion(free_paths, v=np.zeros(1),
                                        oracle_value=np.array([[1.0]]))
    assert rep.oracle_gap_sigmas.max() <= 3.0
    assert time.monotonic() - start < 300.0


# 9 -------------------------------------------------------------------------


def test_spatial_influence_decay_loglinear():
    """The exact influence of the walker on the environment at distance x
    decays log-linearly (R^2 >= 0.9) out to the torus midpoint on a
    ten-site ring."""
    start = time.monotonic()
    s = make_system("independent_flip", 0.3, 10, interface_walk(0.1))
    prof = orc.decay_profile(s.gens.space, s.st.mu_eps,
                             orc.occupancy_at_origin())
    assert prof.fit_max_distance == 10 // 2      # out to the midpoint
    assert prof.r2 >= 0.9
    assert prof.theta_hat > 0
    # regression locks from the exact pipeline
    assert prof.theta_hat == pytest.approx(1.4060, abs=1e-3)
    assert prof.r2 == pytest.approx(0.9896, abs=1e-3)
    assert time.monotonic() - start < 60.0
