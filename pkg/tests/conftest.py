"""Shared fixtures: small exactly-solvable systems reused across tests."""

from typing import NamedTuple

import numpy as np
import pytest

from perturbwalk import (
    EnvModel,
    LatticeTorus,
    RateSpec,
    SpinConfig,
    build_generators,
    build_layout,
    interface_walk,
    l2_operator_norm,
    spectral_gap,
    stationary_solve,
)
from perturbwalk import estimators, oracle


class System(NamedTuple):
    model: EnvModel
    torus: LatticeTorus
    spec: RateSpec
    gens: oracle.GeneratorSet
    gap: oracle.GapReport
    norm: oracle.NormReport
    st: oracle.StationaryReport


def make_system(kind: str, rho: float, side: int, spec: RateSpec,
                dim: int = 1, j: int | None = None) -> System:
    model = EnvModel(kind=kind, rho=rho) if j is None else \
        EnvModel(kind=kind, rho=rho, j=j)
    torus = LatticeTorus(dim=dim, side=side)
    gens = build_generators(model, spec, torus)
    gap = spectral_gap(gens.L_env, gens.mu)
    norm = l2_operator_norm(gens.L_hat, gens.mu, spec)
    st = stationary_solve(gens.L_full, gens.mu,
                          gamma=gap.gamma, epsilon=norm.epsilon)
    return System(model, torus, spec, gens, gap, norm, st)


@pytest.fixture(scope="session")
def flip4():
    """IndependentFlip rho=0.3, L=4, interface strength 0.05 (eps/gamma ~ 0.09)."""
    return make_system("independent_flip", 0.3, 4, interface_walk(0.05))


@pytest.fixture(scope="session")
def flip6():
    """IndependentFlip rho=0.3, L=6, interface strength 0.08."""
    return make_system("independent_flip", 0.3, 6, interface_walk(0.08))


@pytest.fixture(scope="session")
def east5():
    """East rho=1/2, L=5, interface strength tuned so eps/gamma <= 0.3.

    The certified norm bound 2*sum_y sup|rhat| = 4*strength makes
    strength = 0.3*gamma/4 sufficient without relying on the computed eps.
    """
    model = EnvModel(kind="east", rho=0.5)
    torus = LatticeTorus(dim=1, side=5)
    probe = build_generators(model, interface_walk(0.0), torus)
    gamma = spectral_gap(probe.L_env, probe.mu).gamma
    spec = interface_walk(0.3 * gamma / 4.0)
    gens = build_generators(model, spec, torus)
    gap = spectral_gap(gens.L_env, gens.mu)
    norm = l2_operator_norm(gens.L_hat, gens.mu, spec)
    st = stationary_solve(gens.L_full, gens.mu,
                          gamma=gap.gamma, epsilon=norm.epsilon)
    return System(model, spec=spec, torus=torus, gens=gens, gap=gap,
                  norm=norm, st=st)


@pytest.fixture(scope="session")
def paths6(flip6):
    """400 coupled replicas on the flip6 system, T=60, fixed master seed."""
    layout = build_layout(flip6.spec)
    eta0 = SpinConfig.from_index(flip6.torus, 0)
    return estimators.run_replicas(flip6.model, flip6.spec, layout, eta0,
                                   horizon=60.0, master_seed=424242,
                                   n_replicas=400)
