"""Coupling layout, graphical construction, and the coupled simulator."""

from fractions import Fraction

import numpy as np
import pytest

from perturbwalk import (
    EnvModel,
    InvalidRatesError,
    LatticeTorus,
    SpinConfig,
    build_layout,
    decoupled_walk,
    driven_probe,
    env_seen_by_walker,
    interface_walk,
    rate_eval,
    replica_streams,
    simulate_coupled,
    simulate_env,
)

TORUS6 = LatticeTorus(dim=1, side=6)
FLIP_HALF = EnvModel(kind="independent_flip", rho=0.5)


def _center_occupied_wid(spec) -> int:
    """Window id with only the walker's own site occupied."""
    t = LatticeTorus(dim=1, side=2 * spec.radius + 3)
    occ = np.zeros(t.n_sites, dtype=np.uint8)
    occ[0] = 1
    return spec.window_id(occ, t, (0,))


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------


def test_layout_frozen_example():
    """Interface strength 0.1: lambda = 1.2; with the walker's site occupied
    the +1 interval keeps [0, 5/12) plus slack [10/12, 11/12), while the -1
    interval shrinks to [5/12, 9/12)."""
    spec = interface_walk(0.1)
    layout = build_layout(spec)
    assert layout.lam == pytest.approx(1.2, abs=1e-14)

    wid = _center_occupied_wid(spec)
    f = lambda x: float(Fraction(x, 12))

    a, b = layout.base_interval(1, wid)
    assert (a, b) == pytest.approx((f(0), f(5)), abs=1e-14)
    a, b = layout.base_interval(-1, wid)
    assert (a, b) == pytest.approx((f(5), f(10)), abs=1e-14)

    segs_p = layout.pert_segments(1, wid)
    assert len(segs_p) == 2
    assert segs_p[0] == pytest.approx((f(0), f(5)), abs=1e-14)
    assert segs_p[1] == pytest.approx((f(10), f(11)), abs=1e-14)
    segs_m = layout.pert_segments(-1, wid)
    assert len(segs_m) == 1
    assert segs_m[0] == pytest.approx((f(5), f(9)), abs=1e-14)


@pytest.mark.parametrize("spec", [interface_walk(0.1), interface_walk(0.03),
                                  driven_probe(0.4), decoupled_walk(0.5)],
                         ids=["iface-0.1", "iface-0.03", "driven-0.4", "dec"])
def test_layout_measure_identities(spec):
    """|I| = r/lam, |I_eps| = (r+rhat)/lam, |overlap| = (r+min(0,rhat))/lam."""
    layout = build_layout(spec)
    lam = layout.lam
    for wid in range(spec.n_windows):
        for i, y in enumerate(spec.displacements):
            r = spec.base[i, wid]
            rh = spec.perturb[i, wid]
            assert layout.base_measure(y, wid) * lam == pytest.approx(r, abs=1e-12)
            assert layout.pert_measure(y, wid) * lam == pytest.approx(
                r + rh, abs=1e-12)
            assert layout.overlap_measure(y, wid) * lam == pytest.approx(
                r + min(0.0, rh), abs=1e-12)


def test_layout_base_intervals_partition():
    spec = driven_probe(0.3)
    layout = build_layout(spec)
    for wid in range(spec.n_windows):
        ends = 0.0
        for y in spec.displacements:
            a, b = layout.base_interval(y, wid)
            assert a == pytest.approx(ends, abs=1e-14)   # consecutive
            ends = b
        assert ends <= 1.0 + 1e-14
        total = sum(layout.pert_measure(y, wid) for y in spec.displacements)
        assert total * layout.lam == pytest.approx(
            float((spec.base + spec.perturb)[:, wid].sum()), abs=1e-12)


def test_negative_total_rates_rejected_at_construction():
    spec = interface_walk(0.4)
    with pytest.raises(InvalidRatesError):
        spec.with_perturbation_scaled(1.3)         # pushes r + rhat below 0


# ---------------------------------------------------------------------------
# Environment simulation
# ---------------------------------------------------------------------------


def test_env_trajectory_determinism_and_cadlag():
    streams = replica_streams(2024, 0)
    traj = simulate_env(FLIP_HALF, SpinConfig.from_index(TORUS6, 0),
                        horizon=5.0, rng=streams.env)
    streams2 = replica_streams(2024, 0)
    traj2 = simulate_env(FLIP_HALF, SpinConfig.from_index(TORUS6, 0),
                         horizon=5.0, rng=streams2.env)
    np.testing.assert_array_equal(traj.times, traj2.times)
    np.testing.assert_array_equal(traj.sites, traj2.sites)
    np.testing.assert_array_equal(traj.spins, traj2.spins)
    # cadlag: state at an event time includes that event
    if traj.n_events:
        t0 = traj.times[0]
        assert traj.state_at(t0)[traj.sites[0]] == traj.spins[0]
    assert np.all(np.diff(traj.times) >= 0)


def test_env_magnetization_relaxes_to_rho():
    rho = 0.3
    model = EnvModel(kind="independent_flip", rho=rho)
    vals = []
    for rep in range(300):
        streams = replica_streams(7, rep)
        traj = simulate_env(model, SpinConfig.from_index(TORUS6, 0),
                            horizon=12.0, rng=streams.env)
        vals.append(traj.state_at(12.0).mean())
    se = np.std(vals, ddof=1) / np.sqrt(len(vals))
    assert np.mean(vals) == pytest.approx(rho, abs=4 * se + 1e-3)


def test_east_constraint_respected_along_path():
    model = EnvModel(kind="east", rho=0.5)
    streams = replica_streams(11, 3)
    eta0 = SpinConfig.from_index(TORUS6, 0)
    traj = simulate_env(model, eta0, horizon=8.0, rng=streams.env)
    occ = eta0.as_array().copy()
    for t, s, x in zip(traj.times, traj.sites, traj.spins):
        assert occ[(s + 1) % TORUS6.side] == 0     # flip was allowed
        occ[s] = x
    np.testing.assert_array_equal(occ, traj.state_at(8.0))


# ---------------------------------------------------------------------------
# Coupled simulation
# ---------------------------------------------------------------------------


def _run(spec, seed=5, rep=0, horizon=20.0, model=FLIP_HALF, torus=TORUS6):
    layout = build_layout(spec)
    return simulate_coupled(model, spec, layout,
                            SpinConfig.from_index(torus, 0), horizon,
                            replica_streams(seed, rep))


def test_zero_perturbation_glues_the_walkers():
    path = _run(interface_walk(0.0), seed=31)
    np.testing.assert_array_equal(path.base_jump_times, path.pert_jump_times)
    np.testing.assert_array_equal(path.base_jump_disp, path.pert_jump_disp)
    assert path.separation_time == np.inf
    for t in np.linspace(0.0, 20.0, 41):
        np.testing.assert_array_equal(path.position_at(t, "perturbed"),
                                      path.position_at(t, "unperturbed"))


def test_coupled_determinism_bytes():
    a = _run(interface_walk(0.1), seed=12, rep=4)
    b = _run(interface_walk(0.1), seed=12, rep=4)
    np.testing.assert_array_equal(a.clock_times, b.clock_times)
    np.testing.assert_array_equal(a.clock_uniforms, b.clock_uniforms)
    np.testing.assert_array_equal(a.pert_jump_times, b.pert_jump_times)
    assert a.clock_times.tobytes() == b.clock_times.tobytes()
    c = _run(interface_walk(0.1), seed=12, rep=5)
    assert a.clock_times.shape != c.clock_times.shape or \
        not np.array_equal(a.clock_times, c.clock_times)


def test_segments_tile_the_horizon():
    path = _run(driven_probe(0.5), seed=3, horizon=15.0)
    t_prev = 0.0
    total = 0.0
    for t0, t1, occ, pos in path.iter_segments("perturbed"):
        assert t0 == pytest.approx(t_prev, abs=1e-12)
        assert t1 >= t0
        total += t1 - t0
        t_prev = t1
    assert t_prev == pytest.approx(15.0, abs=1e-9)
    assert total == pytest.approx(15.0, abs=1e-9)


def test_segment_positions_match_position_at():
    path = _run(interface_walk(0.1), seed=9, horizon=10.0)
    for t0, t1, _occ, pos in path.iter_segments("perturbed"):
        mid = 0.5 * (t0 + t1)
        if t1 > t0:
            np.testing.assert_array_equal(pos, path.position_at(mid, "perturbed"))


def test_env_seen_by_walker_translation():
    path = _run(interface_walk(0.1), seed=17, horizon=6.0)
    t = 4.2
    seen = env_seen_by_walker(path, "perturbed", t)
    occ = path.env.state_at(t)
    pos = int(path.position_at(t, "perturbed")[0])
    for x in range(TORUS6.side):
        assert seen[x] == occ[(x + pos) % TORUS6.side]


def test_empirical_jump_rate_matches_spec():
    """Decoupled walk at rate 1/2 per direction: total jumps/T -> 1."""
    spec = decoupled_walk(0.5)
    counts = []
    for rep in range(120):
        path = _run(spec, seed=77, rep=rep, horizon=40.0)
        counts.append(len(path.pert_jump_times) / 40.0)
    se = np.std(counts, ddof=1) / np.sqrt(len(counts))
    assert np.mean(counts) == pytest.approx(1.0, abs=4 * se)


def test_walker_jump_uses_pre_jump_window():
    """Each realized perturbed jump must be possible: the jump's rate read
    from the strictly-pre-jump seen environment is positive."""
    spec = driven_probe(0.5)
    path = _run(spec, seed=23, horizon=12.0)
    times, pos = path.positions_cumulative("perturbed")
    for k, t in enumerate(times):
        before = t - 1e-12
        occ = path.env.state_at(before)
        x = pos[k]                      # position before this jump
        y = tuple((path.pert_jump_disp[k]).tolist())
        eta = SpinConfig.from_array(TORUS6, occ)
        r, rh = rate_eval(spec, y, eta, x=int(x[0]))
        assert r + rh > 0.0


def test_separation_statistics_respect_bound():
    """P(copies decouple within one unit) <= sup-window total |rhat|."""
    spec = interface_walk(0.1)
    n = 2000
    dec = 0
    for rep in range(n):
        path = _run(spec, seed=55, rep=rep, horizon=1.0)
        if path.separation_time <= 1.0:
            dec += 1
    p_hat = dec / n
    c_eps = float(np.max(np.abs(spec.perturb).sum(axis=0)))
    assert c_eps == pytest.approx(0.2, abs=1e-14)
    se = np.sqrt(p_hat * (1 - p_hat) / n)
    assert p_hat <= c_eps + 3 * se


def test_paths_agree_before_separation():
    spec = interface_walk(0.1)
    for rep in range(30):
        path = _run(spec, seed=91, rep=rep, horizon=10.0)
        if not np.isfinite(path.separation_time):
            continue
        t = path.separation_time * 0.999
        np.testing.assert_array_equal(path.position_at(t, "perturbed"),
                                      path.position_at(t, "unperturbed"))
