"""Coupled simulation of the environment and the two walkers.

The environment runs a graphical construction: every site carries a rate-1
Poisson clock; at each ring a uniform mark ``W`` proposes spin 1 if
``W < rho`` (else 0), and the proposal is applied only if the kinetic
constraint holds at that moment.  This realizes exactly the heat-bath
rates of :func:`perturbwalk.env_models.env_transitions`.

Both walkers — unperturbed (rates ``r``) and perturbed (rates
``r + rhat``) — are driven by one shared Poisson clock of rate ``lam``
and one shared sequence of uniforms.  At clock time ``t_k`` the uniform
``U_k`` is located in a fixed interval partition of [0,1) built per local
window: the unperturbed walker jumps by ``y`` iff ``U_k`` lands in
``I(y, w)``, the perturbed walker iff it lands in ``I_eps(y, w)``, where
``w`` is the window each walker sees in the *pre-clock* environment.
The partitions overlap as much as the rates allow, so the walkers agree
until a uniform falls into a region of measure ``|rhat|/lam``.

The layout is deterministic: intervals ``I(y_i, w)`` are placed
consecutively from 0 in canonical displacement order; ``I_eps(y_i, w)``
reuses the left part of ``I(y_i, w)`` of length ``(r + min(0, rhat))/lam``
and, when ``rhat > 0``, appends an extra segment carved consecutively from
the slack region to the right of all base intervals.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .env_models import EnvModel, LatticeTorus, RateSpec, SpinConfig
from .errors import InvalidRatesError, PerturbwalkError

__all__ = [
    "CouplingLayout",
    "CoupledPath",
    "EnvTrajectory",
    "ReplicaStreams",
    "replica_streams",
    "build_layout",
    "simulate_env",
    "simulate_coupled",
    "env_seen_by_walker",
]


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

class ReplicaStreams(NamedTuple):
    """Three independent generators per replica: environment, clock, uniforms."""

    env: np.random.Generator
    clock: np.random.Generator
    uniforms: np.random.Generator


def replica_streams(master_seed: int, replica: int) -> ReplicaStreams:
    """Disjoint, reproducible substreams for one replica.

    Derived from ``(master_seed, replica)`` through ``SeedSequence`` spawn
    keys, so any replica can be regenerated independently of the others.
    """
    root = np.random.SeedSequence(master_seed, spawn_key=(replica,))
    children = root.spawn(3)
    return ReplicaStreams(*(np.random.Generator(np.random.PCG64(c)) for c in children))


# ---------------------------------------------------------------------------
# Coupling layout
# ---------------------------------------------------------------------------

Segment = tuple[float, float]


@dataclass(frozen=True, eq=False)
class CouplingLayout:
    """Interval partitions of [0,1) shared by the two walkers.

    ``base[w][i]`` is the single half-open interval ``I(y_i, w)``;
    ``pert[w][i]`` is ``I_eps(y_i, w)`` as a tuple of at most two segments.
    ``lam`` dominates the total jump rate of both walkers in every window.
    """

    spec: RateSpec
    lam: float
    base: tuple[tuple[Segment, ...], ...]
    pert: tuple[tuple[tuple[Segment, ...], ...], ...]

    # --- measures, for checks and tests -----------------------------------
    def base_interval(self, y, wid: int) -> Segment:
        return self.base[wid][self.spec.displacement_index(_vec(y, self.spec.dim))]

    def pert_segments(self, y, wid: int) -> tuple[Segment, ...]:
        return self.pert[wid][self.spec.displacement_index(_vec(y, self.spec.dim))]

    def base_measure(self, y, wid: int) -> float:
        a, b = self.base_interval(y, wid)
        return b - a

    def pert_measure(self, y, wid: int) -> float:
        return sum(b - a for a, b in self.pert_segments(y, wid))

    def overlap_measure(self, y, wid: int) -> float:
        """Lebesgue measure of ``I(y, wid) ∩ I_eps(y, wid)``."""
        (a, b) = self.base_interval(y, wid)
        out = 0.0
        for (c, d) in self.pert_segments(y, wid):
            lo, hi = max(a, c), min(b, d)
            if hi > lo:
                out += hi - lo
        return out

    def lookup_tables(self) -> "_LookupTables":
        """Flat per-window arrays for the simulator's bisect lookups."""
        n_disp = len(self.spec.displacements)
        base_edges, pert_starts, pert_ends, pert_labels = [], [], [], []
        for wid in range(self.spec.n_windows):
            edges = [0.0]
            for i in range(n_disp):
                edges.append(self.base[wid][i][1])
            base_edges.append(edges)
            segs = []
            for i in range(n_disp):
                segs.extend((a, b, i) for (a, b) in self.pert[wid][i])
            segs.sort()
            pert_starts.append([s[0] for s in segs])
            pert_ends.append([s[1] for s in segs])
            pert_labels.append([s[2] for s in segs])
        return _LookupTables(base_edges, pert_starts, pert_ends, pert_labels, n_disp)


class _LookupTables(NamedTuple):
    base_edges: list[list[float]]
    pert_starts: list[list[float]]
    pert_ends: list[list[float]]
    pert_labels: list[list[int]]
    n_disp: int

    def base_jump(self, wid: int, u: float) -> int:
        """Displacement index for the unperturbed walker, or -1."""
        edges = self.base_edges[wid]
        i = bisect_right(edges, u) - 1
        if 0 <= i < self.n_disp and u < edges[i + 1]:
            return i
        return -1

    def pert_jump(self, wid: int, u: float) -> int:
        starts = self.pert_starts[wid]
        i = bisect_right(starts, u) - 1
        if i >= 0 and u < self.pert_ends[wid][i]:
            return self.pert_labels[wid][i]
        return -1


def build_layout(spec: RateSpec) -> CouplingLayout:
    """Deterministic interval layout realizing the coupling partitions.

    Satisfies, for every displacement ``y`` and window ``w``::

        |I(y,w)|            = r(y,w) / lam
        |I_eps(y,w)|        = (r(y,w) + rhat(y,w)) / lam
        |I ∩ I_eps|(y,w)    = (r(y,w) + min(0, rhat(y,w))) / lam

    with ``lam = sum_y max_w (r + max(0, rhat))`` and all intervals for
    distinct displacements pairwise disjoint within each family.
    """
    r, rhat = spec.base, spec.perturb
    if np.any(r + rhat < 0):
        raise InvalidRatesError("perturbed rates must be nonnegative to build a layout")
    lam = float(np.sum(np.max(r + np.maximum(rhat, 0.0), axis=1)))
    n_disp, n_win = r.shape
    base_all, pert_all = [], []
    for wid in range(n_win):
        base_w: list[Segment] = []
        pert_w: list[tuple[Segment, ...]] = []
        cursor = 0.0
        for i in range(n_disp):
            width = r[i, wid] / lam if lam > 0 else 0.0
            base_w.append((cursor, cursor + width))
            cursor += width
        slack = cursor                       # start of the spare region
        for i in range(n_disp):
            segs: list[Segment] = []
            main_len = (r[i, wid] + min(0.0, rhat[i, wid])) / lam if lam > 0 else 0.0
            a = base_w[i][0]
            if main_len > 0:
                segs.append((a, a + main_len))
            extra_len = max(0.0, rhat[i, wid]) / lam if lam > 0 else 0.0
            if extra_len > 0:
                segs.append((slack, slack + extra_len))
                slack += extra_len
            pert_w.append(tuple(segs))
        if slack > 1.0 + 1e-12:
            raise InvalidRatesError(
                f"layout overflow in window {wid}: total measure {slack}")
        base_all.append(tuple(base_w))
        pert_all.append(tuple(pert_w))
    return CouplingLayout(spec=spec, lam=lam,
                          base=tuple(base_all), pert=tuple(pert_all))


# ---------------------------------------------------------------------------
# Trajectory containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EnvTrajectory:
    """Applied environment flips over [0, horizon], plus the initial state."""

    torus: LatticeTorus
    horizon: float
    eta0: np.ndarray                 # (n_sites,) uint8
    times: np.ndarray                # (n_events,) float64, sorted
    sites: np.ndarray                # (n_events,) int64
    spins: np.ndarray                # (n_events,) uint8

    def state_at(self, t: float) -> np.ndarray:
        """Occupancy at time t (cadlag: includes flips at exactly t)."""
        if t > self.horizon:
            raise PerturbwalkError(f"time {t} beyond horizon {self.horizon}")
        k = int(np.searchsorted(self.times, t, side="right"))
        occ = self.eta0.copy()
        np.put(occ, self.sites[:k], self.spins[:k])
        return occ

    @property
    def n_events(self) -> int:
        return len(self.times)


@dataclass(frozen=True, eq=False)
class CoupledPath:
    """One replica of the coupled construction.

    Holds the environment log, the shared clock times and uniforms, and
    both walkers' jump logs.  Positions are unwrapped elements of Z^d; the
    environment lives on the torus.
    """

    env: EnvTrajectory
    spec: RateSpec
    lam: float
    clock_times: np.ndarray          # (K,) float64
    clock_uniforms: np.ndarray       # (K,) float64
    base_jump_times: np.ndarray      # (n,) float64
    base_jump_disp: np.ndarray       # (n, d) int64
    pert_jump_times: np.ndarray
    pert_jump_disp: np.ndarray
    separation_time: float = field(default=np.inf)

    @property
    def horizon(self) -> float:
        return self.env.horizon

    @property
    def dim(self) -> int:
        return self.spec.dim

    def _jumps(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        if which == "perturbed":
            return self.pert_jump_times, self.pert_jump_disp
        if which == "unperturbed":
            return self.base_jump_times, self.base_jump_disp
        raise ValueError(f"which must be 'perturbed' or 'unperturbed', got {which!r}")

    def position_at(self, t: float, which: str = "perturbed") -> np.ndarray:
        times, disp = self._jumps(which)
        k = int(np.searchsorted(times, t, side="right"))
        return disp[:k].sum(axis=0) if k else np.zeros(self.dim, dtype=np.int64)

    def final_position(self, which: str = "perturbed") -> np.ndarray:
        _, disp = self._jumps(which)
        return disp.sum(axis=0) if len(disp) else np.zeros(self.dim, dtype=np.int64)

    def positions_cumulative(self, which: str = "perturbed") -> tuple[np.ndarray, np.ndarray]:
        """(jump times, positions after 0..n jumps) — positions has n+1 rows."""
        times, disp = self._jumps(which)
        pos = np.zeros((len(times) + 1, self.dim), dtype=np.int64)
        if len(times):
            np.cumsum(disp, axis=0, out=pos[1:])
        return times, pos

    def iter_segments(self, which: str = "perturbed"
                      ) -> Iterator[tuple[float, float, np.ndarray, np.ndarray]]:
        """Piecewise-constant segments (t0, t1, occupancy, walker position).

        The yielded occupancy array is reused between segments — copy it if
        you keep a reference.
        """
        times, pos = self.positions_cumulative(which)
        occ = self.env.eta0.copy()
        ev_t, ev_s, ev_x = self.env.times, self.env.sites, self.env.spins
        breaks = np.concatenate([ev_t, times])
        kinds = np.concatenate([np.zeros(len(ev_t), np.int8), np.ones(len(times), np.int8)])
        # walker-first at ties, matching the simulator's convention
        order = np.lexsort((-kinds, breaks))
        t_prev = 0.0
        ie = iw = 0
        for idx in order:
            t = float(breaks[idx])
            if t > self.horizon:
                break
            if t > t_prev:
                yield t_prev, t, occ, pos[iw]
                t_prev = t
            if kinds[idx] == 0:
                occ[ev_s[ie]] = ev_x[ie]
                ie += 1
            else:
                iw += 1
        if self.horizon > t_prev:
            yield t_prev, self.horizon, occ, pos[iw]


def env_seen_by_walker(path: CoupledPath, which: str, t: float) -> SpinConfig:
    """The environment recentred at the walker: ``translate(sigma_t, X_t)``."""
    if t > path.horizon:
        raise PerturbwalkError(f"time {t} beyond horizon {path.horizon}")
    occ = path.env.state_at(t)
    pos = path.position_at(t, which)
    perm = path.env.torus.translation(tuple(int(c) for c in pos))
    return SpinConfig.from_array(path.env.torus, occ[perm])


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def _poisson_times(rate: float, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted event times of a Poisson process via the order-statistics trick."""
    if rate <= 0 or horizon <= 0:
        return np.empty(0, dtype=np.float64)
    n = rng.poisson(rate * horizon)
    times = rng.uniform(0.0, horizon, size=n)
    times.sort(kind="stable")
    return times


def _ring_schedule(n_sites: int, horizon: float, rng: np.random.Generator
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All ring events (time, site, mark W) over the horizon, time-sorted."""
    times_l, sites_l = [], []
    for site in range(n_sites):
        t = _poisson_times(1.0, horizon, rng)
        times_l.append(t)
        sites_l.append(np.full(len(t), site, dtype=np.int64))
    times = np.concatenate(times_l) if times_l else np.empty(0)
    sites = np.concatenate(sites_l) if sites_l else np.empty(0, dtype=np.int64)
    marks = rng.uniform(size=len(times))
    order = np.argsort(times, kind="stable")
    return times[order], sites[order], marks[order]


def simulate_env(model: EnvModel, eta0: SpinConfig, horizon: float,
                 rng: np.random.Generator) -> EnvTrajectory:
    """Environment trajectory from the per-site Poisson graphical construction."""
    if horizon < 0:
        raise PerturbwalkError(f"horizon must be >= 0, got {horizon}")
    torus = eta0.torus
    model.validate_torus(torus)
    ring_t, ring_s, ring_w = _ring_schedule(torus.n_sites, horizon, rng)
    occ = [int(b) for b in eta0.as_array()]
    out_t, out_s, out_x = _apply_rings(model, torus, occ, ring_t, ring_s, ring_w,
                                       0, len(ring_t))
    return EnvTrajectory(
        torus=torus, horizon=float(horizon), eta0=eta0.as_array(),
        times=np.asarray(out_t, dtype=np.float64),
        sites=np.asarray(out_s, dtype=np.int64),
        spins=np.asarray(out_x, dtype=np.uint8),
    )


def _apply_rings(model: EnvModel, torus: LatticeTorus, occ: list,
                 ring_t, ring_s, ring_w, start: int, stop: int
                 ) -> tuple[list, list, list]:
    """Apply ring events [start, stop) to ``occ`` in place; return applied flips."""
    rho = model.rho
    out_t: list[float] = []
    out_s: list[int] = []
    out_x: list[int] = []
    kind = model.kind
    side = torus.side
    if kind == "fa_jf":
        nbrs = torus.neighbors()
        need = model.j
    for k in range(start, stop):
        site = int(ring_s[k])
        proposal = 1 if ring_w[k] < rho else 0
        if occ[site] == proposal:
            continue
        if kind == "east":
            if occ[(site + 1) % side] != 0:
                continue
        elif kind == "fa_jf":
            vac = 0
            for nb in nbrs[site]:
                if occ[nb] == 0:
                    vac += 1
            if vac < need:
                continue
        occ[site] = proposal
        out_t.append(float(ring_t[k]))
        out_s.append(site)
        out_x.append(proposal)
    return out_t, out_s, out_x


def simulate_coupled(model: EnvModel, spec: RateSpec, layout: CouplingLayout,
                     eta0: SpinConfig, horizon: float,
                     streams: ReplicaStreams) -> CoupledPath:
    """Run one replica of the coupled environment + two-walker construction.

    The environment is generated first from the ``env`` stream; the walker
    clock from the ``clock`` stream; the shared uniforms from ``uniforms``.
    Both walkers read the strict pre-clock environment state and the same
    uniform at every clock tick.
    """
    if horizon < 0:
        raise PerturbwalkError(f"horizon must be >= 0, got {horizon}")
    torus = eta0.torus
    model.validate_torus(torus)
    spec.validate_torus(torus)

    ring_t, ring_s, ring_w = _ring_schedule(torus.n_sites, horizon, streams.env)
    clock_t = _poisson_times(layout.lam, horizon, streams.clock)
    clock_u = streams.uniforms.uniform(size=len(clock_t))

    tables = layout.lookup_tables()
    offsets = spec.offsets
    disp = spec.displacements
    dim = spec.dim
    side = torus.side
    shape = torus.shape
    pow2 = [1 << p for p in range(len(offsets))]

    def window_id(occ: list, pos: tuple) -> int:
        wid = 0
        for p, off in enumerate(offsets):
            if dim == 1:
                s = (pos[0] + off[0]) % side
            else:
                s = int(np.ravel_multi_index(
                    tuple((pos[i] + off[i]) % side for i in range(dim)), shape))
            if occ[s]:
                wid += pow2[p]
        return wid

    occ = [int(b) for b in eta0.as_array()]
    x_base = (0,) * dim
    x_pert = (0,) * dim
    env_t: list[float] = []
    env_s: list[int] = []
    env_x: list[int] = []
    bj_t: list[float] = []
    bj_d: list[tuple] = []
    pj_t: list[float] = []
    pj_d: list[tuple] = []
    separation = np.inf

    ring_ptr, n_rings = 0, len(ring_t)
    for k in range(len(clock_t)):
        tk = float(clock_t[k])
        # advance the environment strictly past-before the clock tick
        stop = ring_ptr
        while stop < n_rings and ring_t[stop] < tk:
            stop += 1
        if stop > ring_ptr:
            t3, s3, x3 = _apply_rings(model, torus, occ, ring_t, ring_s, ring_w,
                                      ring_ptr, stop)
            env_t.extend(t3); env_s.extend(s3); env_x.extend(x3)
            ring_ptr = stop
        u = float(clock_u[k])
        wid_b = window_id(occ, x_base)
        wid_p = wid_b if x_pert == x_base else window_id(occ, x_pert)
        ib = tables.base_jump(wid_b, u)
        ip = tables.pert_jump(wid_p, u)
        if ib >= 0:
            y = disp[ib]
            x_base = tuple(x_base[i] + y[i] for i in range(dim))
            bj_t.append(tk); bj_d.append(y)
        if ip >= 0:
            y = disp[ip]
            x_pert = tuple(x_pert[i] + y[i] for i in range(dim))
            pj_t.append(tk); pj_d.append(y)
        if separation == np.inf and x_base != x_pert:
            separation = tk
    # remaining environment events after the last clock tick
    if ring_ptr < n_rings:
        t3, s3, x3 = _apply_rings(model, torus, occ, ring_t, ring_s, ring_w,
                                  ring_ptr, n_rings)
        env_t.extend(t3); env_s.extend(s3); env_x.extend(x3)

    env = EnvTrajectory(
        torus=torus, horizon=float(horizon), eta0=eta0.as_array(),
        times=np.asarray(env_t, dtype=np.float64),
        sites=np.asarray(env_s, dtype=np.int64),
        spins=np.asarray(env_x, dtype=np.uint8),
    )
    d = dim
    return CoupledPath(
        env=env, spec=spec, lam=layout.lam,
        clock_times=clock_t, clock_uniforms=clock_u,
        base_jump_times=np.asarray(bj_t, dtype=np.float64),
        base_jump_disp=np.asarray(bj_d, dtype=np.int64).reshape(len(bj_t), d),
        pert_jump_times=np.asarray(pj_t, dtype=np.float64),
        pert_jump_disp=np.asarray(pj_d, dtype=np.int64).reshape(len(pj_t), d),
        separation_time=float(separation),
    )


def _vec(y, dim: int) -> tuple[int, ...]:
    if isinstance(y, (int, np.integer)):
        if dim != 1:
            raise PerturbwalkError("scalar displacement only valid in d=1")
        return (int(y),)
    return tuple(int(c) for c in y)
