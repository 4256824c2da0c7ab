"""Lattice tori, spin configurations, environment dynamics and walker rates.

The environment is a {0,1}-spin system on a d-dimensional periodic torus
(0 = vacancy, 1 = particle) evolving by constrained heat-bath flips:
site ``x`` flips at rate ``c_x(sigma) * (rho*(1-sigma(x)) + (1-rho)*sigma(x))``
where the constraint ``c_x`` depends on the model family:

* ``independent_flip`` — no constraint, every site flips freely;
* ``east`` — d=1 only, site ``x`` may flip iff site ``x+1`` is vacant;
* ``fa_jf`` — site ``x`` may flip iff at least ``j`` nearest neighbours
  are vacant.

All three are reversible w.r.t. the product Bernoulli(rho) measure (the
constraint never looks at the flipping site itself), restricted to the
irreducible component when traps exist (all-ones for east/FA).

The walker is described by a :class:`RateSpec`: finite-range jump rates
``r(y, .)`` plus a perturbation ``rhat(y, .)``, both functions of the
environment restricted to the window ``B(R) = {|z|_inf <= R}`` around the
walker.  Rates are stored as dense lookup tables over the ``2^{|B(R)|}``
local windows so evaluation in the simulator hot loop is one indexed read.

Conventions (load-bearing, shared with the oracle and the simulator):

* Sites are indexed row-major over coordinates; spin configurations pack
  little-endian by site index (bit ``s`` of the integer id is site ``s``).
* Window offsets of ``B(R)`` are enumerated in lexicographic coordinate
  order (d=1: ``-R..R``); window ids pack little-endian in that order.
* Displacements are enumerated sorted by ``(|y|_inf, negated coordinates)``
  so that, in d=1, ``+1`` precedes ``-1``.  The coupling layout depends on
  this order, so do not change it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, NamedTuple

import numpy as np

from .errors import (
    GeometryError,
    InvalidRatesError,
    UnsupportedModelError,
)

__all__ = [
    "LatticeTorus",
    "SpinConfig",
    "EnvModel",
    "RateSpec",
    "env_transitions",
    "rate_eval",
    "jump_observable",
    "beta_norm",
    "moment_sum",
    "window_offsets",
    "canonical_displacements",
    "interface_walk",
    "driven_probe",
    "decoupled_walk",
]


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatticeTorus:
    """A d-dimensional periodic lattice with ``side**dim`` sites.

    Site index is row-major over coordinates (the last coordinate varies
    fastest), so for d=1 the index *is* the coordinate.
    """

    dim: int
    side: int

    def __post_init__(self):
        if self.dim < 1:
            raise GeometryError(f"dim must be >= 1, got {self.dim}")
        if self.side < 2:
            raise GeometryError(f"side must be >= 2, got {self.side}")

    @property
    def n_sites(self) -> int:
        return self.side ** self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.dim

    def coords(self) -> np.ndarray:
        """(n_sites, dim) array of site coordinates in index order."""
        return _torus_coords(self.dim, self.side)

    def site_index(self, coords: Iterable[int]) -> int:
        """Row-major index of the site at ``coords`` (wrapped mod side)."""
        c = np.mod(np.asarray(tuple(coords), dtype=np.int64), self.side)
        return int(np.ravel_multi_index(c, self.shape))

    def translation(self, y: Iterable[int]) -> np.ndarray:
        """Site permutation ``T`` realizing translation by ``y``.

        Defined so that the translated configuration reads
        ``occ_translated[x] = occ[T[x]]`` with ``T[x] = index(x + y)``:
        translating by ``y`` recentres the configuration at ``y``.
        """
        return _translation_perm(self.dim, self.side, tuple(int(v) for v in y))

    def neighbors(self) -> np.ndarray:
        """(n_sites, 2*dim) site indices of nearest neighbours (+e_i, -e_i)."""
        return _neighbor_table(self.dim, self.side)


@lru_cache(maxsize=None)
def _torus_coords(dim: int, side: int) -> np.ndarray:
    grid = np.indices((side,) * dim).reshape(dim, -1).T
    grid = np.ascontiguousarray(grid.astype(np.int64))
    grid.flags.writeable = False
    return grid


@lru_cache(maxsize=None)
def _translation_perm(dim: int, side: int, y: tuple[int, ...]) -> np.ndarray:
    if len(y) != dim:
        raise GeometryError(f"translation vector has dim {len(y)}, torus has {dim}")
    coords = _torus_coords(dim, side)
    shifted = np.mod(coords + np.asarray(y, dtype=np.int64), side)
    perm = np.ravel_multi_index(shifted.T, (side,) * dim).astype(np.int64)
    perm.flags.writeable = False
    return perm


@lru_cache(maxsize=None)
def _neighbor_table(dim: int, side: int) -> np.ndarray:
    coords = _torus_coords(dim, side)
    cols = []
    for axis in range(dim):
        for sign in (+1, -1):
            shifted = coords.copy()
            shifted[:, axis] = np.mod(shifted[:, axis] + sign, side)
            cols.append(np.ravel_multi_index(shifted.T, (side,) * dim))
    table = np.stack(cols, axis=1).astype(np.int64)
    table.flags.writeable = False
    return table


# ---------------------------------------------------------------------------
# Spin configurations
# ---------------------------------------------------------------------------

class SpinConfig:
    """Immutable {0,1} configuration on a :class:`LatticeTorus`.

    Stored as one byte per site; hashable and comparable.  The integer
    ``index`` packs bits little-endian by site and doubles as the state id
    used by the exact oracle.
    """

    __slots__ = ("torus", "_occ")

    def __init__(self, torus: LatticeTorus, occupancy: Iterable[int]):
        occ = bytes(int(b) for b in occupancy)
        if len(occ) != torus.n_sites:
            raise GeometryError(
                f"occupancy length {len(occ)} != n_sites {torus.n_sites}")
        if any(b not in (0, 1) for b in occ):
            raise ValueError("occupancy values must be 0 or 1")
        object.__setattr__(self, "torus", torus)
        object.__setattr__(self, "_occ", occ)

    # construction helpers -------------------------------------------------
    @classmethod
    def from_index(cls, torus: LatticeTorus, index: int) -> "SpinConfig":
        if not 0 <= index < (1 << torus.n_sites):
            raise ValueError(f"index {index} out of range for {torus.n_sites} sites")
        return cls(torus, ((index >> s) & 1 for s in range(torus.n_sites)))

    @classmethod
    def from_array(cls, torus: LatticeTorus, arr: np.ndarray) -> "SpinConfig":
        return cls(torus, np.asarray(arr).astype(np.uint8).ravel())

    # views ----------------------------------------------------------------
    def as_array(self) -> np.ndarray:
        return np.frombuffer(self._occ, dtype=np.uint8).copy()

    @property
    def index(self) -> int:
        out = 0
        for s, b in enumerate(self._occ):
            out |= b << s
        return out

    def __getitem__(self, site: int) -> int:
        return self._occ[site % self.torus.n_sites]

    def spin_at(self, coords: Iterable[int]) -> int:
        return self._occ[self.torus.site_index(coords)]

    # operations -----------------------------------------------------------
    def translate(self, y: Iterable[int]) -> "SpinConfig":
        """Recentre at ``y``: the result at site x equals self at x+y."""
        perm = self.torus.translation(y)
        occ = self.as_array()[perm]
        return SpinConfig.from_array(self.torus, occ)

    def flip(self, site: int) -> "SpinConfig":
        occ = bytearray(self._occ)
        occ[site] ^= 1
        return SpinConfig(self.torus, occ)

    # dunder ---------------------------------------------------------------
    def __eq__(self, other) -> bool:
        return (isinstance(other, SpinConfig)
                and self.torus == other.torus
                and self._occ == other._occ)

    def __hash__(self) -> int:
        return hash((self.torus, self._occ))

    def __repr__(self) -> str:
        bits = "".join(str(b) for b in self._occ)
        return f"SpinConfig({self.torus.dim}d L={self.torus.side}, {bits})"


# ---------------------------------------------------------------------------
# Environment models
# ---------------------------------------------------------------------------

ENV_KINDS = ("independent_flip", "east", "fa_jf")


@dataclass(frozen=True)
class EnvModel:
    """Constrained spin-flip environment: kind, density, FA facilitation j."""

    kind: str
    rho: float
    j: int | None = None

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise UnsupportedModelError(
                f"unknown environment kind {self.kind!r}; expected one of {ENV_KINDS}")
        if not 0.0 < self.rho < 1.0:
            raise UnsupportedModelError(f"rho must lie in (0,1), got {self.rho}")
        if self.kind == "fa_jf":
            if self.j is None or self.j < 1:
                raise UnsupportedModelError("fa_jf requires facilitation j >= 1")
        elif self.j is not None:
            raise UnsupportedModelError(f"{self.kind} takes no facilitation parameter")

    def validate_torus(self, torus: LatticeTorus) -> None:
        if self.kind == "east" and torus.dim != 1:
            raise UnsupportedModelError("east model is defined for dim=1 only")
        if self.kind == "fa_jf" and self.j > 2 * torus.dim:
            raise UnsupportedModelError(
                f"fa_jf with j={self.j} needs j <= 2*dim = {2 * torus.dim}")

    # constraint ------------------------------------------------------------
    def constraint_mask(self, occ: np.ndarray, torus: LatticeTorus) -> np.ndarray:
        """Boolean array: which sites are allowed to flip in ``occ``."""
        self.validate_torus(torus)
        if self.kind == "independent_flip":
            return np.ones(torus.n_sites, dtype=bool)
        if self.kind == "east":
            right = torus.translation((1,))
            return occ[right] == 0
        # fa_jf: at least j vacant nearest neighbours
        nbrs = torus.neighbors()
        vacant = (occ[nbrs] == 0).sum(axis=1)
        return vacant >= self.j

    def constraint_ok(self, occ: np.ndarray, site: int, torus: LatticeTorus) -> bool:
        """Single-site constraint check (simulator hot path)."""
        if self.kind == "independent_flip":
            return True
        if self.kind == "east":
            return occ[(site + 1) % torus.side] == 0
        nbrs = _neighbor_table(torus.dim, torus.side)[site]
        vacant = int((occ[nbrs] == 0).sum())
        return vacant >= self.j

    def flip_rate(self, spin: int) -> float:
        """Heat-bath part of the flip rate at a site currently holding ``spin``."""
        return self.rho if spin == 0 else 1.0 - self.rho


def env_transitions(model: EnvModel, eta: SpinConfig) -> list[tuple[int, int, float]]:
    """All spin flips with strictly positive rate out of ``eta``.

    Returns ``(site, new_spin, rate)`` triples with
    ``rate = c_site(eta) * (rho*(1-spin) + (1-rho)*spin)``.
    """
    torus = eta.torus
    occ = eta.as_array()
    allowed = model.constraint_mask(occ, torus)
    out: list[tuple[int, int, float]] = []
    for site in np.nonzero(allowed)[0]:
        spin = int(occ[site])
        rate = model.flip_rate(spin)
        if rate > 0.0:
            out.append((int(site), 1 - spin, rate))
    return out


# ---------------------------------------------------------------------------
# Walker rate tables
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def window_offsets(dim: int, radius: int) -> tuple[tuple[int, ...], ...]:
    """Offsets of the box ``B(radius)`` in lexicographic coordinate order."""
    rng = range(-radius, radius + 1)
    return tuple(itertools.product(rng, repeat=dim))


@lru_cache(maxsize=None)
def canonical_displacements(dim: int, radius: int) -> tuple[tuple[int, ...], ...]:
    """Nonzero displacements of ``B(radius)``, sorted by (|y|_inf, -y).

    The negated-coordinate tiebreak puts positive displacements first:
    in d=1 the order is ``+1, -1, +2, -2, ...``.  The coupling layout
    allocates intervals in exactly this order.
    """
    ys = [y for y in window_offsets(dim, radius) if any(c != 0 for c in y)]
    ys.sort(key=lambda y: (max(abs(c) for c in y), tuple(-c for c in y)))
    return tuple(ys)


@dataclass(frozen=True, eq=False)
class RateSpec:
    """Finite-range walker jump rates as dense window lookup tables.

    ``base[i, w]`` and ``perturb[i, w]`` give ``r(y_i, .)`` and
    ``rhat(y_i, .)`` on the local window with id ``w``; displacement order
    is :func:`canonical_displacements`.  Total rates ``base + perturb``
    must be nonnegative (they are the perturbed walker's jump rates).
    """

    dim: int
    radius: int
    base: np.ndarray
    perturb: np.ndarray
    family: str | None = None
    strength: float | None = None

    def __post_init__(self):
        disp = canonical_displacements(self.dim, self.radius)
        n_win = 1 << len(window_offsets(self.dim, self.radius))
        base = np.ascontiguousarray(np.asarray(self.base, dtype=np.float64))
        pert = np.ascontiguousarray(np.asarray(self.perturb, dtype=np.float64))
        expected = (len(disp), n_win)
        if base.shape != expected or pert.shape != expected:
            raise InvalidRatesError(
                f"rate tables must have shape {expected}, got {base.shape} / {pert.shape}")
        if np.any(base < 0):
            raise InvalidRatesError("base rates r(y,.) must be nonnegative")
        if np.any(base + pert < 0):
            raise InvalidRatesError(
                "perturbed rates r(y,.) + rhat(y,.) must be nonnegative")
        base.flags.writeable = False
        pert.flags.writeable = False
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "perturb", pert)

    # geometry --------------------------------------------------------------
    @property
    def displacements(self) -> tuple[tuple[int, ...], ...]:
        return canonical_displacements(self.dim, self.radius)

    @property
    def offsets(self) -> tuple[tuple[int, ...], ...]:
        return window_offsets(self.dim, self.radius)

    @property
    def n_windows(self) -> int:
        return self.base.shape[1]

    def displacement_index(self, y: Iterable[int]) -> int:
        y = tuple(int(v) for v in y)
        try:
            return self.displacements.index(y)
        except ValueError:
            raise GeometryError(
                f"displacement {y} outside B({self.radius})") from None

    def validate_torus(self, torus: LatticeTorus) -> None:
        if torus.dim != self.dim:
            raise GeometryError(
                f"rate spec is {self.dim}-dimensional, torus is {torus.dim}-dimensional")
        if torus.side < 2 * self.radius + 1:
            raise GeometryError(
                f"torus side {torus.side} < 2R+1 = {2 * self.radius + 1}: "
                "window sites would coincide")

    # window machinery ------------------------------------------------------
    def window_sites(self, torus: LatticeTorus) -> np.ndarray:
        """(n_sites, |B(R)|) table: window site indices around each position."""
        self.validate_torus(torus)
        return _window_site_table(torus.dim, torus.side, self.radius)

    def window_id(self, occ: np.ndarray, torus: LatticeTorus, position) -> int:
        """Window id of the environment as seen from ``position``."""
        pos = np.asarray(position, dtype=np.int64).ravel()
        site = int(np.ravel_multi_index(np.mod(pos, torus.side), torus.shape))
        sites = self.window_sites(torus)[site]
        return int(occ[sites] @ _pow2(len(sites)))

    # aggregates ------------------------------------------------------------
    def sup_abs_perturb(self) -> np.ndarray:
        """Per-displacement sup over windows of |rhat(y,.)| (exact, finite)."""
        return np.max(np.abs(self.perturb), axis=1)

    def total_rates(self) -> np.ndarray:
        return self.base + self.perturb

    def with_perturbation_scaled(self, factor: float) -> "RateSpec":
        return RateSpec(self.dim, self.radius, self.base, factor * self.perturb,
                        family=self.family, strength=None)


@lru_cache(maxsize=None)
def _window_site_table(dim: int, side: int, radius: int) -> np.ndarray:
    coords = _torus_coords(dim, side)
    offs = np.asarray(window_offsets(dim, radius), dtype=np.int64)
    # (n_sites, n_window, dim) -> wrapped site indices
    stacked = np.mod(coords[:, None, :] + offs[None, :, :], side)
    table = np.ravel_multi_index(
        np.moveaxis(stacked, 2, 0), (side,) * dim).astype(np.int64)
    table.flags.writeable = False
    return table


@lru_cache(maxsize=None)
def _pow2(n: int) -> np.ndarray:
    v = (1 << np.arange(n, dtype=np.int64))
    v.flags.writeable = False
    return v


# ---------------------------------------------------------------------------
# Rate evaluation and observables
# ---------------------------------------------------------------------------

def rate_eval(spec: RateSpec, y, eta: SpinConfig, x=0) -> tuple[float, float]:
    """Evaluate ``( r(y, .), rhat(y, .) )`` for the walker at ``x`` in ``eta``.

    ``y`` and ``x`` are integers in d=1 or coordinate tuples in general;
    only the window of the recentred configuration within ``B(R)`` is read.
    """
    y = _as_vec(y, spec.dim)
    if max(abs(c) for c in y) > spec.radius:
        raise GeometryError(f"displacement {y} outside B({spec.radius})")
    i = spec.displacement_index(y)
    wid = spec.window_id(eta.as_array(), eta.torus, _as_vec(x, spec.dim))
    return float(spec.base[i, wid]), float(spec.perturb[i, wid])


class JumpDrift(NamedTuple):
    """Local mean drift of the walker: perturbed and base variants."""

    perturbed: np.ndarray
    base: np.ndarray


def jump_observable(spec: RateSpec, eta: SpinConfig) -> JumpDrift:
    """Local drift ``j(eta) = sum_y y * rate(y, eta)`` seen from the origin.

    Returns both the perturbed-walker drift (rates ``r + rhat``) and the
    base-walker drift (rates ``r``), each a vector in R^d.
    """
    wid = spec.window_id(eta.as_array(), eta.torus, (0,) * spec.dim)
    ys = np.asarray(spec.displacements, dtype=np.float64)
    pert = ys.T @ (spec.base[:, wid] + spec.perturb[:, wid])
    base = ys.T @ spec.base[:, wid]
    return JumpDrift(perturbed=pert, base=base)


def beta_norm(spec: RateSpec) -> float:
    """``sum_y |y| * sup_w |rhat(y, w)|`` — the perturbation's first moment."""
    ys = np.asarray(spec.displacements, dtype=np.float64)
    lengths = np.sqrt((ys ** 2).sum(axis=1))
    return float(lengths @ spec.sup_abs_perturb())


def moment_sum(spec: RateSpec, n: int, which: str = "perturbed") -> float:
    """``sum_y |y|^n * sup_w rate(y, w)`` for the requested rate family.

    ``which`` is ``"perturbed"`` (rates r + rhat), ``"base"`` (r), or
    ``"perturbation"`` (|rhat|).  Exposed for n in {1, 2, 4} per contract,
    but any n >= 1 works.
    """
    if n < 1:
        raise ValueError("moment order must be >= 1")
    ys = np.asarray(spec.displacements, dtype=np.float64)
    lengths = np.sqrt((ys ** 2).sum(axis=1))
    if which == "perturbed":
        sup = np.max(spec.base + spec.perturb, axis=1)
    elif which == "base":
        sup = np.max(spec.base, axis=1)
    elif which == "perturbation":
        sup = spec.sup_abs_perturb()
    else:
        raise ValueError(f"unknown rate family {which!r}")
    return float((lengths ** n) @ sup)


def _as_vec(v, dim: int) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        if dim != 1:
            raise GeometryError(f"scalar position/displacement needs dim=1, got dim={dim}")
        return (int(v),)
    return tuple(int(c) for c in v)


# ---------------------------------------------------------------------------
# Built-in rate families
# ---------------------------------------------------------------------------

def _center_bit(dim: int, radius: int) -> int:
    """Position of the origin in the window-offset order."""
    return window_offsets(dim, radius).index((0,) * dim)


def interface_walk(strength: float) -> RateSpec:
    """Nearest-neighbour walk that drifts toward occupation interfaces (d=1).

    Base rates 1/2 to each side; the perturbation ``+/- strength*(2*eta(0)-1)``
    pushes right on a particle and left on a vacancy, so the walker sticks
    to the particle/vacancy boundary.  Requires ``0 <= strength <= 1/2`` to
    keep total rates nonnegative.
    """
    if not 0.0 <= strength <= 0.5:
        raise InvalidRatesError(
            f"interface walk needs strength in [0, 1/2], got {strength}")
    dim, radius = 1, 1
    disp = canonical_displacements(dim, radius)     # (+1, -1)
    n_win = 1 << len(window_offsets(dim, radius))
    base = np.full((len(disp), n_win), 0.5)
    pert = np.zeros_like(base)
    c = _center_bit(dim, radius)
    for wid in range(n_win):
        sign = 2 * ((wid >> c) & 1) - 1            # 2*eta(0) - 1
        pert[disp.index((1,)), wid] = strength * sign
        pert[disp.index((-1,)), wid] = -strength * sign
    return RateSpec(dim, radius, base, pert, family="interface", strength=strength)


def driven_probe(strength: float) -> RateSpec:
    """Probe particle in a field: hops onto vacant neighbours, tilted forward.

    Unperturbed rate ``r(+/-1, eta) = (1 - eta(0)) * (1 - eta(+/-1))`` (both
    the origin and the target must be vacant); the field multiplies these by
    ``2/(1+exp(-strength))`` forward and ``2/(1+exp(strength))`` backward, so
    the two tilts average to one and vanish at strength 0.
    """
    if strength < 0:
        raise InvalidRatesError(f"driven probe needs strength >= 0, got {strength}")
    dim, radius = 1, 1
    offs = window_offsets(dim, radius)              # (-1, 0, +1)
    disp = canonical_displacements(dim, radius)
    n_win = 1 << len(offs)
    base = np.zeros((len(disp), n_win))
    pert = np.zeros_like(base)
    tilt = {(1,): 2.0 / (1.0 + np.exp(-strength)),
            (-1,): 2.0 / (1.0 + np.exp(strength))}
    bit = {off: offs.index(off) for off in offs}
    for wid in range(n_win):
        eta0 = (wid >> bit[(0,)]) & 1
        for y in disp:
            target = (wid >> bit[y]) & 1
            r = (1 - eta0) * (1 - target)
            base[disp.index(y), wid] = r
            pert[disp.index(y), wid] = r * (tilt[y] - 1.0)
    return RateSpec(dim, radius, base, pert, family="driven_probe", strength=strength)


def decoupled_walk(rate: float = 0.5, dim: int = 1) -> RateSpec:
    """Simple symmetric walk ignoring the environment; no perturbation."""
    if rate < 0:
        raise InvalidRatesError(f"jump rate must be >= 0, got {rate}")
    radius = 1
    disp = canonical_displacements(dim, radius)
    n_win = 1 << len(window_offsets(dim, radius))
    base = np.zeros((len(disp), n_win))
    for i, y in enumerate(disp):
        if sum(abs(c) for c in y) == 1:             # nearest neighbours only
            base[i, :] = rate
    pert = np.zeros_like(base)
    return RateSpec(dim, radius, base, pert, family="decoupled", strength=rate)
