"""Exact finite-state analysis of the environment seen from the walker.

Everything here is dense linear algebra over the irreducible component of
the environment state space (the component of the all-vacant configuration
under the kinetic constraint).  The module builds the generator of the
environment (`L_env`), of the environment-as-seen-by-the-unperturbed-walker
(`L_ew = L_env + L_jump`) and the perturbation operator (`L_hat`), then
computes:

* the spectral gap of the reversible environment and the equivalent
  exponential contraction of its semigroup,
* the operator norm of the perturbation in L²(mu),
* the stationary law of the perturbed chain and its density against the
  unperturbed reference measure, both by direct solve and by a resolvent
  expansion with certified geometric truncation bounds,
* iterated perturbation terms of the semigroup (via a block matrix
  exponential, so that no numerical time quadrature enters the bound
  checks), and the full battery of decay inequalities that the certified
  bounds rest on,
* the walker velocity (exact and as a series with tail control), the
  spatial decay profile of the perturbed measure, and variational /
  corrector characterizations of the diffusivity.

Inner products are always weighted by the reference measure ``mu``:
``<f, g>_mu = sum_eta mu(eta) f(eta) g(eta)``.  Operators act on functions
as matrices, ``(A f)(i) = sum_j A[i, j] f(j)``; measures act from the left
(``m @ A``).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.integrate import simpson
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .env_models import (
    EnvModel,
    LatticeTorus,
    RateSpec,
    SpinConfig,
    env_transitions,
    window_offsets,
)
from .errors import (
    AssumptionViolation,
    GeometryError,
    PerturbwalkError,
    StateCapError,
)

__all__ = [
    "DEFAULT_STATE_CAP",
    "EQ_TOL",
    "INEQ_SLACK",
    "StateSpace",
    "GeneratorSet",
    "LocalFunction",
    "occupancy_at_origin",
    "CheckRecord",
    "BoundsReport",
    "GapReport",
    "NormReport",
    "StationaryReport",
    "ExpansionReport",
    "VelocityReport",
    "DecayProfile",
    "DiffusionReport",
    "DiffusionExactReport",
    "build_generators",
    "mu_mean",
    "mu_inner",
    "mu_norm",
    "mu_adjoint",
    "spectral_gap",
    "contraction_check",
    "l2_operator_norm",
    "stationary_solve",
    "density_expansion",
    "dyson_term",
    "dyson_terms_upto",
    "velocity",
    "velocity_longtime",
    "drift_vectors",
    "semigroup_bounds_check",
    "dyson_bounds_check",
    "decay_profile",
    "diffusion_variational",
    "diffusion_exact",
]

#: Hard cap on the enumerated component size (dense matrices beyond this
#: are not what this module is for).
DEFAULT_STATE_CAP = 1 << 14
#: Absolute tolerance for equality checks.
EQ_TOL = 1e-10
#: Additive slack granted to inequality checks (double-precision expm).
INEQ_SLACK = 1e-9


# ---------------------------------------------------------------------------
# State space
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StateSpace:
    """The irreducible component of the environment, enumerated.

    States are sorted by their packed integer encoding (little-endian in
    the site index), so the all-vacant configuration is row 0 whenever it
    belongs to the component.  ``mu`` is the product Bernoulli(rho) law
    conditioned to the component.
    """

    torus: LatticeTorus
    model: EnvModel
    packed: np.ndarray               # (N,) int64, strictly increasing
    bits: np.ndarray                 # (N, n_sites) uint8
    mu: np.ndarray                   # (N,) float64, sums to 1
    _trans_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def enumerate_component(cls, model: EnvModel, torus: LatticeTorus,
                            cap: int = DEFAULT_STATE_CAP,
                            root: SpinConfig | None = None) -> "StateSpace":
        """Breadth-first closure of ``root`` (default all-vacant) under
        the environment's allowed flips."""
        model.validate_torus(torus)
        n = torus.n_sites
        if n > 62:
            raise StateCapError(f"{n} sites exceed the 62-bit packing limit")
        if root is None:
            root = SpinConfig.from_index(torus, 0)
        seen = {root.index}
        frontier = [root]
        while frontier:
            nxt = []
            for cfg in frontier:
                for site, new_spin, _rate in env_transitions(model, cfg):
                    child = cfg.index ^ (1 << site)
                    if child not in seen:
                        seen.add(child)
                        if len(seen) > cap:
                            raise StateCapError(
                                f"component exceeds the state cap {cap}")
                        nxt.append(SpinConfig.from_index(torus, child))
            frontier = nxt
        packed = np.array(sorted(seen), dtype=np.int64)
        bits = ((packed[:, None] >> np.arange(n, dtype=np.int64)) & 1).astype(np.uint8)
        occupied = bits.sum(axis=1)
        logw = occupied * math.log(model.rho) + (n - occupied) * math.log(1 - model.rho)
        w = np.exp(logw - logw.max())
        mu = w / w.sum()
        return cls(torus=torus, model=model, packed=packed, bits=bits, mu=mu)

    @property
    def n_states(self) -> int:
        return len(self.packed)

    @property
    def _pow2(self) -> np.ndarray:
        return (np.int64(1) << np.arange(self.torus.n_sites, dtype=np.int64))

    def rows_of_packed(self, q: np.ndarray) -> np.ndarray:
        """Row indices of packed configurations; raises if any lies outside."""
        q = np.asarray(q, dtype=np.int64)
        idx = np.searchsorted(self.packed, q)
        idx_c = np.clip(idx, 0, self.n_states - 1)
        if np.any(self.packed[idx_c] != q):
            raise PerturbwalkError("configuration outside the irreducible component")
        return idx_c

    def row_index(self, packed: int) -> int:
        return int(self.rows_of_packed(np.array([packed]))[0])

    def translation_rows(self, y: tuple[int, ...]) -> np.ndarray:
        """Row permutation sending each state to its translate by ``y``."""
        y = tuple(int(c) for c in y)
        cached = self._trans_cache.get(y)
        if cached is None:
            perm = self.torus.translation(y)
            shifted = self.bits[:, perm].astype(np.int64) @ self._pow2
            cached = self.rows_of_packed(shifted)
            self._trans_cache[y] = cached
        return cached

    def window_ids(self, spec: RateSpec) -> np.ndarray:
        """Packed local window around the origin, one id per state."""
        sites = spec.window_sites(self.torus)[0]      # row 0 = origin
        p = (np.int64(1) << np.arange(len(sites), dtype=np.int64))
        return self.bits[:, sites].astype(np.int64) @ p

    def state_transitions(self, i: int) -> list[tuple[int, int, float]]:
        """Allowed environment flips from state row ``i`` as
        (target row, site, rate)."""
        cfg = SpinConfig.from_index(self.torus, int(self.packed[i]))
        out = []
        for site, _new_spin, rate in env_transitions(self.model, cfg):
            out.append((self.row_index(int(self.packed[i]) ^ (1 << site)), site, rate))
        return out


# ---------------------------------------------------------------------------
# Local functions (observables with finite support)
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LocalFunction:
    """A function of the configuration restricted to a box around a point.

    ``values[w]`` is the function value on the packed restriction ``w``
    (bit p of ``w`` is the spin at the p-th offset of the box, offsets in
    lexicographic order).
    """

    dim: int
    radius: int
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        n_sites = (2 * self.radius + 1) ** self.dim
        if vals.shape != (1 << n_sites,):
            raise PerturbwalkError(
                f"need {1 << n_sites} window values, got shape {vals.shape}")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def evaluate(self, space: StateSpace, shift: tuple[int, ...] | None = None
                 ) -> np.ndarray:
        """Values of the function translated by ``shift``, one per state."""
        torus = space.torus
        if torus.dim != self.dim:
            raise GeometryError(f"function is {self.dim}-dimensional, "
                                f"torus is {torus.dim}-dimensional")
        if 2 * self.radius + 1 > torus.side:
            raise GeometryError(
                f"support width {2 * self.radius + 1} exceeds torus side {torus.side}")
        if shift is None:
            shift = (0,) * self.dim
        offs = window_offsets(self.dim, self.radius)
        sites = [torus.site_index(tuple(shift[i] + o[i] for i in range(self.dim)))
                 for o in offs]
        p = (np.int64(1) << np.arange(len(sites), dtype=np.int64))
        wid = space.bits[:, sites].astype(np.int64) @ p
        return self.values[wid]


def occupancy_at_origin() -> LocalFunction:
    """The spin at the origin, eta(0)."""
    return LocalFunction(dim=1, radius=0, values=np.array([0.0, 1.0]))


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GeneratorSet:
    """Dense operator bundle over one enumerated component.

    ``L_env`` generates the environment alone; ``L_jump`` the translations
    induced by the unperturbed walker; ``L_hat`` is the (non-generator)
    perturbation; ``L_ew = L_env + L_jump``; ``L_full = L_ew + L_hat``.
    """

    space: StateSpace
    model: EnvModel
    spec: RateSpec
    L_env: np.ndarray
    L_jump: np.ndarray
    L_hat: np.ndarray
    L_ew: np.ndarray
    L_full: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        return self.space.mu

    @property
    def n_states(self) -> int:
        return self.space.n_states


def _accumulate_translation_part(space: StateSpace, spec: RateSpec,
                                 rates: np.ndarray) -> np.ndarray:
    """Matrix sum_y rates(y, window)[f(translate) - f] over the component."""
    n = space.n_states
    out = np.zeros((n, n))
    wid = space.window_ids(spec)
    rows = np.arange(n)
    for iy, y in enumerate(spec.displacements):
        target = space.translation_rows(y)
        np.add.at(out, (rows, target), rates[iy, wid])
    out[rows, rows] -= out.sum(axis=1)
    return out


def build_generators(model: EnvModel, spec: RateSpec, torus: LatticeTorus,
                     cap: int = DEFAULT_STATE_CAP) -> GeneratorSet:
    """Build all five operators on the component of the all-vacant state."""
    model.validate_torus(torus)
    spec.validate_torus(torus)
    space = StateSpace.enumerate_component(model, torus, cap=cap)
    n = space.n_states

    L_env = np.zeros((n, n))
    for i in range(n):
        for j, _site, rate in space.state_transitions(i):
            L_env[i, j] += rate
    rows = np.arange(n)
    L_env[rows, rows] -= L_env.sum(axis=1)

    L_jump = _accumulate_translation_part(space, spec, spec.base)
    L_hat = _accumulate_translation_part(space, spec, spec.perturb)
    L_ew = L_env + L_jump
    L_full = L_ew + L_hat

    scale = max(np.abs(L_full).max(), 1.0)
    for name, M in (("L_env", L_env), ("L_ew", L_ew), ("L_full", L_full)):
        rs = np.abs(M.sum(axis=1)).max()
        if rs > 1e-12 * scale:
            raise PerturbwalkError(f"{name} row sums deviate from zero: {rs}")
    return GeneratorSet(space=space, model=model, spec=spec, L_env=L_env,
                        L_jump=L_jump, L_hat=L_hat, L_ew=L_ew, L_full=L_full)


# ---------------------------------------------------------------------------
# mu-weighted geometry
# ---------------------------------------------------------------------------

def mu_mean(mu: np.ndarray, f: np.ndarray) -> float:
    return float(mu @ f)


def mu_inner(mu: np.ndarray, f: np.ndarray, g: np.ndarray) -> float:
    return float(mu @ (f * g))


def mu_norm(mu: np.ndarray, f: np.ndarray) -> float:
    return math.sqrt(max(float(mu @ (f * f)), 0.0))


def mu_adjoint(A: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Adjoint in L²(mu): ``A* = D^{-1} Aᵀ D`` with ``D = diag(mu)``."""
    return (A.T * mu[None, :]) / mu[:, None]


def _symmetrized_negative(L: np.ndarray, mu: np.ndarray) -> tuple[np.ndarray, bool]:
    """``D^{1/2} (-K) D^{-1/2}`` with K the mu-self-adjoint part of L.

    Returns the (exactly symmetric) matrix and whether L itself was
    self-adjoint, i.e. whether detailed balance holds.
    """
    B = mu[:, None] * L
    scale = max(np.abs(B).max(), 1.0)
    reversible = bool(np.abs(B - B.T).max() <= 1e-11 * scale)
    K = L if reversible else 0.5 * (L + mu_adjoint(L, mu))
    s = np.sqrt(mu)
    S = -K * (s[:, None] / s[None, :])
    return 0.5 * (S + S.T), reversible


# ---------------------------------------------------------------------------
# Check records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CheckRecord:
    """One verified inequality: ``lhs <= rhs + tolerance``."""

    check_id: str
    paper_anchor: str
    lhs: float
    rhs: float
    passed: bool
    tolerance: float

    def as_dict(self) -> dict:
        return {
            "check_id": self.check_id,
            "paper_anchor": self.paper_anchor,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "pass": self.passed,
            "tolerance": self.tolerance,
        }


def _check(anchor: str, ident: str, lhs: float, rhs: float,
           tol: float) -> CheckRecord:
    lhs = float(lhs)
    rhs = float(rhs)
    return CheckRecord(check_id=ident, paper_anchor=anchor, lhs=lhs, rhs=rhs,
                       passed=bool(lhs <= rhs + tol), tolerance=tol)


@dataclass(frozen=True)
class BoundsReport:
    records: tuple[CheckRecord, ...]
    all_pass: bool
    worst_excess: float

    @staticmethod
    def from_records(records: Sequence[CheckRecord]) -> "BoundsReport":
        worst = max((r.lhs - r.rhs for r in records), default=-math.inf)
        return BoundsReport(records=tuple(records),
                            all_pass=all(r.passed for r in records),
                            worst_excess=worst)


# ---------------------------------------------------------------------------
# Spectral gap and contraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GapReport:
    gamma: float
    eigenvalues: np.ndarray          # of the symmetrized -L, ascending
    slowest_mode: np.ndarray         # eigenfunction at the gap, mu-norm 1
    reversible: bool
    contraction_ok: bool
    worst_excess: float


def contraction_check(L: np.ndarray, mu: np.ndarray, gamma: float,
                      times: Sequence[float], funcs: np.ndarray,
                      slack: float = INEQ_SLACK) -> tuple[bool, float]:
    """Verify ``|e^{tL} f - mu(f)|_mu <= e^{-gamma t} |f - mu(f)|_mu``.

    ``funcs`` has one function per column.  Returns (all pass, worst
    lhs-rhs excess over the grid).
    """
    F = np.asarray(funcs, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    base = np.sqrt(np.clip(mu @ (F - (mu @ F)) ** 2, 0.0, None))
    worst = -math.inf
    for t in times:
        P = scipy.linalg.expm(float(t) * L)
        PF = P @ F
        lhs = np.sqrt(np.clip(mu @ (PF - (mu @ PF)) ** 2, 0.0, None))
        rhs = math.exp(-gamma * float(t)) * base
        worst = max(worst, float((lhs - rhs).max()))
    return worst <= slack, worst


def spectral_gap(L: np.ndarray, mu: np.ndarray, *,
                 times: Sequence[float] = (0.1, 0.5, 1.0, 2.0, 5.0),
                 n_random: int = 100, seed: int = 0,
                 slack: float = INEQ_SLACK) -> GapReport:
    """Spectral gap of a reversible generator, with the matching
    semigroup contraction verified on a time grid.

    A non-reversible input falls back to the gap of its mu-symmetrized
    part and is flagged via ``reversible=False``.
    """
    S, reversible = _symmetrized_negative(L, mu)
    w, V = scipy.linalg.eigh(S)
    if abs(w[0]) > 1e-8:
        raise AssumptionViolation(
            "conservative-generator",
            f"smallest eigenvalue {w[0]} of -L is not numerically zero")
    gamma = float(w[1])
    s = np.sqrt(mu)
    slowest = V[:, 1] / s
    rng = np.random.default_rng(seed)
    funcs = np.column_stack([slowest] +
                            [rng.standard_normal(len(mu)) for _ in range(n_random)])
    ok, worst = contraction_check(L, mu, gamma, times, funcs, slack)
    return GapReport(gamma=gamma, eigenvalues=w, slowest_mode=slowest,
                     reversible=reversible, contraction_ok=ok, worst_excess=worst)


# ---------------------------------------------------------------------------
# Perturbation norm
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NormReport:
    epsilon: float
    upper_bound: float | None
    within_bound: bool | None


def l2_operator_norm(L_hat: np.ndarray, mu: np.ndarray,
                     spec: RateSpec | None = None,
                     slack: float = INEQ_SLACK) -> NormReport:
    """Operator norm of the perturbation in L²(mu) (largest singular value
    of the similarity-transformed matrix), with the a-priori bound
    ``2 sum_y sup |rhat(y, .)|`` when the rate table is supplied."""
    s = np.sqrt(mu)
    M = L_hat * (s[:, None] / s[None, :])
    svals = scipy.linalg.svdvals(M)
    eps = float(svals[0]) if len(svals) else 0.0
    if spec is None:
        return NormReport(epsilon=eps, upper_bound=None, within_bound=None)
    bound = 2.0 * float(spec.sup_abs_perturb().sum())
    return NormReport(epsilon=eps, upper_bound=bound,
                      within_bound=bool(eps <= bound + slack))


# ---------------------------------------------------------------------------
# Stationary solve
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StationaryReport:
    mu_eps: np.ndarray
    density: np.ndarray              # h = mu_eps / mu
    residual: float                  # max |mu_eps @ L|
    min_weight: float
    tv_to_mu: float
    sup_density_dev: float           # max |h - 1|
    l2_density_dev: float            # |h - 1|_mu
    density_bound: float | None      # eps/(gamma-eps) when supplied
    density_bound_ok: bool | None


def _assert_irreducible(L: np.ndarray) -> None:
    adj = csr_matrix((L > 1e-14).astype(np.int8))
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    if n_comp != 1:
        raise AssumptionViolation(
            "irreducibility",
            f"generator splits into {n_comp} strongly connected classes")


def stationary_solve(L_full: np.ndarray, mu: np.ndarray, *,
                     gamma: float | None = None, epsilon: float | None = None,
                     slack: float = INEQ_SLACK) -> StationaryReport:
    """Unique stationary probability vector of an irreducible generator,
    and its density against the reference measure."""
    _assert_irreducible(L_full)
    n = len(mu)
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = L_full.T
    M[:n, n] = 1.0
    M[n, :n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    sol = np.linalg.solve(M, rhs)
    x = sol[:n]
    x = x / x.sum()
    residual = float(np.abs(x @ L_full).max())
    h = x / mu
    dev = h - 1.0
    bound = None
    bound_ok = None
    if gamma is not None and epsilon is not None and epsilon < gamma:
        bound = epsilon / (gamma - epsilon)
        bound_ok = bool(mu_norm(mu, dev) <= bound + slack)
    return StationaryReport(
        mu_eps=x, density=h, residual=residual, min_weight=float(x.min()),
        tv_to_mu=0.5 * float(np.abs(x - mu).sum()),
        sup_density_dev=float(np.abs(dev).max()),
        l2_density_dev=mu_norm(mu, dev),
        density_bound=bound, density_bound_ok=bound_ok)


# ---------------------------------------------------------------------------
# Density expansion
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExpansionReport:
    """Resolvent expansion of the stationary density around the reference
    measure, with geometric certificates.

    ``terms[n-1]`` is the n-th correction x^(n); ``partials[k]`` is the
    truncated density 1 + sum_{n<=k} x^(n) (so ``partials[0]`` is the
    constant 1).  ``residuals[k] = |partials[k] - h|_mu`` against the
    directly solved density, bounded by ``residual_bounds[k]``.
    """

    gamma: float
    epsilon: float
    terms: tuple[np.ndarray, ...]
    partials: tuple[np.ndarray, ...]
    term_norms: tuple[float, ...]
    term_bounds: tuple[float, ...]          # (eps/gamma)^n
    residuals: tuple[float, ...]
    residual_bounds: tuple[float, ...]      # (eps/gamma)^{k+1} gamma/(gamma-eps)
    h_exact: np.ndarray
    mu_eps: np.ndarray
    velocity_partials: tuple | None = None


def _require_expansion_window(gamma: float, epsilon: float) -> None:
    if not (epsilon < gamma):
        raise AssumptionViolation(
            "perturbation-below-gap",
            f"operator norm {epsilon} must be below the spectral gap {gamma}")


def density_expansion(L_ew: np.ndarray, L_hat: np.ndarray, mu: np.ndarray,
                      k: int, *, gamma: float, epsilon: float) -> ExpansionReport:
    """First ``k`` corrections of the stationary density.

    x^(1) solves ``-L_ew* x = L_hat* 1`` on the mu-mean-zero subspace and
    the recursion ``x^(n+1) = (-L_ew*)^{-1} L_hat* x^(n)`` produces the
    rest; every solve is well posed because ``L_hat* g`` has zero mu-mean
    for any g.
    """
    _require_expansion_window(gamma, epsilon)
    if k < 0:
        raise PerturbwalkError(f"order k must be >= 0, got {k}")
    n = len(mu)
    A = -mu_adjoint(L_ew, mu)
    Bstar = mu_adjoint(L_hat, mu)
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A
    M[:n, n] = 1.0
    M[n, :n] = mu
    lu, piv = scipy.linalg.lu_factor(M)
    rhs = np.zeros(n + 1)

    terms: list[np.ndarray] = []
    x = np.ones(n)
    for _ in range(k):
        b = Bstar @ x
        drift = abs(mu_mean(mu, b))
        if drift > 1e-9 * max(1.0, float(np.abs(b).max())):
            raise PerturbwalkError(
                f"correction source has nonzero mean {drift}; solve ill posed")
        rhs[:n] = b
        x = scipy.linalg.lu_solve((lu, piv), rhs)[:n]
        terms.append(x)

    exact = stationary_solve(L_ew + L_hat, mu)
    partials = [np.ones(n)]
    for t in terms:
        partials.append(partials[-1] + t)
    ratio = epsilon / gamma
    geom = gamma / (gamma - epsilon)
    return ExpansionReport(
        gamma=gamma, epsilon=epsilon,
        terms=tuple(terms), partials=tuple(partials),
        term_norms=tuple(mu_norm(mu, t) for t in terms),
        term_bounds=tuple(ratio ** (i + 1) for i in range(len(terms))),
        residuals=tuple(mu_norm(mu, p - exact.density) for p in partials),
        residual_bounds=tuple(ratio ** (i + 1) * geom for i in range(len(partials))),
        h_exact=exact.density, mu_eps=exact.mu_eps)


# ---------------------------------------------------------------------------
# Iterated semigroup terms (block matrix exponential)
# ---------------------------------------------------------------------------

def dyson_terms_upto(L_ew: np.ndarray, L_hat: np.ndarray, K: int, t: float
                     ) -> list[np.ndarray]:
    """All iterated terms S^(0)(t) ... S^(K)(t) from one block exponential.

    The (K+1)x(K+1) block upper-bidiagonal matrix with ``L_ew`` on the
    diagonal and ``L_hat`` above has, in ``expm(t * B)``, the n-fold
    time-ordered integral as its (0, n) block — so a single exponential
    yields every order at once and no quadrature error enters.
    """
    if K < 0:
        raise PerturbwalkError(f"order must be >= 0, got {K}")
    if t < 0:
        raise PerturbwalkError(f"time must be >= 0, got {t}")
    n = L_ew.shape[0]
    if K == 0:
        return [scipy.linalg.expm(float(t) * L_ew)]
    B = np.zeros(((K + 1) * n, (K + 1) * n))
    for b in range(K + 1):
        B[b * n:(b + 1) * n, b * n:(b + 1) * n] = L_ew
        if b < K:
            B[b * n:(b + 1) * n, (b + 1) * n:(b + 2) * n] = L_hat
    E = scipy.linalg.expm(float(t) * B)
    return [E[0:n, m * n:(m + 1) * n] for m in range(K + 1)]


def dyson_term(L_ew: np.ndarray, L_hat: np.ndarray, n: int, t: float) -> np.ndarray:
    """The n-th iterated perturbation term of the semigroup at time t."""
    return dyson_terms_upto(L_ew, L_hat, n, t)[n]


# ---------------------------------------------------------------------------
# Velocity
# ---------------------------------------------------------------------------

def drift_vectors(gens: GeneratorSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-state drifts (N, d): perturbed ``sum_y y (r + rhat)`` and
    unperturbed ``sum_y y r``."""
    space, spec = gens.space, gens.spec
    wid = space.window_ids(spec)
    ys = np.asarray(spec.displacements, dtype=np.float64)       # (n_disp, d)
    full = (gens.spec.base + gens.spec.perturb)[:, wid]          # (n_disp, N)
    base = gens.spec.base[:, wid]
    return full.T @ ys, base.T @ ys


@dataclass(frozen=True, eq=False)
class VelocityReport:
    """Exact walker velocity and its series approximants.

    ``series[n]`` (n = 0..k) sums the corrections through x^(n+1) on top
    of the unperturbed-measure drift; its distance to the exact value is
    certified by ``tail_bounds[n]`` componentwise.
    """

    v_exact: np.ndarray                    # (d,)
    zeroth: np.ndarray                     # mu(j), (d,)
    corrections: tuple[np.ndarray, ...]    # <x^(m), j>_mu, m = 1..k+1
    series: tuple[np.ndarray, ...]         # length k+1
    deviations: tuple[np.ndarray, ...]     # |v_exact - series[n]|
    tail_bounds: tuple[np.ndarray, ...]
    j_norms: np.ndarray                    # |j_c - mu(j_c)|_mu per component
    expansion: ExpansionReport


def velocity(gens: GeneratorSet, k: int, *, gamma: float, epsilon: float
             ) -> VelocityReport:
    """Velocity of the perturbed walker: stationary average of the local
    drift, exactly and as a certified series.

    ``series[n]`` uses density corrections through order n+1, matching
    the n-th order of the iterated-semigroup representation of the
    stationary mean; the tail bound for ``series[n]`` is
    ``sum_{m>n} (eps/gamma)^{m+1} |j - mu(j)|_mu``.
    """
    _require_expansion_window(gamma, epsilon)
    mu = gens.mu
    j_full, _ = drift_vectors(gens)
    exp = density_expansion(gens.L_ew, gens.L_hat, mu, k + 1,
                            gamma=gamma, epsilon=epsilon)
    v_exact = exp.mu_eps @ j_full
    zeroth = mu @ j_full
    j_cent = j_full - zeroth[None, :]
    j_norms = np.sqrt(np.clip(mu @ j_cent ** 2, 0.0, None))
    corrections = tuple((mu * t) @ j_full for t in exp.terms)
    series = []
    acc = zeroth.copy()
    for m in range(k + 1):
        acc = acc + corrections[m]
        series.append(acc.copy())
    ratio = epsilon / gamma
    geom = gamma / (gamma - epsilon)
    tail = tuple(ratio ** (n + 2) * geom * j_norms for n in range(k + 1))
    devs = tuple(np.abs(v_exact - s) for s in series)
    exp = replace(exp, velocity_partials=tuple(series))
    return VelocityReport(v_exact=v_exact, zeroth=zeroth,
                          corrections=corrections, series=tuple(series),
                          deviations=devs, tail_bounds=tail,
                          j_norms=j_norms, expansion=exp)


def velocity_longtime(gens: GeneratorSet, t: float) -> np.ndarray:
    """Independent route to the velocity: reference-measure average of the
    perturbed semigroup applied to the drift, at a large time."""
    j_full, _ = drift_vectors(gens)
    P = scipy.linalg.expm(float(t) * gens.L_full)
    return gens.mu @ (P @ j_full)


# ---------------------------------------------------------------------------
# Inequality batteries
# ---------------------------------------------------------------------------

def _battery(n_states: int, n_random: int, seed: int,
             extra: Sequence[np.ndarray] = ()) -> np.ndarray:
    rng = np.random.default_rng(seed)
    cols = [np.asarray(f, dtype=np.float64) for f in extra]
    cols.extend(rng.standard_normal(n_states) for _ in range(n_random))
    return np.column_stack(cols)


def semigroup_bounds_check(gens: GeneratorSet, *, gamma: float, epsilon: float,
                           mu_eps: np.ndarray | None = None,
                           times: Sequence[float] = (0.1, 0.5, 1.0, 2.0, 5.0),
                           n_random: int = 100, seed: int = 0,
                           extra_funcs: Sequence[np.ndarray] = (),
                           tolerance: float = INEQ_SLACK) -> BoundsReport:
    """Verify the three relaxation estimates of the perturbed semigroup.

    For every f in the battery and t on the grid:

    * contraction to the running mean at rate gamma - eps,
    * relaxation of the mean to the perturbed stationary mean,
    * contraction in L² of the perturbed measure, sup-norm data.
    """
    _require_expansion_window(gamma, epsilon)
    mu = gens.mu
    if mu_eps is None:
        mu_eps = stationary_solve(gens.L_full, mu).mu_eps
    F = _battery(gens.n_states, n_random, seed, extra_funcs)
    base_mu = np.sqrt(np.clip(mu @ (F - (mu @ F)) ** 2, 0.0, None))
    base_sup = np.abs(F - (mu @ F)).max(axis=0)
    means_eps = mu_eps @ F
    ge = gamma - epsilon
    pref_mean = epsilon / ge
    pref_eps = (gamma / ge) ** 1.5
    records: list[CheckRecord] = []
    for t in times:
        P = scipy.linalg.expm(float(t) * gens.L_full)
        PF = P @ F
        m_t = mu @ PF
        lhs_var = np.sqrt(np.clip(mu @ (PF - m_t) ** 2, 0.0, None))
        lhs_mean = np.abs(m_t - means_eps)
        lhs_eps = np.sqrt(np.clip(mu_eps @ (PF - means_eps) ** 2, 0.0, None))
        decay = math.exp(-ge * t)
        decay_half = math.exp(-ge * t / 2.0)
        for i in range(F.shape[1]):
            records.append(_check(
                "contraction-to-mean", f"contraction-to-mean[t={t},f={i}]",
                lhs_var[i], decay * base_mu[i], tolerance))
            records.append(_check(
                "mean-relaxation", f"mean-relaxation[t={t},f={i}]",
                lhs_mean[i], pref_mean * decay * base_mu[i], tolerance))
            records.append(_check(
                "perturbed-measure-contraction",
                f"perturbed-measure-contraction[t={t},f={i}]",
                lhs_eps[i], pref_eps * decay_half * base_sup[i], tolerance))
    return BoundsReport.from_records(records)


def dyson_bounds_check(gens: GeneratorSet, *, gamma: float, epsilon: float,
                       times: Sequence[float] = (0.5, 1.0, 2.0),
                       orders: Sequence[int] = (1, 2, 3, 4, 5),
                       n_random: int = 20, seed: int = 0,
                       extra_funcs: Sequence[np.ndarray] = (),
                       integral_orders: Sequence[int] = (0, 1),
                       integral_steps: int = 3000,
                       tolerance: float = INEQ_SLACK) -> BoundsReport:
    """Verify the decay estimates of the iterated semigroup terms.

    Covers: the geometric remainder of the truncated expansion of the
    perturbed semigroup; variance decay of each term; decay of the
    perturbation flux through each term; the uniform-in-time bound on the
    mean of each term; and the time-integral of the flux (by high-order
    quadrature on an incremental-exponential grid).
    """
    _require_expansion_window(gamma, epsilon)
    mu = gens.mu
    F = _battery(gens.n_states, n_random, seed, extra_funcs)
    base = np.sqrt(np.clip(mu @ (F - (mu @ F)) ** 2, 0.0, None))
    ratio = epsilon / gamma
    geom = 2.0 * gamma / (gamma - epsilon)
    K = max(orders)
    records: list[CheckRecord] = []
    for t in times:
        terms = dyson_terms_upto(gens.L_ew, gens.L_hat, K, t)
        full = scipy.linalg.expm(float(t) * gens.L_full)
        applied = [T @ F for T in terms]
        fullF = full @ F
        for k in sorted(orders):
            partial = sum(terms[:k], start=np.zeros_like(full))
            diff = fullF - partial @ F
            lhs = np.sqrt(np.clip(mu @ diff ** 2, 0.0, None))
            rhs = ratio ** k * geom * base
            for i in range(F.shape[1]):
                records.append(_check(
                    "truncation-remainder",
                    f"truncation-remainder[t={t},k={k},f={i}]",
                    lhs[i], rhs[i], tolerance))
        for nn in sorted(orders):
            g = applied[nn - 1]                  # n-th term applied, n >= 1
            mg = mu @ g
            lhs_var = np.sqrt(np.clip(mu @ (g - mg) ** 2, 0.0, None))
            lhs_flux = np.abs(mu @ (gens.L_hat @ g))
            amp = math.exp(-gamma * t) * (epsilon * t) ** (nn - 1) / math.factorial(nn - 1)
            lhs_mean = np.abs(mu @ applied[nn]) if nn < len(applied) else None
            for i in range(F.shape[1]):
                records.append(_check(
                    "term-variance-decay",
                    f"term-variance-decay[t={t},n={nn},f={i}]",
                    lhs_var[i], amp * base[i], tolerance))
                records.append(_check(
                    "flux-decay", f"flux-decay[t={t},n={nn},f={i}]",
                    lhs_flux[i], epsilon * amp * base[i], tolerance))
                if lhs_mean is not None:
                    records.append(_check(
                        "term-mean-bound",
                        f"term-mean-bound[t={t},n={nn},f={i}]",
                        lhs_mean[i], ratio ** nn * base[i], tolerance))
    for nn in integral_orders:
        lhs = _flux_time_integral(gens, nn, gamma, F, steps=integral_steps)
        rhs = ratio ** (nn + 1) * base
        for i in range(F.shape[1]):
            records.append(_check(
                "flux-time-integral", f"flux-time-integral[n={nn},f={i}]",
                lhs[i], rhs[i], tolerance))
    return BoundsReport.from_records(records)


def _flux_time_integral(gens: GeneratorSet, n: int, gamma: float,
                        F: np.ndarray, steps: int = 3000) -> np.ndarray:
    """``int_0^inf |mu(L_hat S^(n)(s) f)| ds`` per battery column, by
    composite quadrature on a uniform grid walked with one fixed-step
    matrix exponential."""
    N = gens.n_states
    horizon = (60.0 + 5.0 * n) / gamma
    if steps % 2:
        steps += 1
    h = horizon / steps
    m = F.shape[1]
    if n == 0:
        E = scipy.linalg.expm(h * gens.L_ew)
        Y = F.copy()
        top = lambda Y: Y
        step = lambda Y: E @ Y
    else:
        B = np.zeros(((n + 1) * N, (n + 1) * N))
        for b in range(n + 1):
            B[b * N:(b + 1) * N, b * N:(b + 1) * N] = gens.L_ew
            if b < n:
                B[b * N:(b + 1) * N, (b + 1) * N:(b + 2) * N] = gens.L_hat
        E = scipy.linalg.expm(h * B)
        Y = np.zeros(((n + 1) * N, m))
        Y[n * N:, :] = F
        top = lambda Y: Y[:N, :]
        step = lambda Y: E @ Y
    w = gens.mu @ gens.L_hat                     # row functional mu(L_hat .)
    samples = np.empty((steps + 1, m))
    samples[0] = np.abs(w @ top(Y))
    for s in range(1, steps + 1):
        Y = step(Y)
        samples[s] = np.abs(w @ top(Y))
    return simpson(samples, dx=h, axis=0)


# ---------------------------------------------------------------------------
# Spatial decay profile
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DecayProfile:
    """Deviation of translated local averages under the perturbed measure.

    ``entries`` maps each torus shift to ``mu_eps(f shifted) - mu(f)``;
    ``shell_env[m]`` is the largest absolute entry at torus distance m,
    and (theta_hat, r2) is the log-linear fit of that envelope over
    distances up to ``fit_max_distance``.
    """

    shifts: tuple[tuple[int, ...], ...]
    distances: np.ndarray
    values: np.ndarray
    shell_distances: np.ndarray
    shell_env: np.ndarray
    theta_hat: float
    r2: float
    fit_min_distance: int
    fit_max_distance: int
    floor: float


def decay_profile(space: StateSpace, mu_eps: np.ndarray, f_local: LocalFunction,
                  floor: float = 1e-15, min_distance: int = 1) -> DecayProfile:
    """Exact decay table of ``mu_eps(f at x) - mu(f)`` over all shifts x."""
    torus = space.torus
    L, d = torus.side, torus.dim
    if 2 * f_local.radius + 1 > L:
        raise GeometryError(
            f"local support width {2 * f_local.radius + 1} exceeds torus side {L}")
    ref = float(space.mu @ f_local.evaluate(space))
    shifts, dists, vals = [], [], []
    for x in itertools.product(range(L), repeat=d):
        v = float(mu_eps @ f_local.evaluate(space, x)) - ref
        shifts.append(x)
        dists.append(max(min(c, L - c) for c in x) if d else 0)
        vals.append(v)
    dists = np.asarray(dists)
    vals = np.asarray(vals)
    shell_d = np.unique(dists)
    shell_env = np.array([np.abs(vals[dists == m]).max() for m in shell_d])
    fit_max = L // 2 - f_local.radius
    # the on-site entry mixes in a separate local mechanism; the decay law
    # concerns separated shifts, so the fit starts at min_distance
    mask = (shell_d >= min_distance) & (shell_d <= fit_max) & (shell_env >= floor)
    theta_hat, r2 = math.nan, math.nan
    if mask.sum() >= 2:
        xs = shell_d[mask].astype(np.float64)
        ys = np.log(shell_env[mask])
        slope, intercept = np.polyfit(xs, ys, 1)
        pred = slope * xs + intercept
        ss_res = float(((ys - pred) ** 2).sum())
        ss_tot = float(((ys - ys.mean()) ** 2).sum())
        theta_hat = -float(slope)
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return DecayProfile(
        shifts=tuple(shifts), distances=dists, values=vals,
        shell_distances=shell_d, shell_env=shell_env,
        theta_hat=theta_hat, r2=r2, fit_min_distance=min_distance,
        fit_max_distance=fit_max, floor=floor)


# ---------------------------------------------------------------------------
# Diffusivity
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiffusionReport:
    value: float
    minimizer: np.ndarray
    plugin_bound: float              # quadratic form at f = 0
    positivity_bound: float | None   # certified lower bound when gamma given
    beta_star: float | None
    rate_sup_sum: float
    direction: np.ndarray


def _check_jump_symmetry(gens: GeneratorSet) -> None:
    """Require r(y, eta) = r(-y, translate(eta, y)) on every state."""
    space, spec = gens.space, gens.spec
    wid = space.window_ids(spec)
    for iy, y in enumerate(spec.displacements):
        neg = tuple(-c for c in y)
        try:
            ineg = spec.displacement_index(neg)
        except Exception as exc:
            raise AssumptionViolation(
                "symmetric-base-rates",
                f"displacement {neg} missing from the rate table") from exc
        rows = space.translation_rows(y)
        lhs = spec.base[iy, wid]
        rhs = spec.base[ineg, wid[rows]]
        if np.abs(lhs - rhs).max() > 1e-12:
            raise AssumptionViolation(
                "symmetric-base-rates",
                f"base rates break the y <-> -y translation symmetry at y={y}")


def diffusion_variational(gens: GeneratorSet, e: np.ndarray | None = None, *,
                          gamma: float | None = None) -> DiffusionReport:
    """Exact minimum of the variational form for the unperturbed walker's
    diffusivity in direction ``e`` (a lower bound on the variance growth
    rate; the quadratic form is minimized over all functions of the
    component, which contains every local function).

    With the environment gap supplied, also returns the certified
    positivity bound obtained by trading the gradient terms against the
    gap: ``value >= (beta*/2) sum_y mu(r(y, .)) (y.e)^2`` with
    ``beta* = gamma / (gamma + 2 sum_y sup r(y, .))``.
    """
    _check_jump_symmetry(gens)
    space, spec = gens.space, gens.spec
    mu = space.mu
    n = space.n_states
    d = spec.dim
    if e is None:
        e = np.zeros(d)
        e[0] = 1.0
    e = np.asarray(e, dtype=np.float64)
    wid = space.window_ids(spec)
    rows = np.arange(n)

    A = -2.0 * (mu[:, None] * gens.L_env)
    A = 0.5 * (A + A.T)
    b = np.zeros(n)
    c = 0.0
    sup_sum = 0.0
    for iy, y in enumerate(spec.displacements):
        a = float(np.asarray(y, dtype=np.float64) @ e)
        r = spec.base[iy, wid]
        sup_sum += float(r.max())
        target = space.translation_rows(y)
        w = mu * r
        c += float((w * a * a).sum())
        # quadratic part: w (f[target] - f)^2
        np.add.at(A, (rows, rows), w)
        np.add.at(A, (target, target), w)
        np.add.at(A, (rows, target), -w)
        np.add.at(A, (target, rows), -w)
        # linear part: 2 w a (f[target] - f)  -> gradient contribution
        np.add.at(b, target, w * a)
        np.add.at(b, rows, -w * a)
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A
    M[:n, n] = 1.0
    M[n, :n] = mu
    rhs = np.zeros(n + 1)
    rhs[:n] = -b
    fstar = np.linalg.solve(M, rhs)[:n]
    value = 0.5 * (c + float(b @ fstar))
    plugin = 0.5 * c
    beta_star = None
    lb = None
    if gamma is not None and gamma > 0 and sup_sum > 0:
        beta_star = gamma / (gamma + 2.0 * sup_sum)
        lb = 0.5 * beta_star * c
    return DiffusionReport(value=value, minimizer=fstar, plugin_bound=plugin,
                           positivity_bound=lb, beta_star=beta_star,
                           rate_sup_sum=sup_sum, direction=e)


@dataclass(frozen=True, eq=False)
class DiffusionExactReport:
    value: float
    corrector: np.ndarray
    velocity: float
    direction: np.ndarray


def diffusion_exact(gens: GeneratorSet, e: np.ndarray | None = None, *,
                    mu_eps: np.ndarray | None = None) -> DiffusionExactReport:
    """Variance growth rate of the drift-compensated perturbed walker in
    direction ``e``, from the corrector (Poisson-equation) construction.

    With corrector g solving ``L_full g = -(j.e - v)``, the compensated
    position is a martingale whose stationary quadratic-variation rate

        sum_flips rate [grad g]^2 + sum_y (r + rhat) [y.e + grad_y g]^2

    averaged under the perturbed stationary measure equals the limiting
    ``Var(X_t . e)/t``.  For a symmetric unperturbed walker this equals
    exactly twice the variational value (the half-convention of the
    variational form)."""
    space, spec = gens.space, gens.spec
    n = space.n_states
    d = spec.dim
    if e is None:
        e = np.zeros(d)
        e[0] = 1.0
    e = np.asarray(e, dtype=np.float64)
    mu = space.mu
    if mu_eps is None:
        mu_eps = stationary_solve(gens.L_full, mu).mu_eps
    j_full, _ = drift_vectors(gens)
    je = j_full @ e
    v = float(mu_eps @ je)
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = gens.L_full
    M[:n, n] = 1.0
    M[n, :n] = mu_eps
    rhs = np.zeros(n + 1)
    rhs[:n] = -(je - v)
    g = np.linalg.solve(M, rhs)[:n]

    qv = np.zeros(n)
    for i in range(n):
        for jrow, _site, rate in space.state_transitions(i):
            dg = g[jrow] - g[i]
            qv[i] += rate * dg * dg
    wid = space.window_ids(spec)
    for iy, y in enumerate(spec.displacements):
        a = float(np.asarray(y, dtype=np.float64) @ e)
        target = space.translation_rows(y)
        r_eps = (spec.base + spec.perturb)[iy, wid]
        incr = a + g[target] - g
        qv += r_eps * incr * incr
    return DiffusionExactReport(value=float(mu_eps @ qv), corrector=g,
                                velocity=v, direction=e)
