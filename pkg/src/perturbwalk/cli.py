"""Experiment runner: config parsing, subcommand dispatch, artifact output.

Four subcommands share one declarative TOML configuration:

* ``oracle``   — exact finite-state pipeline: gap, perturbation norm,
  stationary law, expansion, velocity series, diffusion, decay profile,
  and the full inequality check batteries.
* ``simulate`` — Monte Carlo only: coupled paths, velocity estimators,
  diffusion, scaling diagnostics, decoupling statistics.
* ``compare``  — both, on the same torus, with cross checks (Monte Carlo
  against exact values within three standard errors).
* ``sweep``    — oracle (optionally + Monte Carlo) over a grid of
  perturbation strengths; results as one CSV row per strength.

Exit codes: 0 all checks pass; 1 a numerical inequality check failed;
2 configuration problem; 3 a named modelling assumption is violated.
All physical parameters must be present in the file — there are no
silent physical defaults.  Outputs are deterministic functions of
(config, seed): no timestamps, sorted JSON keys, fixed column orders.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:                       # Python < 3.11
    import tomli as tomllib

import click
import numpy as np
import scipy

from . import __version__, estimators, oracle
from .coupling_sim import build_layout
from .env_models import (EnvModel, LatticeTorus, RateSpec, SpinConfig,
                         decoupled_walk, driven_probe, interface_walk)
from .errors import AssumptionViolation, CheckFailure, ConfigError

SCHEMA_VERSION = 1
MODES = ("oracle", "simulate", "compare", "sweep")

__all__ = ["main", "run", "load_config", "SCHEMA_VERSION"]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _line_of(text: str, section: str, key: str | None = None) -> int:
    """Best-effort line number of ``key`` inside ``[section]`` (else the
    section header, else 1) so config errors point into the file."""
    lines = text.splitlines()
    sec_line = 0
    in_sec = False
    for i, raw in enumerate(lines, start=1):
        s = raw.strip()
        if s.startswith("["):
            name = s.strip("[]").strip()
            if in_sec:                    # left the section without a hit
                break
            in_sec = (name == section)
            if in_sec:
                sec_line = i
        elif in_sec and key and s.split("=")[0].strip() == key:
            return i
    return sec_line or 1


class _Section:
    """Typed accessor over one TOML table with line-anchored errors."""

    def __init__(self, path: str, text: str, data: dict, name: str):
        self.path, self.text, self.data, self.name = path, text, data, name

    def _fail(self, key: str | None, msg: str):
        line = _line_of(self.text, self.name, key)
        where = f"[{self.name}]" + (f".{key}" if key else "")
        raise ConfigError(f"{self.path}:{line}: {where}: {msg}")

    def require(self, key: str, kinds, what: str):
        if key not in self.data:
            self._fail(key, f"missing required {what}")
        val = self.data[key]
        if not isinstance(val, kinds) or isinstance(val, bool) and kinds is not bool:
            self._fail(key, f"expected {what}, got {type(val).__name__}")
        return val

    def optional(self, key: str, kinds, default):
        if key not in self.data:
            return default
        val = self.data[key]
        if not isinstance(val, kinds) or isinstance(val, bool) and kinds is not bool:
            self._fail(key, f"bad value of type {type(val).__name__}")
        return val

    def reject_unknown(self, allowed: set[str]):
        for key in self.data:
            if key not in allowed:
                self._fail(key, "unknown key")


_NUM = (int, float)


def load_config(path: str | Path) -> dict:
    """Parse and validate the experiment file into plain python values."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML parse error: {exc}") from exc

    known = {"model", "rates", "run", "sweep", "oracle", "simulate"}
    for name in data:
        if name not in known:
            raise ConfigError(
                f"{path}:{_line_of(text, name)}: unknown section [{name}]")

    def section(name: str, required: bool = True) -> _Section:
        tab = data.get(name)
        if tab is None:
            if required:
                raise ConfigError(
                    f"{path}:1: missing required section [{name}]")
            tab = {}
        elif not isinstance(tab, dict):
            raise ConfigError(
                f"{path}:{_line_of(text, name)}: [{name}] must be a table")
        return _Section(str(path), text, tab, name)

    model = section("model")
    model.reject_unknown({"kind", "rho", "dim", "side", "j"})
    kind = model.require("kind", str, "environment kind string")
    if kind not in ("independent_flip", "east", "fa_jf"):
        model._fail("kind", f"unknown environment kind {kind!r}")
    rho = float(model.require("rho", _NUM, "occupation density"))
    dim = model.require("dim", int, "lattice dimension")
    side = model.require("side", int, "torus side length")
    j = model.optional("j", int, None)
    if kind == "fa_jf" and j is None:
        model._fail("j", "missing required facilitation parameter for fa_jf")

    rates = section("rates")
    rates.reject_unknown({"family", "strength", "rate"})
    family = rates.require("family", str, "walk family string")
    if family == "interface":
        strength = float(rates.require("strength", _NUM, "perturbation strength"))
    elif family == "driven":
        strength = float(rates.require("strength", _NUM, "drive strength"))
    elif family == "decoupled":
        strength = float(rates.require("rate", _NUM, "jump rate"))
    else:
        rates._fail("family", f"unknown walk family {family!r}")

    run = section("run")
    run.reject_unknown({"mode", "seed", "tolerance", "expansion_order",
                        "horizon", "replicas", "burn_in", "out", "state_cap",
                        "check_functions"})
    cfg = {
        "path": str(path),
        "model": {"kind": kind, "rho": rho, "dim": dim, "side": side, "j": j},
        "rates": {"family": family, "strength": strength},
        "run": {
            "mode": run.optional("mode", str, None),
            "seed": run.require("seed", int, "master seed"),
            "tolerance": float(run.require("tolerance", _NUM, "check tolerance")),
            "expansion_order": run.optional("expansion_order", int, None),
            "horizon": run.optional("horizon", _NUM, None),
            "replicas": run.optional("replicas", int, None),
            "burn_in": run.optional("burn_in", _NUM, None),
            "out": run.optional("out", str, "."),
            "state_cap": run.optional("state_cap", int, oracle.DEFAULT_STATE_CAP),
            "check_functions": run.optional("check_functions", int, 100),
        },
    }

    sweep = section("sweep", required=False)
    sweep.reject_unknown({"strengths", "replicas"})
    if sweep.data:
        strengths = sweep.require("strengths", list, "strength grid")
        if not strengths or not all(isinstance(s, _NUM) for s in strengths):
            sweep._fail("strengths", "must be a non-empty list of numbers")
        cfg["sweep"] = {"strengths": [float(s) for s in strengths],
                        "replicas": sweep.optional("replicas", int, 0)}

    for block in ("oracle", "simulate"):
        over = section(block, required=False)
        over.reject_unknown({"side"})
        if over.data:
            cfg[block] = {"side": over.require("side", int, "torus side length")}

    # per-mode completeness checks happen in run() once the mode is known
    cfg["_text"] = text
    return cfg


def _need(cfg: dict, key: str, mode: str):
    if cfg["run"][key] is None:
        line = _line_of(cfg["_text"], "run", key)
        raise ConfigError(
            f"{cfg['path']}:{line}: [run].{key}: required for mode {mode!r}")
    return cfg["run"][key]


def _build_system(cfg: dict, side: int):
    m = cfg["model"]
    model = (EnvModel(kind=m["kind"], rho=m["rho"], j=m["j"])
             if m["j"] is not None else EnvModel(kind=m["kind"], rho=m["rho"]))
    torus = LatticeTorus(dim=m["dim"], side=side)
    spec = _build_spec(cfg["rates"]["family"], cfg["rates"]["strength"], m["dim"])
    return model, torus, spec


def _build_spec(family: str, strength: float, dim: int) -> RateSpec:
    if family == "interface":
        return interface_walk(strength)
    if family == "driven":
        return driven_probe(strength)
    return decoupled_walk(rate=strength, dim=dim)


def _side_for(cfg: dict, block: str) -> int:
    return cfg.get(block, {}).get("side", cfg["model"]["side"])


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else v for v in row])


def _manifest(cfg: dict, mode: str, seed: int, threads: int) -> dict:
    echo = {k: v for k, v in cfg.items() if not k.startswith("_") and k != "path"}
    return {
        "schema_version": SCHEMA_VERSION,
        "command": mode,
        "config": echo,
        "config_sha256": hashlib.sha256(cfg["_text"].encode()).hexdigest(),
        "seed": seed,
        "threads": threads,
        "versions": {
            "package": __version__,
            "python": ".".join(map(str, sys.version_info[:3])),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }


def _vec(x) -> list[float]:
    return [float(v) for v in np.atleast_1d(np.asarray(x, dtype=np.float64))]


def _check(anchor: str, ident: str, lhs: float, rhs: float,
           tol: float) -> oracle.CheckRecord:
    return oracle.CheckRecord(check_id=ident, paper_anchor=anchor,
                              lhs=float(lhs), rhs=float(rhs),
                              passed=bool(lhs <= rhs + tol), tolerance=tol)


def _finish(out: Path, records: list, manifest: dict) -> None:
    """Write shared artifacts; raise on the first failing hard check."""
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "checks.json", [r.as_dict() for r in records])
    bad = [r for r in records if not r.passed]
    if bad:
        worst = bad[0]
        raise CheckFailure(worst.check_id,
                           f"{worst.paper_anchor}: lhs={worst.lhs!r} > "
                           f"rhs={worst.rhs!r} (tolerance {worst.tolerance!r}); "
                           f"{len(bad)} of {len(records)} checks failed")


# ---------------------------------------------------------------------------
# Mode pipelines
# ---------------------------------------------------------------------------

def _oracle_core(cfg: dict, side: int, k: int, tol: float):
    """Shared exact pipeline: generators, gap, norm, stationary, velocity."""
    model, torus, spec = _build_system(cfg, side)
    gens = oracle.build_generators(model, spec, torus, cap=cfg["run"]["state_cap"])
    gap = oracle.spectral_gap(gens.L_env, gens.mu)
    norm = oracle.l2_operator_norm(gens.L_hat, gens.mu, spec)
    if norm.epsilon >= gap.gamma:
        raise AssumptionViolation(
            "perturbation-below-gap",
            f"perturbation norm {norm.epsilon:.6g} is not below the "
            f"environment gap {gap.gamma:.6g}")
    st = oracle.stationary_solve(gens.L_full, gens.mu,
                                 gamma=gap.gamma, epsilon=norm.epsilon)
    vel = oracle.velocity(gens, k, gamma=gap.gamma, epsilon=norm.epsilon)
    return model, torus, spec, gens, gap, norm, st, vel


def _velocity_records(vel, tol: float) -> list:
    recs = []
    for n, (dev, bound) in enumerate(zip(vel.deviations, vel.tail_bounds)):
        lhs = float(np.max(dev))
        rhs = float(np.min(bound)) if np.ndim(bound) else float(bound)
        recs.append(_check("velocity-series-tail", f"velocity-series-tail[k={n}]",
                           lhs, rhs, tol))
    return recs


def _diffusion_section(gens, gap, st, tol: float):
    """Exact diffusion values plus their records; None parts when the
    base rates are asymmetric (the variational form needs symmetry)."""
    recs = []
    info: dict = {}
    try:
        var = oracle.diffusion_variational(gens, gamma=gap.gamma)
    except AssumptionViolation:
        var = None
    exact = oracle.diffusion_exact(gens, mu_eps=st.mu_eps)
    info["exact"] = exact.value
    if var is not None:
        info.update(variational=var.value, plugin_bound=var.plugin_bound,
                    positivity_bound=var.positivity_bound, beta_star=var.beta_star)
        recs.append(_check("diffusion-positivity", "diffusion-positivity",
                           var.positivity_bound, var.value, tol))
        recs.append(_check("diffusion-variational-vs-plugin",
                           "diffusion-variational-vs-plugin",
                           var.value, var.plugin_bound, tol))
    return info, recs


def _run_oracle(cfg: dict, out: Path, seed: int, threads: int) -> None:
    tol = cfg["run"]["tolerance"]
    k = _need(cfg, "expansion_order", "oracle")
    side = _side_for(cfg, "oracle")
    model, torus, spec, gens, gap, norm, st, vel = _oracle_core(cfg, side, k, tol)
    n_funcs = cfg["run"]["check_functions"]

    records = list(oracle.semigroup_bounds_check(
        gens, gamma=gap.gamma, epsilon=norm.epsilon, mu_eps=st.mu_eps,
        n_random=n_funcs, seed=seed, tolerance=tol).records)
    records += list(oracle.dyson_bounds_check(
        gens, gamma=gap.gamma, epsilon=norm.epsilon,
        n_random=max(n_funcs // 5, 5), seed=seed, tolerance=tol).records)
    records += _velocity_records(vel, tol)
    if st.density_bound is not None:
        records.append(_check("stationary-density-bound",
                              "stationary-density-bound",
                              st.sup_density_dev, st.density_bound, tol))
    diff_info, diff_recs = _diffusion_section(gens, gap, st, tol)
    records += diff_recs

    decay = oracle.decay_profile(gens.space, st.mu_eps, oracle.occupancy_at_origin())
    _write_csv(out / "decay.csv", ["distance", "envelope"],
               [[int(d), float(v)] for d, v in
                zip(decay.shell_distances, decay.shell_env)])

    summary = {
        "gamma": gap.gamma,
        "gamma_reversible": gap.reversible,
        "epsilon": norm.epsilon,
        "epsilon_upper_bound": norm.upper_bound,
        "n_states": gens.n_states,
        "stationary": {"tv_to_unperturbed": st.tv_to_mu,
                       "sup_density_dev": st.sup_density_dev,
                       "residual": st.residual,
                       "min_weight": st.min_weight},
        "v_exact": _vec(vel.v_exact),
        "v_series": [_vec(s) for s in vel.series],
        "v_tail_bounds": [_vec(b) for b in vel.tail_bounds],
        "diffusion": diff_info,
        "decay": {"theta_hat": decay.theta_hat, "r2": decay.r2,
                  "fit_min_distance": decay.fit_min_distance},
    }
    _write_json(out / "oracle.json", summary)
    _finish(out, records, _manifest(cfg, "oracle", seed, threads))


def _simulate_paths(cfg: dict, side: int, seed: int, threads: int):
    model, torus, spec = _build_system(cfg, side)
    layout = build_layout(spec)
    eta0 = SpinConfig.from_index(torus, 0)
    horizon = float(_need(cfg, "horizon", "simulate"))
    n_rep = _need(cfg, "replicas", "simulate")
    paths = estimators.run_replicas(model, spec, layout, eta0, horizon,
                                    seed, n_rep, threads=threads)
    return model, torus, spec, layout, paths


def _separation_stats(paths, spec: RateSpec, tol: float):
    """Fraction of replicas whose copies decouple within one time unit,
    against the exact per-unit-time intensity bound sup over windows of
    the summed absolute rate perturbation."""
    seps = np.array([p.separation_time for p in paths])
    n = len(paths)
    p_hat = float(np.mean(seps <= 1.0))
    se = math.sqrt(max(p_hat * (1 - p_hat), 1e-12) / n)
    c_eps = float(np.max(np.abs(spec.perturb).sum(axis=0)))
    rec = _check("decoupling-rate-bound", "decoupling-rate-bound",
                 p_hat - 3.0 * se, c_eps, tol)
    stats = {"fraction_decoupled_by_1": p_hat, "se": se, "bound": c_eps,
             "fraction_decoupled_by_horizon": float(np.mean(np.isfinite(seps))),
             "mean_separation_time": (float(seps[np.isfinite(seps)].mean())
                                      if np.isfinite(seps).any() else None)}
    return stats, rec


def _dump_paths(out: Path, paths, dim: int) -> None:
    cols = (["replica"] + [f"x_perturbed_{i}" for i in range(dim)]
            + [f"x_base_{i}" for i in range(dim)]
            + ["n_clock_events", "n_env_events", "separation_time"])
    rows = []
    for r, p in enumerate(paths):
        rows.append([r, *map(int, p.final_position("perturbed")),
                     *map(int, p.final_position("unperturbed")),
                     len(p.clock_times), p.env.n_events,
                     p.separation_time if math.isfinite(p.separation_time) else None])
    _write_csv(out / "paths.csv", cols, rows)


def _run_simulate(cfg: dict, out: Path, seed: int, threads: int,
                  dump_paths: bool) -> None:
    tol = cfg["run"]["tolerance"]
    side = _side_for(cfg, "simulate")
    burn = float(_need(cfg, "burn_in", "simulate"))
    model, torus, spec, layout, paths = _simulate_paths(cfg, side, seed, threads)
    horizon = paths[0].horizon

    v_plain = estimators.estimate_velocity(paths, burn_in=burn)
    v_mart = estimators.estimate_velocity_mart(paths, spec, burn_in=burn)
    diff = estimators.estimate_diffusion(paths, v_mart.estimate)
    fclt = None
    if len(paths) >= 200:
        fclt = estimators.fclt_diagnostics(paths, v_mart.estimate)
    sep_stats, sep_rec = _separation_stats(paths, spec, tol)
    records = [sep_rec] if horizon >= 1.0 else []
    agree = _check(
        "estimator-agreement", "estimator-agreement",
        float(np.max(np.abs(v_plain.estimate - v_mart.estimate))),
        3.0 * float(np.max(np.hypot(v_plain.stderr, v_mart.stderr))), tol)
    records.append(agree)

    summary = {
        "replicas": len(paths),
        "horizon": horizon,
        "burn_in": burn,
        "velocity_lln": {"estimate": _vec(v_plain.estimate),
                         "se": _vec(v_plain.stderr)},
        "velocity_compensated": {"estimate": _vec(v_mart.estimate),
                                 "se": _vec(v_mart.stderr),
                                 "variance_ratio":
                                     _vec(v_mart.details["variance_ratio"])},
        "diffusion": {"estimate": _jsonable(np.atleast_2d(diff.estimate)),
                      "se": _jsonable(np.atleast_2d(diff.stderr))},
        "separation": sep_stats,
        "fclt": None if fclt is None else {
            "var_r2": fclt.var_r2, "var_slope": fclt.var_slope,
            "var_intercept": fclt.var_intercept,
            "normality_stat": fclt.normality_stat,
            "normality_pvalue": fclt.normality_pvalue,
            "degenerate": fclt.degenerate},
    }
    _write_json(out / "simulate.json", summary)
    if dump_paths:
        _dump_paths(out, paths, torus.dim)
    _finish(out, records, _manifest(cfg, "simulate", seed, threads))


def _run_compare(cfg: dict, out: Path, seed: int, threads: int,
                 dump_paths: bool) -> None:
    tol = cfg["run"]["tolerance"]
    side_o = _side_for(cfg, "oracle")
    side_s = _side_for(cfg, "simulate")
    if side_o != side_s:
        line = _line_of(cfg["_text"], "simulate", "side")
        raise ConfigError(
            f"{cfg['path']}:{line}: compare mode needs matching tori: "
            f"oracle side {side_o} != simulate side {side_s}")
    k = _need(cfg, "expansion_order", "compare")
    model, torus, spec, gens, gap, norm, st, vel = _oracle_core(
        cfg, side_o, k, tol)

    _, _, _, layout, paths = _simulate_paths(cfg, side_s, seed, threads)
    burn = (float(cfg["run"]["burn_in"]) if cfg["run"]["burn_in"] is not None
            else estimators.default_burn_in(gap.gamma))
    horizon = paths[0].horizon
    if horizon <= burn:
        raise ConfigError(
            f"{cfg['path']}:{_line_of(cfg['_text'], 'run', 'horizon')}: "
            f"[run].horizon: horizon {horizon} must exceed burn-in {burn:.3g}")

    v_plain = estimators.estimate_velocity(paths, oracle_value=vel.v_exact,
                                           burn_in=burn)
    v_mart = estimators.estimate_velocity_mart(paths, spec,
                                               oracle_value=vel.v_exact,
                                               burn_in=burn)
    diff = estimators.estimate_diffusion(paths, vel.v_exact)
    occ = estimators.estimate_occupation(paths, gens.space, burn_in=burn,
                                         target=st.mu_eps)
    sep_stats, sep_rec = _separation_stats(paths, spec, tol)

    records = _velocity_records(vel, tol)
    records.append(sep_rec)
    for name, rep in (("lln", v_plain), ("compensated", v_mart)):
        records.append(_check(
            "mc-velocity-vs-exact", f"mc-velocity-vs-exact[{name}]",
            float(np.max(np.abs(rep.estimate - vel.v_exact))),
            3.0 * float(np.max(rep.stderr)), tol))
    diff_info, diff_recs = _diffusion_section(gens, gap, st, tol)
    records += diff_recs
    if "variational" in diff_info and torus.dim == 1:
        records.append(_check(
            "mc-diffusion-lower-bound", "mc-diffusion-lower-bound",
            diff_info["variational"] - 3.0 * float(diff.stderr[0, 0]),
            float(diff.estimate[0, 0]), tol))

    summary = {
        "gamma": gap.gamma,
        "epsilon": norm.epsilon,
        "v_exact": _vec(vel.v_exact),
        "velocity_lln": {"estimate": _vec(v_plain.estimate),
                         "se": _vec(v_plain.stderr),
                         "gap_sigmas": _vec(v_plain.oracle_gap_sigmas)},
        "velocity_compensated": {"estimate": _vec(v_mart.estimate),
                                 "se": _vec(v_mart.stderr),
                                 "gap_sigmas": _vec(v_mart.oracle_gap_sigmas)},
        "diffusion_mc": _jsonable(np.atleast_2d(diff.estimate)),
        "diffusion_exact": diff_info,
        "occupation_tv": occ.tv_to_target,
        "separation": sep_stats,
        "burn_in": burn,
        "replicas": len(paths),
        "horizon": horizon,
    }
    _write_json(out / "compare.json", summary)
    if dump_paths:
        _dump_paths(out, paths, torus.dim)
    _finish(out, records, _manifest(cfg, "compare", seed, threads))


def _run_sweep(cfg: dict, out: Path, seed: int, threads: int) -> None:
    tol = cfg["run"]["tolerance"]
    if "sweep" not in cfg:
        raise ConfigError(f"{cfg['path']}:1: missing required section [sweep]")
    k = _need(cfg, "expansion_order", "sweep")
    strengths = cfg["sweep"]["strengths"]
    n_rep = cfg["sweep"]["replicas"]
    if n_rep > 0:
        _need(cfg, "horizon", "sweep")
    side = _side_for(cfg, "oracle")
    m = cfg["model"]
    model = (EnvModel(kind=m["kind"], rho=m["rho"], j=m["j"])
             if m["j"] is not None else EnvModel(kind=m["kind"], rho=m["rho"]))
    torus = LatticeTorus(dim=m["dim"], side=side)

    records = []
    rows = []
    abs_v = []
    for idx, s in enumerate(strengths):
        spec = _build_spec(cfg["rates"]["family"], s, m["dim"])
        gens = oracle.build_generators(model, spec, torus,
                                       cap=cfg["run"]["state_cap"])
        gap = oracle.spectral_gap(gens.L_env, gens.mu)
        norm = oracle.l2_operator_norm(gens.L_hat, gens.mu, spec)
        if norm.epsilon >= gap.gamma:
            raise AssumptionViolation(
                "perturbation-below-gap",
                f"strength {s}: norm {norm.epsilon:.6g} >= gap {gap.gamma:.6g}")
        vel = oracle.velocity(gens, k, gamma=gap.gamma, epsilon=norm.epsilon)
        dev = float(np.max(vel.deviations[k]))
        bound = float(np.min(vel.tail_bounds[k]))
        records.append(_check("velocity-series-tail",
                              f"velocity-series-tail[strength={s!r}]",
                              dev, bound, tol))
        v_mc = se_mc = None
        if n_rep > 0:
            sub_seed = int(np.random.SeedSequence(
                entropy=seed, spawn_key=(idx,)).generate_state(1)[0])
            layout = build_layout(spec)
            eta0 = SpinConfig.from_index(torus, 0)
            horizon = float(cfg["run"]["horizon"])
            burn = (float(cfg["run"]["burn_in"])
                    if cfg["run"]["burn_in"] is not None
                    else min(estimators.default_burn_in(gap.gamma),
                             horizon / 4.0))
            if horizon <= burn:
                raise ConfigError(
                    f"{cfg['path']}:{_line_of(cfg['_text'], 'run', 'horizon')}:"
                    f" [run].horizon: horizon {horizon} must exceed burn-in"
                    f" {burn:.3g}")
            paths = estimators.run_replicas(
                model, spec, layout, eta0, horizon,
                sub_seed, n_rep, threads=threads)
            rep = estimators.estimate_velocity_mart(paths, spec, burn_in=burn)
            v_mc, se_mc = float(rep.estimate[0]), float(rep.stderr[0])
            records.append(_check(
                "mc-velocity-vs-exact", f"mc-velocity-vs-exact[strength={s!r}]",
                abs(v_mc - float(vel.v_exact[0])), 3.0 * se_mc, tol))
        v0 = float(vel.v_exact[0])
        abs_v.append(abs(v0))
        rows.append([s, norm.epsilon, gap.gamma, v0,
                     float(vel.series[k][0]), v_mc, se_mc])

    _write_csv(out / "sweep.csv",
               ["strength", "epsilon", "gamma", "v_exact", f"v_series_{k}",
                "v_mc", "se_mc"], rows)
    _write_json(out / "sweep.json", {
        "strengths": strengths,
        "abs_velocity": abs_v,
        "abs_velocity_monotone": bool(np.all(np.diff(abs_v) >= -1e-15)),
        "expansion_order": k,
    })
    _finish(out, records, _manifest(cfg, "sweep", seed, threads))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def run(mode: str, cfg: dict, *, out_dir: str | None = None,
        seed: int | None = None, threads: int = 1,
        dump_paths: bool = False) -> None:
    """Execute one subcommand; raises the typed errors the CLI maps to
    exit codes."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    declared = cfg["run"]["mode"]
    if declared is not None and declared != mode:
        line = _line_of(cfg["_text"], "run", "mode")
        raise ConfigError(f"{cfg['path']}:{line}: [run].mode: config declares "
                          f"{declared!r} but the {mode!r} subcommand was invoked")
    eff_seed = cfg["run"]["seed"] if seed is None else seed
    out = Path(out_dir if out_dir is not None else cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    if mode == "oracle":
        _run_oracle(cfg, out, eff_seed, threads)
    elif mode == "simulate":
        _run_simulate(cfg, out, eff_seed, threads, dump_paths)
    elif mode == "compare":
        _run_compare(cfg, out, eff_seed, threads, dump_paths)
    else:
        _run_sweep(cfg, out, eff_seed, threads)


@click.group(name="perturbwalk")
@click.version_option(__version__, prog_name="perturbwalk")
def _group():
    """Exact and Monte Carlo analysis of a random walk driven by a weakly
    perturbed dynamic environment."""


_MODE_HELP = {
    "oracle": "exact finite-state pipeline with inequality check batteries",
    "simulate": "Monte Carlo replicas and estimators, no exact solve",
    "compare": "exact and Monte Carlo on the same torus with cross checks",
    "sweep": "velocity curve over a grid of perturbation strengths",
}


def _make_command(mode: str):
    @click.command(name=mode, help=_MODE_HELP[mode])
    @click.option("--config", "config_path", required=True,
                  type=click.Path(), help="TOML experiment file")
    @click.option("--seed", type=int, default=None,
                  help="override the master seed from the config")
    @click.option("--out", "out_dir", default=None,
                  help="output directory (default from config, else .)")
    @click.option("--threads", type=int, default=1,
                  help="worker processes for replica simulation")
    @click.option("--dump-paths", is_flag=True,
                  help="also write per-replica endpoints to paths.csv")
    def cmd(config_path, seed, out_dir, threads, dump_paths):
        cfg = load_config(config_path)
        run(mode, cfg, out_dir=out_dir, seed=seed, threads=threads,
            dump_paths=dump_paths)
        click.echo("ok")
    return cmd


for _mode in MODES:
    _group.add_command(_make_command(_mode))


def main(argv: list[str] | None = None) -> int:
    try:
        _group.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:          # --help / --version
        return exc.exit_code
    except click.exceptions.Abort:
        return 130
    except click.ClickException as exc:
        exc.show()
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except AssumptionViolation as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return 3
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
