"""Command-line entry point.

Every run writes its column files, JSON reports and a ``manifest.json`` that
echoes the resolved configuration and the sha256 of each output. Passing a
manifest back through ``--config`` repeats the run.

Configuration is layered: defaults, then ``--config``, then ``GRIDPRICE_*``
environment variables, then command-line flags. Unknown keys are rejected at
every layer.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .coordinator import AdmmConfig, CoordinationError, compute_compensation
from .grid import GridLimits, VoltageProfile
from .prosumer import ProsumerError
from .scenario import Scenario, ScenarioError, load_scenario, replica_scenario, write_columns
from .simulation import DayAheadResult, TraceLog, cost_table, run_closed_loop, run_day_ahead

SUBCOMMANDS = ("validate", "dayahead", "mpc", "rt", "full", "rho-sweep", "compare")
ENV_PREFIX = "GRIDPRICE_"
EXIT_RUNTIME = 1
EXIT_INVALID = 2


class ConfigError(ValueError):
    """Bad configuration; ``problems`` lists every one found."""

    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    scenario: str | None = None
    out: str = "out"
    seed: int = 7
    coordinate: bool = True
    rho0: float = 1.0
    max_iter: int = 150
    budget_iters: int | None = None
    tol_abs: float = 1e-5
    tol_rel: float = 1e-4
    rho_min: float = 1e-2
    rho_max: float = 1e2
    rho_points: int = 9
    sweep_iters: int = 80

    def __post_init__(self):
        errs = []
        if self.subcommand not in SUBCOMMANDS:
            errs.append(f"unknown subcommand {self.subcommand!r}")
        for name in ("rho0", "tol_abs", "tol_rel", "rho_min", "rho_max"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be positive")
        for name in ("max_iter", "rho_points", "sweep_iters"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be at least 1")
        if self.budget_iters is not None and self.budget_iters < 1:
            errs.append("budget_iters must be at least 1")
        if self.rho_min > self.rho_max:
            errs.append("rho_min exceeds rho_max")
        if errs:
            raise ConfigError(errs)

    def admm(self) -> AdmmConfig:
        return AdmmConfig(rho0=self.rho0, eps_abs=self.tol_abs, eps_rel=self.tol_rel,
                          max_iter=self.max_iter)

    def rho_grid(self) -> np.ndarray:
        return np.logspace(np.log10(self.rho_min), np.log10(self.rho_max), self.rho_points)


# keys settable from a config file, the environment or flags
_FIELDS = {f.name for f in fields(RunConfig)} - {"subcommand"}
_TYPES = {"scenario": str, "out": str, "seed": int, "coordinate": bool,
          "max_iter": int, "budget_iters": int, "rho_points": int, "sweep_iters": int}


def _coerce(key: str, value):
    kind = _TYPES.get(key, float)
    if value is None:
        return None
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {value!r}")
    if kind is int:
        f = float(value)
        if not f.is_integer():
            raise ValueError(f"{key}: not an integer: {value!r}")
        return int(f)
    return kind(value)


def _layer(values: dict, origin: str) -> tuple[dict, list]:
    out, errs = {}, []
    for k, v in values.items():
        if k not in _FIELDS:
            errs.append(f"unknown {origin} key {k!r}")
            continue
        try:
            out[k] = _coerce(k, v)
        except (TypeError, ValueError) as exc:
            errs.append(f"{origin}: {exc}")
    return out, errs


def env_overrides(environ=None) -> dict:
    """``GRIDPRICE_*`` variables as config keys (``GRIDPRICE_TOL_ABS`` -> ``tol_abs``)."""
    environ = os.environ if environ is None else environ
    out = {}
    for k, v in environ.items():
        if k.startswith(ENV_PREFIX):
            key = k[len(ENV_PREFIX):].lower()
            if key == "no_coordination":
                key, v = "coordinate", not _coerce("coordinate", v)
            out[key] = v
    return out


def resolve_config(subcommand: str, flags: dict, config_file: str | None = None,
                   environ=None) -> RunConfig:
    """Merge the configuration layers, collecting every problem before failing."""
    merged, errs = {}, []
    if config_file is not None:
        try:
            with open(config_file) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read config {config_file}: {exc}"]) from exc
        # a manifest carries the configuration under "config"
        doc = doc.get("config", doc) if isinstance(doc, dict) else doc
        if not isinstance(doc, dict):
            raise ConfigError([f"config {config_file} is not an object"])
        doc = {k: v for k, v in doc.items() if k != "subcommand"}
        vals, e = _layer(doc, "config")
        merged.update(vals)
        errs += e
    vals, e = _layer(env_overrides(environ), "environment")
    merged.update(vals)
    errs += e
    vals, e = _layer({k: v for k, v in flags.items() if v is not None}, "flag")
    merged.update(vals)
    errs += e
    if errs:
        raise ConfigError(errs)
    return RunConfig(subcommand=subcommand, **merged)


# -- outputs -----------------------------------------------------------------

class Outputs:
    """Writes files under one directory and remembers their digests."""

    def __init__(self, root: str):
        self.root = root
        self.files = {}
        os.makedirs(root, exist_ok=True)

    def _path(self, name: str) -> str:
        path = os.path.join(self.root, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def _record(self, name: str, path: str) -> None:
        with open(path, "rb") as fh:
            self.files[name] = hashlib.sha256(fh.read()).hexdigest()

    def columns(self, name: str, cols: dict) -> None:
        path = self._path(name)
        write_columns(path, cols)
        self._record(name, path)

    def json(self, name: str, doc) -> None:
        path = self._path(name)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        self._record(name, path)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def voltage_summary(v: np.ndarray, t_s, limits: GridLimits, q_s=None) -> dict:
    """Counts and extremes of voltage samples outside ``[v_min, v_max]``.

    ``v`` has one row per time in ``t_s``.
    """
    v = np.asarray(v, dtype=float)
    over = v > limits.v_max
    under = v < limits.v_min
    bad = over.any(axis=1) | under.any(axis=1)
    doc = {
        "v_max_limit": limits.v_max,
        "v_min_limit": limits.v_min,
        "v_max": float(v.max()),
        "v_min": float(v.min()),
        "samples_above": int(over.sum()),
        "samples_below": int(under.sum()),
        "max_violation_pu": float(max(np.max(v - limits.v_max), np.max(limits.v_min - v), 0.0)),
        "t_s_violated": [int(t) for t in np.asarray(t_s)[bad]],
    }
    if q_s is not None:
        doc["q_s_max_abs"] = float(np.max(np.abs(q_s)))
    return doc


def _step_times(sc: Scenario) -> np.ndarray:
    return np.arange(sc.timeline.K) * sc.timeline.dt_plan_s


def _profile_summary(sc: Scenario, profile: VoltageProfile, limits: GridLimits) -> dict:
    doc = voltage_summary(profile.v, _step_times(sc), limits, profile.q_s)
    doc["power_flow_diverged"] = int((~np.asarray(profile.converged)).sum())
    return doc


def write_day_ahead(out: Outputs, sc: Scenario, da: DayAheadResult, prefix: str = "") -> None:
    t = _step_times(sc)
    sched = {"t_s": t}
    for n, x, s in zip(sc.names, da.x, da.schedules):
        sched[f"p_{n}"] = x[0::2]
        sched[f"q_{n}"] = x[1::2]
        sched[f"p_b_{n}"] = s.p_b
        sched[f"q_b_{n}"] = s.q_b
        sched[f"p_pv_{n}"] = s.p_pv
        sched[f"soc_end_{n}"] = s.soc[1:]
    out.columns(prefix + "schedules.csv", sched)

    volts = {"t_s": t}
    for j, b in enumerate(sc.network.buses):
        volts[f"v_{b.id}"] = da.profile.v[:, j]
    volts["p_s"] = da.profile.p_s
    volts["q_s"] = da.profile.q_s
    out.columns(prefix + "voltages.csv", volts)

    comp = da.report.compensation if da.report is not None else np.zeros(len(sc.names))
    table = cost_table(sc.names, da.cost_without, da.cost_with)
    table["compensation"] = np.append(comp, comp.sum())
    out.columns(prefix + "costs.csv", table)
    out.json(prefix + "violations.json", _profile_summary(sc, da.profile, sc.network.limits))

    if da.report is None:
        return
    rep = da.report
    hist = rep.trace
    out.columns(prefix + "residuals.csv", {
        "k": np.array([h.k for h in hist], dtype=int),
        "rho": np.array([h.rho for h in hist]),
        "r_max": np.array([h.r_max for h in hist]),
        "s_max": np.array([h.s_max for h in hist]),
        "eps_pri": np.array([h.eps_pri for h in hist]),
        "eps_dual": np.array([h.eps_dual for h in hist]),
        "r_lin": np.array([h.r_lin for h in hist]),
        "relinearized": np.array([int(h.relinearized) for h in hist], dtype=int),
    })
    sig = {"t_s": t}
    for n, s in zip(sc.names, rep.signals):
        h = s.H.diagonal()
        sig[f"g_p_{n}"] = s.g[0::2]
        sig[f"g_q_{n}"] = s.g[1::2]
        sig[f"h_pp_{n}"] = h[0::2]
        sig[f"h_qq_{n}"] = h[1::2]
    out.columns(prefix + "signals.csv", sig)
    out.json(prefix + "report.json", rep.to_dict())


def write_trace(out: Outputs, sc: Scenario, trace: TraceLog, prefix: str = "") -> None:
    out.columns(prefix + "trace.csv", trace.columns())
    out.columns(prefix + "cycles.csv", trace.cycle_columns())
    costs = trace.costs
    out.columns(prefix + "costs.csv", {"prosumer": list(costs) + ["total"],
                                       "cost": np.append(list(costs.values()),
                                                         sum(costs.values()))})
    summary = voltage_summary(trace.array("v"), trace.t_s, sc.network.limits, trace.array("q_s"))
    soc = trace.array("soc")
    summary["soc_min"] = float(soc.min())
    summary["soc_max"] = float(soc.max())
    out.json(prefix + "violations.json", summary)
    out.json(prefix + "events.json", [list(e) for e in trace.events])
    out.json(prefix + "digest.json", {"trace_sha256": trace.digest()})


# -- commands --------------------------------------------------------------------

def load_input(cfg: RunConfig) -> Scenario:
    if cfg.scenario is None:
        return replica_scenario(seed=cfg.seed)
    return load_scenario(cfg.scenario)


def _timeline_budget(sc: Scenario, cfg: RunConfig) -> Scenario:
    if cfg.budget_iters is None:
        return sc
    return replace(sc, timeline=replace(sc.timeline, budget_iters=cfg.budget_iters))


def cmd_validate(cfg: RunConfig, out: Outputs) -> Scenario:
    sc = load_input(cfg)
    out.json("validation.json", {"valid": True, "problems": [], "name": sc.name,
                                 "prosumers": sc.names, "K": sc.timeline.K})
    return sc


def cmd_dayahead(cfg: RunConfig, out: Outputs) -> None:
    sc = load_input(cfg)
    write_day_ahead(out, sc, run_day_ahead(sc, cfg.admm(), cfg.coordinate))


def _closed_loop(cfg: RunConfig, out: Outputs, replan: bool, prefix: str = "",
                 day_ahead: DayAheadResult | None = None) -> TraceLog:
    sc = _timeline_budget(load_input(cfg), cfg)
    trace = run_closed_loop(sc, day_ahead, cfg.admm(), cfg.coordinate, replan=replan)
    write_trace(out, sc, trace, prefix)
    return trace


def cmd_mpc(cfg: RunConfig, out: Outputs) -> None:
    _closed_loop(cfg, out, replan=True)


def cmd_rt(cfg: RunConfig, out: Outputs) -> None:
    _closed_loop(cfg, out, replan=False)


def cmd_full(cfg: RunConfig, out: Outputs) -> None:
    sc = load_input(cfg)
    da = run_day_ahead(sc, cfg.admm(), cfg.coordinate)
    write_day_ahead(out, sc, da, "dayahead/")
    _closed_loop(cfg, out, True, "loop/", da)


def rho_sweep(sc: Scenario, rhos, iterations: int = 80, base: AdmmConfig | None = None) -> dict:
    """Day-ahead coordination at constant penalties, ``iterations`` rounds each.

    ``extra_fees`` is the summed cost increase over the private optima and
    ``max_violation`` the AC-oracle voltage violation of the result, pu.
    """
    base = base or AdmmConfig()
    rows = {"rho": [], "r": [], "s": [], "extra_fees": [], "max_violation": []}
    for rho in rhos:
        cfg = replace(base, rho0=float(rho), adaptive=False, max_iter=iterations,
                      min_iter=iterations)
        da = run_day_ahead(sc, cfg)
        rep = da.report
        rows["rho"].append(float(rho))
        rows["r"].append(rep.r_max)
        rows["s"].append(rep.s_max)
        rows["extra_fees"].append(float(compute_compensation(da.c, da.x, da.x_hat).sum()))
        rows["max_violation"].append(da.profile.max_violation(sc.network.limits))
    return {k: np.array(v) for k, v in rows.items()}


def cmd_rho_sweep(cfg: RunConfig, out: Outputs) -> None:
    sc = load_input(cfg)
    out.columns("rho_sweep.csv", rho_sweep(sc, cfg.rho_grid(), cfg.sweep_iters, cfg.admm()))


def compare_costs(sc: Scenario, config: AdmmConfig | None = None) -> dict:
    """Day-ahead tariff cost per prosumer without and with coordination."""
    off = run_day_ahead(sc, config, coordinate=False)
    on = run_day_ahead(sc, config, coordinate=True)
    table = cost_table(sc.names, off.cost_with, on.cost_with)
    comp = on.report.compensation
    table["compensation"] = np.append(comp, comp.sum())
    return table


def cmd_compare(cfg: RunConfig, out: Outputs) -> None:
    sc = load_input(cfg)
    out.columns("costs.csv", compare_costs(sc, cfg.admm()))


COMMANDS = {
    "validate": cmd_validate,
    "dayahead": cmd_dayahead,
    "mpc": cmd_mpc,
    "rt": cmd_rt,
    "full": cmd_full,
    "rho-sweep": cmd_rho_sweep,
    "compare": cmd_compare,
}


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario json; the replica feeder when omitted")
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="config or manifest json to start from")
    common.add_argument("--seed", type=int, help="replica realization seed")
    common.add_argument("--no-coordination", dest="coordinate", action="store_const",
                        const=False, help="use the private optima")
    common.add_argument("--rho0", type=float)
    common.add_argument("--max-iter", dest="max_iter", type=int, help="day-ahead iteration cap")
    common.add_argument("--budget-iters", dest="budget_iters", type=int,
                        help="iteration cap of each intra-day cycle")
    common.add_argument("--tol-abs", dest="tol_abs", type=float)
    common.add_argument("--tol-rel", dest="tol_rel", type=float)
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="gridprice", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "rho-sweep":
            p.add_argument("--rho-min", dest="rho_min", type=float)
            p.add_argument("--rho-max", dest="rho_max", type=float)
            p.add_argument("--rho-points", dest="rho_points", type=int)
            p.add_argument("--sweep-iters", dest="sweep_iters", type=int)
    return parser


def _fail(out_dir: str | None, code: int, kind: str, message: str, problems=None) -> int:
    doc = {"error": kind, "message": message, "exit_code": code}
    if problems is not None:
        doc["problems"] = list(problems)
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    if out_dir is not None:
        try:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "error.json"), "w") as fh:
                json.dump(doc, fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError:
            pass
    return code


def main(argv=None, environ=None) -> int:
    args = vars(build_parser().parse_args(argv))
    sub = args.pop("subcommand")
    config_file = args.pop("config")
    verbose = args.pop("verbose")
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = args.get("out")
    try:
        cfg = resolve_config(sub, args, config_file, environ)
    except ConfigError as exc:
        return _fail(out_dir, EXIT_INVALID, "invalid_config", str(exc), exc.problems)
    out = Outputs(cfg.out)
    try:
        COMMANDS[cfg.subcommand](cfg, out)
    except ScenarioError as exc:
        return _fail(cfg.out, EXIT_INVALID, "invalid_scenario", str(exc), exc.problems)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(cfg.out, EXIT_INVALID, "unreadable_input", str(exc))
    except (CoordinationError, ProsumerError, ValueError, ArithmeticError) as exc:
        return _fail(cfg.out, EXIT_RUNTIME, "runtime_failure", str(exc))
    out.json("manifest.json", {"config": asdict(cfg), "outputs": dict(sorted(out.files.items()))})
    return 0


if __name__ == "__main__":
    sys.exit(main())
