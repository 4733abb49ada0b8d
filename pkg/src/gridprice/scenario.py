"""Scenarios: network, prosumer assets, tariff, forecast and realized series.

Series are stored at the real-time resolution (30 s). Planning code
aggregates them to the 10-minute planning grid by averaging.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import REPLICA_PROSUMER_BUSES, NetworkModel, load_network, replica_network, save_network
from .prosumer import BessSpec, ProsumerSpec

DAY_S = 86400


@dataclass(frozen=True)
class TimelineConfig:
    dt_plan_s: int = 600
    t1_s: int = 600
    t2_s: int = 30
    budget_iters: int = 150
    budget_seconds: float | None = None
    start_s: int = 10 * 3600
    end_s: int = 19 * 3600

    def __post_init__(self):
        if self.t1_s % self.t2_s:
            raise ValueError("T1 must be a multiple of T2")
        if self.dt_plan_s != self.t1_s:
            raise ValueError("planning step must equal the MPC cadence")
        if DAY_S % self.dt_plan_s:
            raise ValueError("planning step must divide a day")
        if not 0 <= self.start_s < self.end_s <= DAY_S:
            raise ValueError("invalid experiment window")
        if self.start_s % self.t1_s or self.end_s % self.t1_s:
            raise ValueError("experiment window must align with the MPC cadence")

    @property
    def K(self) -> int:
        return DAY_S // self.dt_plan_s

    @property
    def dt_h(self) -> float:
        return self.dt_plan_s / 3600

    @property
    def dt_rt_h(self) -> float:
        return self.t2_s / 3600

    @property
    def rt_per_plan(self) -> int:
        return self.t1_s // self.t2_s

    @property
    def n_rt(self) -> int:
        return DAY_S // self.t2_s


@dataclass
class Scenario:
    """Everything a day of simulation needs.

    Per-prosumer series have shape ``(N, n_rt)`` in kW at the ``t2_s``
    resolution. ``tariff`` is in CHF/kWh per planning step. The slack
    voltage series is the realized one; planning uses ``slack_forecast``.
    """

    network: NetworkModel
    prosumers: list
    tariff: np.ndarray
    load_forecast: np.ndarray
    pv_forecast: np.ndarray
    load_realized: np.ndarray
    pv_realized: np.ndarray
    slack_realized: np.ndarray
    slack_forecast: float = 1.0
    timeline: TimelineConfig = field(default_factory=TimelineConfig)
    seed: int = 0
    name: str = "scenario"

    def validate(self) -> list:
        """All violated scenario invariants (empty when valid)."""
        errs = []
        tl = self.timeline
        N = len(self.prosumers)
        if N == 0:
            errs.append("no prosumers")
        if np.asarray(self.tariff).shape != (tl.K,):
            errs.append(f"tariff length {np.asarray(self.tariff).size} != K={tl.K}")
        for name in ("load_forecast", "pv_forecast", "load_realized", "pv_realized"):
            a = np.asarray(getattr(self, name))
            if a.shape != (N, tl.n_rt):
                errs.append(f"{name} shape {a.shape} != {(N, tl.n_rt)}")
            elif not np.all(np.isfinite(a)):
                errs.append(f"{name} has non-finite entries")
            elif name.startswith("pv") and (a < 0).any():
                errs.append(f"{name} has negative entries")
        sv = np.asarray(self.slack_realized)
        if sv.shape != (tl.n_rt,):
            errs.append(f"slack_realized shape {sv.shape} != {(tl.n_rt,)}")
        elif not np.all(sv > 0):
            errs.append("slack voltage must be positive")
        ids = set(self.network.pq_ids)
        for p in self.prosumers:
            if p.bus not in ids:
                errs.append(f"prosumer {p.name} attached to unknown or slack bus {p.bus}")
        names = [p.name for p in self.prosumers]
        if len(set(names)) != len(names):
            errs.append("duplicate prosumer names")
        return errs

    @property
    def attachments(self) -> tuple:
        return tuple(p.bus for p in self.prosumers)

    @property
    def names(self) -> list:
        return [p.name for p in self.prosumers]

    def plan_mean(self, series: np.ndarray) -> np.ndarray:
        """Average 30-s samples over each planning step."""
        a = np.asarray(series, dtype=float)
        r = self.timeline.rt_per_plan
        return a.reshape(*a.shape[:-1], -1, r).mean(axis=-1)

    def with_limits(self, limits) -> "Scenario":
        return replace(self, network=self.network.with_limits(limits))

    # -- files ------------------------------------------------------------
    def save(self, directory) -> str:
        """Write ``scenario.json`` plus network and series files; returns the json path."""
        os.makedirs(directory, exist_ok=True)
        save_network(self.network, os.path.join(directory, "network.json"))
        tl = self.timeline
        t_rt = np.arange(tl.n_rt) * tl.t2_s
        write_columns(os.path.join(directory, "tariff.csv"),
                       {"t_s": np.arange(tl.K) * tl.dt_plan_s, "chf_per_kwh": self.tariff})
        write_columns(os.path.join(directory, "slack.csv"), {"t_s": t_rt, "v_pu": self.slack_realized})
        prosumers = []
        for i, p in enumerate(self.prosumers):
            fn = f"series_{p.name}.csv"
            write_columns(os.path.join(directory, fn), {
                "t_s": t_rt,
                "load_forecast_kw": self.load_forecast[i], "pv_forecast_kw": self.pv_forecast[i],
                "load_realized_kw": self.load_realized[i], "pv_realized_kw": self.pv_realized[i],
            })
            prosumers.append({
                "name": p.name, "bus": p.bus, "pv_rating_kw": p.pv_rating,
                "load_rating_kw": p.load_rating, "power_factor": p.power_factor,
                "bess": {"s_max_kva": p.bess.s_max, "e_max_kwh": p.bess.e_max,
                         "soc_min": p.bess.soc_min, "soc_max": p.bess.soc_max,
                         "soc_init": p.bess.soc_init},
                "series": fn,
            })
        doc = {
            "name": self.name, "seed": self.seed, "network": "network.json",
            "tariff": "tariff.csv", "slack_voltage": "slack.csv",
            "slack_voltage_forecast_pu": self.slack_forecast,
            "timeline": {
                "dt_plan_s": tl.dt_plan_s, "t1_s": tl.t1_s, "t2_s": tl.t2_s,
                "budget_iters": tl.budget_iters, "budget_seconds": tl.budget_seconds,
                "start_s": tl.start_s, "end_s": tl.end_s,
            },
            "prosumers": prosumers,
        }
        path = os.path.join(directory, "scenario.json")
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        return path


class ScenarioError(ValueError):
    """Invalid scenario; ``problems`` lists every violation found."""

    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


_SCENARIO_KEYS = {"name", "seed", "network", "tariff", "slack_voltage", "slack_voltage_forecast_pu",
                  "timeline", "prosumers"}
_TIMELINE_KEYS = {"dt_plan_s", "t1_s", "t2_s", "budget_iters", "budget_seconds", "start_s", "end_s"}


def load_scenario(path) -> Scenario:
    """Read a scenario file, collecting every problem before failing."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        doc = json.load(fh)
    problems = [f"unknown scenario key {k!r}" for k in sorted(set(doc) - _SCENARIO_KEYS)]
    problems += [f"unknown timeline key {k!r}" for k in sorted(set(doc.get("timeline", {})) - _TIMELINE_KEYS)]
    for key in ("network", "tariff", "prosumers"):
        if key not in doc:
            problems.append(f"missing key {key!r}")
    if problems:
        raise ScenarioError(problems)
    try:
        timeline = TimelineConfig(**doc.get("timeline", {}))
        network = load_network(os.path.join(base, doc["network"]))
    except (ValueError, OSError, KeyError) as exc:
        raise ScenarioError([str(exc)]) from exc
    tariff = read_columns(os.path.join(base, doc["tariff"]))["chf_per_kwh"]
    prosumers, lf, pf, lr, pr = [], [], [], [], []
    for k, d in enumerate(doc["prosumers"]):
        try:
            b = d["bess"]
            bess = BessSpec(float(b["s_max_kva"]), float(b["e_max_kwh"]), float(b.get("soc_min", 0.1)),
                            float(b.get("soc_max", 0.9)), float(b.get("soc_init", 0.5)))
            spec = ProsumerSpec(str(d["name"]), str(d["bus"]), bess, float(d.get("pv_rating_kw", 5.0)),
                                float(d.get("load_rating_kw", 2.5)), d.get("power_factor"))
            cols = read_columns(os.path.join(base, d["series"]))
        except (ValueError, KeyError, OSError) as exc:
            problems.append(f"prosumer #{k}: {exc}")
            continue
        prosumers.append(spec)
        lf.append(cols["load_forecast_kw"])
        pf.append(cols["pv_forecast_kw"])
        lr.append(cols["load_realized_kw"])
        pr.append(cols["pv_realized_kw"])
    if "slack_voltage" in doc:
        slack = read_columns(os.path.join(base, doc["slack_voltage"]))["v_pu"]
    else:
        slack = np.full(timeline.n_rt, network.slack_voltage_at(0))
    if problems:
        raise ScenarioError(problems)
    sc = Scenario(network, prosumers, tariff, np.array(lf), np.array(pf), np.array(lr), np.array(pr),
                  slack, float(doc.get("slack_voltage_forecast_pu", 1.0)), timeline,
                  int(doc.get("seed", 0)), str(doc.get("name", "scenario")))
    errs = sc.validate()
    if errs:
        raise ScenarioError(errs)
    return sc


def write_columns(path, columns: dict) -> None:
    names = list(columns)
    data = [np.asarray(columns[n]) for n in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*data):
            w.writerow([format_number(v) for v in row])


def read_columns(path) -> dict:
    """Columns of a CSV written by :func:`write_columns`.

    Integral columns come back as integers and non-numeric ones as text, so
    re-emitting what was read reproduces the file byte for byte.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty column file")
    header, body = rows[0], rows[1:]
    out = {}
    for k, h in enumerate(header):
        vals = [r[k] for r in body]
        for kind in (int, float, str):
            try:
                out[h] = np.array([kind(v) for v in vals], dtype=kind)
                break
            except ValueError:
                continue
    return out


def format_number(v) -> str:
    """Shortest round-tripping text for a float (integers stay integral, text passes through)."""
    if isinstance(v, (str, np.str_)):
        return str(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# -- synthetic profiles ----------------------------------------------------

@dataclass(frozen=True)
class ProfileParams:
    """Shape parameters of the synthetic diurnal profiles."""

    pv_peak_fraction: tuple = (0.702, 0.756, 0.72, 0.738, 0.774)
    sunrise_h: float = 6.5
    sunset_h: float = 20.0
    load_base_kw: float = 0.25
    load_day_kw: float = 0.6
    load_evening_kw: float = 1.6
    load_noise_kw: float = 0.12
    tariff_low: float = 0.12
    tariff_high: float = 0.30
    tariff_switch_h: float = 13.0
    pv_realized_ratio: float = 0.9
    disturbance_h: float = 12.25
    disturbance_pu: float = 0.005


def _pv_shape(hours: np.ndarray, sunrise: float, sunset: float) -> np.ndarray:
    phase = (hours - sunrise) / (sunset - sunrise)
    return np.where((phase > 0) & (phase < 1), np.sin(np.pi * np.clip(phase, 0, 1)) ** 2, 0.0)


def _load_day(hours: np.ndarray, rng: np.random.Generator, p: ProfileParams, scale: float,
              rating: float, dt_s: int) -> np.ndarray:
    day = p.load_day_kw * _smooth_window(hours, 7.5, 17.5, 0.7)
    evening = p.load_evening_kw * np.exp(-0.5 * ((hours - 19.5) / 1.3) ** 2)
    shape = scale * (p.load_base_kw + day + evening)
    # AR(1) noise with ~10 min correlation time
    phi = np.exp(-dt_s / 600.0)
    eps = rng.standard_normal(hours.size) * p.load_noise_kw * np.sqrt(1 - phi ** 2)
    noise = np.empty_like(eps)
    acc = 0.0
    for k, e in enumerate(eps):
        acc = phi * acc + e
        noise[k] = acc
    return np.clip(shape + noise, 0.0, rating)


def _smooth_window(h, start, end, width):
    return 1 / (1 + np.exp(-(h - start) / (width / 4))) * 1 / (1 + np.exp((h - end) / (width / 4)))


def two_level_tariff(timeline: TimelineConfig, low: float, high: float, switch_h: float) -> np.ndarray:
    hours = np.arange(timeline.K) * timeline.dt_h
    return np.where(hours < switch_h, low, high)


def synthetic_scenario(network: NetworkModel, prosumers: list, seed: int = 0,
                       params: ProfileParams | None = None, timeline: TimelineConfig | None = None,
                       name: str = "synthetic") -> Scenario:
    """Deterministic synthetic day for the given assets.

    The forecast and the realized load are two independent noisy draws of the
    same diurnal shape; realized PV is a fixed fraction of its forecast.
    """
    p = params or ProfileParams()
    tl = timeline or TimelineConfig()
    rng = np.random.default_rng(seed)
    hours = np.arange(tl.n_rt) * tl.t2_s / 3600
    N = len(prosumers)
    scales = 0.9 + 0.2 * rng.random(N)
    fracs = np.resize(np.asarray(p.pv_peak_fraction, dtype=float), N)
    pv_shape = _pv_shape(hours, p.sunrise_h, p.sunset_h)
    pv_fc = np.array([pr.pv_rating * f * pv_shape for pr, f in zip(prosumers, fracs)])
    load_fc = np.array([_load_day(hours, rng, p, s, pr.load_rating, tl.t2_s)
                        for pr, s in zip(prosumers, scales)])
    load_re = np.array([_load_day(hours, rng, p, s, pr.load_rating, tl.t2_s)
                        for pr, s in zip(prosumers, scales)])
    pv_re = p.pv_realized_ratio * pv_fc
    v0 = network.slack_voltage_at(0)
    slack = np.full(tl.n_rt, v0)
    if p.disturbance_pu:
        slack[hours >= p.disturbance_h] += p.disturbance_pu
    tariff = two_level_tariff(tl, p.tariff_low, p.tariff_high, p.tariff_switch_h)
    return Scenario(network, list(prosumers), tariff, load_fc, pv_fc, load_re, pv_re, slack,
                    v0, tl, seed, name)


def replica_prosumers(s_max: float = 2.5, e_max: float = 2.5) -> list:
    bess = BessSpec(s_max, e_max, soc_min=0.1, soc_max=0.9, soc_init=0.5)
    return [ProsumerSpec(f"P{bus[1:]}", bus, bess, pv_rating=5.0, load_rating=2.5)
            for bus in REPLICA_PROSUMER_BUSES]


def replica_scenario(seed: int = 7, params: ProfileParams | None = None,
                     timeline: TimelineConfig | None = None) -> Scenario:
    """Laboratory feeder with five prosumers and the calibrated synthetic day."""
    return synthetic_scenario(replica_network(), replica_prosumers(), seed, params, timeline,
                              name="replica")
