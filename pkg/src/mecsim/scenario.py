"""Scenario configuration: JSON parsing, location datasets, synthesis.

A scenario file is a single JSON object. ``parse_scenario`` validates it,
applies defaults and returns a normalized dict (idempotent: re-parsing its
own output is the identity); ``build_scenario`` resolves it into the runtime
objects the engine consumes.

Station energy defaults follow the reference experiment constants: 20 GHz
CPUs, 8.2 nJ per cycle, a 10 W static draw and a 50 W time-average budget,
converted to per-slot joules at the configured slot length.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .arrivals import BernoulliPerBS, MarkovBurst, UserGroup, UserGroupPoisson
from .model import (
    ConfigurationError,
    Linear,
    Log,
    PiecewiseLinearConcave,
    StationConfig,
    Topology,
    delta_from_distance,
    haversine_m,
    utility_nu,
)
from .sim import ALGORITHMS, LIFTING_MODES, Scenario
from .wog import deadline_bounds

MELBOURNE_CBD_BOX = {
    "lat": [-37.818166, -37.814257],
    "lon": [144.958295, 144.966824],
}

STATION_DEFAULTS = {
    "cpu_ghz": 20.0,
    "cycle_energy_nj": 8.2,
    "static_w": 10.0,
    "budget_w": 50.0,
    "utility": {"type": "linear", "slope": 1.0},
}

_TOP_LEVEL_KEYS = {
    "algorithm", "horizon_slots", "seed", "stations", "locations_csv",
    "user_groups", "arrival", "v", "k_classes", "l_max_ms", "slot_ms",
    "load_factor", "lifting", "early_refuse", "capacity_model",
    "enforce_deadline", "blocked_penalty", "reassign_period", "plan_method",
    "workload_range_cycles", "attach_radius_m", "bounding_box",
    "station_defaults", "delta_slots", "peer_mask", "output_dir",
    "write_trace", "figures",
}

_STATION_KEYS = {
    "id", "lat", "lon", "cpu_cycles_per_slot", "e_static_j", "e_active_j",
    "e_budget_j", "utility",
}

_DEFAULTS = {
    "v": 10.0,
    "k_classes": 1,
    "l_max_ms": 50.0,
    "slot_ms": 1.0,
    "load_factor": 1.0,
    "lifting": "faithful",
    "early_refuse": False,
    "capacity_model": None,
    "enforce_deadline": False,
    "blocked_penalty": 0.0,
    "reassign_period": 1000,
    "plan_method": "auto",
    "workload_range_cycles": [2.5e6, 7.5e6],
    "attach_radius_m": 100.0,
    "arrival": {"type": "bernoulli", "p": 0.25},
    "write_trace": True,
    "figures": True,
    "output_dir": "out",
}


def _fail(key: str, msg: str):
    raise ConfigurationError(f"config key '{key}': {msg}")


def _require(cfg: dict, key: str, types, pred=None, msg="invalid value"):
    if key not in cfg:
        _fail(key, "missing required key")
    val = cfg[key]
    if not isinstance(val, types):
        _fail(key, f"expected {types}, got {type(val).__name__}")
    if pred is not None and not pred(val):
        _fail(key, msg)
    return val


def parse_utility(spec: dict, key: str = "utility"):
    if not isinstance(spec, dict) or "type" not in spec:
        _fail(key, "utility must be an object with a 'type'")
    kind = spec["type"]
    try:
        if kind == "linear":
            return Linear(float(spec.get("slope", 1.0)))
        if kind == "log":
            return Log(float(spec.get("scale", 1.0)))
        if kind == "piecewise":
            return PiecewiseLinearConcave(tuple(tuple(p) for p in spec["points"]))
    except (KeyError, TypeError, ConfigurationError) as exc:
        _fail(key, str(exc))
    _fail(key, f"unknown utility type {kind!r}")


def _utility_to_json(utility) -> dict:
    if isinstance(utility, Linear):
        return {"type": "linear", "slope": utility.slope}
    if isinstance(utility, Log):
        return {"type": "log", "scale": utility.scale}
    return {"type": "piecewise", "points": [list(p) for p in utility.points]}


def parse_scenario(path_or_dict) -> dict:
    """Validate a scenario JSON file (or dict) and normalize defaults.

    Unknown keys are rejected with the offending key named; the result is a
    plain dict suitable for re-emission (round-trips through itself).
    """
    if isinstance(path_or_dict, (str, Path)):
        with open(path_or_dict) as fh:
            try:
                cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path_or_dict}: not valid JSON ({exc})") from exc
    else:
        cfg = dict(path_or_dict)
    if not isinstance(cfg, dict):
        raise ConfigurationError("scenario must be a JSON object")

    unknown = set(cfg) - _TOP_LEVEL_KEYS
    if unknown:
        _fail(sorted(unknown)[0], "unknown key")

    out = dict(_DEFAULTS)
    out.update(cfg)

    _require(out, "algorithm", str, lambda a: a in ALGORITHMS, f"must be one of {ALGORITHMS}")
    _require(out, "horizon_slots", int, lambda h: h > 0, "must be a positive integer")
    _require(out, "seed", int)
    if "stations" not in out and "locations_csv" not in out:
        _fail("stations", "provide inline stations or a locations_csv path")
    if "stations" in out:
        if not isinstance(out["stations"], list) or not out["stations"]:
            _fail("stations", "must be a non-empty list")
        for i, st in enumerate(out["stations"]):
            if not isinstance(st, dict):
                _fail(f"stations[{i}]", "must be an object")
            bad = set(st) - _STATION_KEYS
            if bad:
                _fail(f"stations[{i}].{sorted(bad)[0]}", "unknown key")
            if "utility" in st:
                parse_utility(st["utility"], key=f"stations[{i}].utility")

    for key, types, pred, msg in (
        ("v", (int, float), lambda v: v > 0, "must be > 0"),
        ("k_classes", int, lambda k: k >= 1, "must be >= 1"),
        ("l_max_ms", (int, float), lambda v: v > 0, "must be > 0"),
        ("slot_ms", (int, float), lambda v: v > 0, "must be > 0"),
        ("load_factor", (int, float), lambda v: v >= 0, "must be >= 0"),
        ("lifting", str, lambda v: v in LIFTING_MODES, f"must be one of {LIFTING_MODES}"),
        ("early_refuse", bool, None, ""),
        ("enforce_deadline", bool, None, ""),
        ("blocked_penalty", (int, float), lambda v: v >= 0, "must be >= 0"),
        ("reassign_period", int, lambda v: v >= 0, "must be >= 0"),
        ("plan_method", str, lambda v: v in ("auto", "product", "exact"), "must be auto|product|exact"),
        ("attach_radius_m", (int, float), lambda v: v > 0, "must be > 0"),
        ("write_trace", bool, None, ""),
        ("figures", bool, None, ""),
        ("output_dir", str, None, ""),
    ):
        _require(out, key, types, pred, msg)
    if out["capacity_model"] is not None and not isinstance(out["capacity_model"], bool):
        _fail("capacity_model", "must be true, false or null")

    wr = out["workload_range_cycles"]
    if not (isinstance(wr, list) and len(wr) == 2 and all(isinstance(x, (int, float)) for x in wr) and 0 < wr[0] <= wr[1]):
        _fail("workload_range_cycles", "must be [low, high] with 0 < low <= high")

    arr = out["arrival"]
    if not isinstance(arr, dict) or "type" not in arr:
        _fail("arrival", "must be an object with a 'type'")
    kind = arr["type"]
    if kind == "bernoulli":
        p = arr.get("p", 0.25)
        ps = p if isinstance(p, list) else [p]
        if not all(isinstance(x, (int, float)) and 0 <= x <= 1 for x in ps):
            _fail("arrival.p", "probabilities must lie in [0, 1]")
        extra = set(arr) - {"type", "p"}
    elif kind in ("poisson_groups", "markov_burst"):
        rate = arr.get("rate_per_group" if kind == "poisson_groups" else "on_rate", 0.25)
        if not isinstance(rate, (int, float)) or rate < 0:
            _fail("arrival.rate", "rate must be >= 0")
        extra = set(arr) - {"type", "rate_per_group", "on_rate", "p_on_off", "p_off_on"}
        for k in ("p_on_off", "p_off_on"):
            if k in arr and not (isinstance(arr[k], (int, float)) and 0 <= arr[k] <= 1):
                _fail(f"arrival.{k}", "must lie in [0, 1]")
    else:
        _fail("arrival.type", f"unknown arrival type {kind!r}")
    if extra:
        _fail(f"arrival.{sorted(extra)[0]}", "unknown key")

    if "user_groups" in out:
        for i, g in enumerate(out["user_groups"]):
            if not isinstance(g, dict) or not {"lat", "lon"} <= set(g):
                _fail(f"user_groups[{i}]", "must be an object with lat and lon")
            if set(g) - {"lat", "lon", "rate"}:
                _fail(f"user_groups[{i}]", "unknown key")

    sd = dict(STATION_DEFAULTS)
    sd.update(out.get("station_defaults", {}))
    if set(sd) - set(STATION_DEFAULTS):
        _fail("station_defaults", f"unknown key {sorted(set(sd) - set(STATION_DEFAULTS))[0]}")
    parse_utility(sd["utility"], key="station_defaults.utility")
    out["station_defaults"] = sd
    out.setdefault("bounding_box", dict(MELBOURNE_CBD_BOX))
    return out


def _station_from_defaults(idx, sd: dict, slot_ms: float, position=None, overrides=None) -> StationConfig:
    overrides = overrides or {}
    cycles = overrides.get("cpu_cycles_per_slot", sd["cpu_ghz"] * 1e9 * slot_ms / 1e3)
    e_static = overrides.get("e_static_j", sd["static_w"] * slot_ms / 1e3)
    e_active = overrides.get(
        "e_active_j", e_static + sd["cycle_energy_nj"] * 1e-9 * cycles
    )
    e_budget = overrides.get("e_budget_j", sd["budget_w"] * slot_ms / 1e3)
    utility = parse_utility(overrides["utility"]) if "utility" in overrides else parse_utility(sd["utility"])
    return StationConfig(
        id=overrides.get("id", idx),
        cpu_rate=float(cycles),
        e_static=float(e_static),
        e_active=float(e_active),
        e_budget=float(e_budget),
        utility=utility,
        position=position,
    )


def load_locations(path, bounding_box=None, kinds=("bs", "user")):
    """Read a locations CSV (header id,kind,lat,lon) into position lists.

    Rows are filtered to the bounding box; kind matching is
    case-insensitive. Malformed rows fail with their line number.
    """
    bs_positions, user_positions = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip().lower() for f in reader.fieldnames] != ["id", "kind", "lat", "lon"]:
            raise ConfigurationError(f"{path}: expected header id,kind,lat,lon")
        for lineno, row in enumerate(reader, start=2):
            try:
                kind = row["kind"].strip().lower()
                lat, lon = float(row["lat"]), float(row["lon"])
            except (AttributeError, KeyError, TypeError, ValueError) as exc:
                raise ConfigurationError(f"{path}:{lineno}: malformed row ({exc})") from exc
            if kind not in ("bs", "user"):
                raise ConfigurationError(f"{path}:{lineno}: unknown kind {row['kind']!r}")
            if bounding_box is not None:
                (lat0, lat1), (lon0, lon1) = bounding_box["lat"], bounding_box["lon"]
                if not (min(lat0, lat1) <= lat <= max(lat0, lat1) and min(lon0, lon1) <= lon <= max(lon0, lon1)):
                    continue
            (bs_positions if kind == "bs" else user_positions).append((lat, lon))
    if "bs" in kinds and not bs_positions:
        raise ConfigurationError(f"{path}: no stations in bounding box")
    return bs_positions, user_positions


def _attach_groups(user_positions, bs_positions, radius_m, rates):
    groups = []
    for i, pos in enumerate(user_positions):
        candidates = [
            j for j, bpos in enumerate(bs_positions) if haversine_m(pos, bpos) <= radius_m
        ]
        if not candidates:
            raise ConfigurationError(
                f"user group {i} at {pos} has no BS within {radius_m} m"
            )
        groups.append(UserGroup(position=pos, rate=rates[i], candidates=candidates))
    return groups


def build_scenario(cfg: dict, **overrides) -> Scenario:
    """Resolve a normalized config dict into a runtime Scenario."""
    cfg = dict(cfg)
    cfg.update(overrides)
    slot_ms = float(cfg["slot_ms"])
    sd = cfg["station_defaults"]
    load = float(cfg["load_factor"])

    user_positions: list = []
    group_rates_inline: list = []
    if "locations_csv" in cfg:
        bs_positions, user_positions = load_locations(cfg["locations_csv"], cfg.get("bounding_box"))
        stations = [
            _station_from_defaults(i, sd, slot_ms, position=pos)
            for i, pos in enumerate(bs_positions)
        ]
    else:
        stations = []
        for i, st in enumerate(cfg["stations"]):
            pos = (st["lat"], st["lon"]) if "lat" in st and "lon" in st else None
            stations.append(_station_from_defaults(i, sd, slot_ms, position=pos, overrides=st))
    if "user_groups" in cfg:
        user_positions = [(g["lat"], g["lon"]) for g in cfg["user_groups"]]
        group_rates_inline = [g.get("rate") for g in cfg["user_groups"]]

    n = len(stations)
    if "delta_slots" in cfg:
        delta = np.asarray(cfg["delta_slots"], dtype=int)
        mask = np.asarray(cfg["peer_mask"], dtype=bool) if "peer_mask" in cfg else None
        topology = Topology.from_delta(delta, mask)
    elif all(st.position is not None for st in stations) and n > 0:
        topology = Topology.from_positions([st.position for st in stations], slot_ms)
    else:
        topology = Topology.from_delta(np.zeros((n, n), dtype=int))

    arr = cfg["arrival"]
    if arr["type"] == "bernoulli":
        p = arr.get("p", 0.25)
        ps = np.full(n, float(p)) if not isinstance(p, list) else np.asarray(p, dtype=float)
        if len(ps) != n:
            raise ConfigurationError(
                f"arrival.p has {len(ps)} entries for {n} stations"
            )
        process = BernoulliPerBS(np.clip(ps * load, 0.0, 1.0))
    else:
        if not user_positions:
            raise ConfigurationError("group arrivals need user_groups or a locations_csv")
        base = float(arr.get("rate_per_group" if arr["type"] == "poisson_groups" else "on_rate", 0.25))
        rates = [
            (r if r is not None else base) * load
            for r in (group_rates_inline or [None] * len(user_positions))
        ]
        groups = _attach_groups(user_positions, [st.position for st in stations], float(cfg["attach_radius_m"]), rates)
        if arr["type"] == "poisson_groups":
            process = UserGroupPoisson(groups)
        else:
            process = MarkovBurst(
                groups,
                p_on_off=float(arr.get("p_on_off", 0.05)),
                p_off_on=float(arr.get("p_off_on", 0.05)),
            )

    l_max = int(round(float(cfg["l_max_ms"]) / slot_ms))
    # the echo describes the scenario, not where this run writes its files
    echo = {k: v for k, v in cfg.items() if k not in ("output_dir", "figures", "write_trace")}
    scenario = Scenario(
        stations=stations,
        topology=topology,
        process=process,
        algorithm=cfg["algorithm"],
        horizon=int(cfg["horizon_slots"]),
        seed=int(cfg["seed"]),
        v=float(cfg["v"]),
        k_classes=int(cfg["k_classes"]),
        l_max=l_max,
        slot_ms=slot_ms,
        load_factor=load,
        lifting=cfg["lifting"],
        early_refuse=bool(cfg["early_refuse"]),
        capacity_model=cfg["capacity_model"],
        workload_range=tuple(cfg["workload_range_cycles"]),
        reassign_period=int(cfg["reassign_period"]),
        blocked_penalty=float(cfg["blocked_penalty"]),
        plan_method=cfg["plan_method"],
        collect_trace=bool(cfg["write_trace"]),
        config_echo=echo,
    )
    if cfg["enforce_deadline"]:
        report = deadline_bounds(scenario.v, stations, topology, l_max=l_max)
        if scenario.v > report.v_ceiling:
            raise ConfigurationError(
                f"config key 'v': {scenario.v} exceeds the deadline ceiling "
                f"{report.v_ceiling:.6g} for l_max={l_max} and "
                f"delta_max={topology.delta_max}"
            )
    return scenario


def generate_dataset(
    path,
    seed: int = 0,
    n_stations: int = 36,
    n_groups: int = 126,
    bounding_box: dict | None = None,
    cluster_fraction: float = 0.7,
    cluster_anchor_fraction: float = 0.25,
    max_offset_m: float = 90.0,
):
    """Synthesize a locations CSV shaped like the reference deployment.

    Stations are uniform in the bounding box. ``cluster_fraction`` of the
    user groups pile around a small set of anchor stations (spatial
    imbalance is what makes peer cooperation pay off); the rest scatter near
    random stations. Every group lands within ``max_offset_m`` of some
    station so attachment at the default radius always succeeds.
    """
    rng = np.random.default_rng(seed)
    box = bounding_box or MELBOURNE_CBD_BOX
    (lat0, lat1), (lon0, lon1) = sorted(box["lat"]), sorted(box["lon"])
    lat_m = 111194.9
    lon_m = lat_m * math.cos(math.radians((lat0 + lat1) / 2))

    # inset the station field so user offsets never leave the box
    lat_pad, lon_pad = max_offset_m / lat_m, max_offset_m / lon_m
    bs = np.column_stack(
        [
            rng.uniform(lat0 + lat_pad, lat1 - lat_pad, n_stations),
            rng.uniform(lon0 + lon_pad, lon1 - lon_pad, n_stations),
        ]
    )
    n_anchors = max(1, int(round(cluster_anchor_fraction * n_stations)))
    anchors = rng.choice(n_stations, size=n_anchors, replace=False)
    rows = []
    for i in range(n_groups):
        if rng.random() < cluster_fraction:
            center = bs[anchors[int(rng.integers(n_anchors))]]
        else:
            center = bs[int(rng.integers(n_stations))]
        radius = rng.uniform(0, max_offset_m)
        angle = rng.uniform(0, 2 * math.pi)
        lat = center[0] + radius * math.sin(angle) / lat_m
        lon = center[1] + radius * math.cos(angle) / lon_m
        rows.append((lat, lon))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "kind", "lat", "lon"])
        for i, (lat, lon) in enumerate(bs):
            writer.writerow([i, "bs", f"{lat:.8f}", f"{lon:.8f}"])
        for i, (lat, lon) in enumerate(rows):
            writer.writerow([n_stations + i, "user", f"{lat:.8f}", f"{lon:.8f}"])
    return path
