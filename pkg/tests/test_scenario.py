import csv
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecsim.arrivals import UserGroupPoisson
from mecsim.cli import load_summary_schema, main
from mecsim.model import ConfigurationError
from mecsim.scenario import (
    build_scenario,
    generate_dataset,
    load_locations,
    parse_scenario,
)
from mecsim.sim import run_simulation


MINIMAL = {
    "algorithm": "nop",
    "horizon_slots": 100,
    "seed": 1,
    "stations": [{"id": 0}],
}


def _write(tmp_path, cfg, name="s.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


# --- parsing -----------------------------------------------------------------


def test_minimal_config_gets_defaults(tmp_path):
    cfg = parse_scenario(_write(tmp_path, MINIMAL))
    assert cfg["v"] == 10.0
    assert cfg["l_max_ms"] == 50.0
    assert cfg["slot_ms"] == 1.0
    assert cfg["arrival"]["type"] == "bernoulli"
    scenario = build_scenario(cfg)
    assert scenario.l_max == 50
    assert scenario.stations[0].e_active == pytest.approx(0.174)
    assert scenario.stations[0].e_budget == pytest.approx(0.05)


def test_unknown_key_rejected(tmp_path):
    cfg = dict(MINIMAL, typo_key=1)
    with pytest.raises(ConfigurationError, match="typo_key"):
        parse_scenario(_write(tmp_path, cfg))


def test_negative_rate_rejected(tmp_path):
    cfg = dict(MINIMAL, arrival={"type": "poisson_groups", "rate_per_group": -0.5})
    with pytest.raises(ConfigurationError, match="arrival.rate"):
        parse_scenario(_write(tmp_path, cfg))


def test_deadline_ceiling_enforced():
    delta = (np.full((2, 2), 5) - 5 * np.eye(2, dtype=int)).astype(int).tolist()
    cfg = parse_scenario(
        {
            "algorithm": "wog",
            "horizon_slots": 100,
            "seed": 1,
            "stations": [{"id": 0}, {"id": 1}],
            "delta_slots": delta,
            "v": 50.0,
            "enforce_deadline": True,
        }
    )
    with pytest.raises(ConfigurationError, match="'v'"):
        build_scenario(cfg)
    cfg["v"] = 38.0
    build_scenario(cfg)  # at the ceiling: accepted


def test_parse_is_idempotent_on_minimal():
    once = parse_scenario(MINIMAL)
    twice = parse_scenario(once)
    assert once == twice


@settings(max_examples=60, deadline=None)
@given(
    algo=st.sampled_from(["nop", "wog", "greedy", "known"]),
    v=st.floats(min_value=0.5, max_value=40),
    horizon=st.integers(min_value=1, max_value=10_000),
    p=st.floats(min_value=0.0, max_value=1.0),
    k=st.integers(min_value=1, max_value=6),
    lifting=st.sampled_from(["faithful", "eager"]),
)
def test_parse_round_trip_property(algo, v, horizon, p, k, lifting):
    cfg = {
        "algorithm": algo,
        "horizon_slots": horizon,
        "seed": 7,
        "v": v,
        "k_classes": k,
        "lifting": lifting,
        "stations": [{"id": 0}, {"id": 1}],
        "arrival": {"type": "bernoulli", "p": p},
    }
    once = parse_scenario(cfg)
    assert parse_scenario(once) == once


# --- locations ----------------------------------------------------------------


def _write_locations(tmp_path, rows):
    path = tmp_path / "loc.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "kind", "lat", "lon"])
        writer.writerows(rows)
    return path


def test_locations_build_trip_times(tmp_path):
    lat = -37.8175
    d250 = 250.0 / 111194.9
    path = _write_locations(
        tmp_path,
        [
            [0, "bs", lat, 144.960],
            [1, "Bs", lat + d250, 144.960],  # kind is case-insensitive
            [2, "user", lat + 50.0 / 111194.9, 144.960],
        ],
    )
    bs, users = load_locations(path)
    assert len(bs) == 2 and len(users) == 1
    cfg = parse_scenario(
        {
            "algorithm": "wog",
            "horizon_slots": 10,
            "seed": 0,
            "locations_csv": str(path),
            "arrival": {"type": "poisson_groups", "rate_per_group": 0.2},
        }
    )
    scenario = build_scenario(cfg)
    assert scenario.topology.delta[0, 1] == 3
    assert isinstance(scenario.process, UserGroupPoisson)
    # only BS 0 lies within the 100 m attach radius of the group
    assert scenario.process.groups[0].candidates == [0]


def test_locations_outside_box_rejected(tmp_path):
    path = _write_locations(tmp_path, [[0, "bs", 0.0, 0.0]])
    with pytest.raises(ConfigurationError, match="no stations in bounding box"):
        load_locations(path, {"lat": [-37.818166, -37.814257], "lon": [144.958295, 144.966824]})


def test_malformed_row_reports_line(tmp_path):
    path = _write_locations(tmp_path, [[0, "bs", "not-a-number", 144.96]])
    with pytest.raises(ConfigurationError, match=":2"):
        load_locations(path)


def test_group_out_of_reach_is_an_error(tmp_path):
    lat = -37.8175
    path = _write_locations(
        tmp_path,
        [
            [0, "bs", lat, 144.960],
            [1, "user", lat + 150.0 / 111194.9, 144.960],
        ],
    )
    cfg = parse_scenario(
        {
            "algorithm": "wog",
            "horizon_slots": 10,
            "seed": 0,
            "locations_csv": str(path),
            "arrival": {"type": "poisson_groups", "rate_per_group": 0.2},
        }
    )
    with pytest.raises(ConfigurationError, match="no BS within"):
        build_scenario(cfg)


def test_dataset_generation_round_trips(tmp_path):
    path = generate_dataset(tmp_path / "gen.csv", seed=4, n_stations=12, n_groups=30)
    bs, users = load_locations(path)
    assert len(bs) == 12 and len(users) == 30
    cfg = parse_scenario(
        {
            "algorithm": "nop",
            "horizon_slots": 50,
            "seed": 0,
            "locations_csv": str(path),
            "arrival": {"type": "poisson_groups", "rate_per_group": 0.05},
        }
    )
    scenario = build_scenario(cfg)  # every group attaches
    assert len(scenario.process.groups) == 30


# --- summaries and CLI ---------------------------------------------------------


def test_summary_validates_against_schema(tmp_path):
    cfg = parse_scenario(dict(MINIMAL, horizon_slots=300))
    summary, _ = run_simulation(build_scenario(cfg))
    jsonschema.validate(summary.as_dict(), load_summary_schema())


def test_cli_simulate_is_reproducible(tmp_path):
    cfg_path = _write(tmp_path, dict(MINIMAL, horizon_slots=400, figures=False))
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["simulate", "--config", str(cfg_path), "--output-dir", str(out1)]) == 0
    assert main(["simulate", "--config", str(cfg_path), "--output-dir", str(out2)]) == 0
    assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()
    assert (out1 / "trace.csv").read_bytes() == (out2 / "trace.csv").read_bytes()
    header = (out1 / "trace.csv").read_text().splitlines()[0]
    assert header == "slot,bs,class,Q,H,Z,W,eta,D,gamma,energy_j,arrivals"


def test_cli_sweep_produces_combined_table(tmp_path, monkeypatch):
    monkeypatch.setenv("MEC_SIM_THREADS", "1")
    cfg = {
        "algorithm": "wog",
        "horizon_slots": 300,
        "seed": 2,
        "stations": [{"id": 0}, {"id": 1}],
        "arrival": {"type": "bernoulli", "p": 0.4},
        "write_trace": False,
        "figures": False,
    }
    cfg_path = _write(tmp_path, cfg)
    out = tmp_path / "sweep"
    rc = main([
        "sweep", "--config", str(cfg_path), "--param", "v",
        "--values", "5,10,20,40", "--output-dir", str(out), "--no-figures",
    ])
    assert rc == 0
    rows = list(csv.DictReader(open(out / "combined.csv")))
    assert len(rows) == 4
    assert [r["value"] for r in rows] == ["5", "10", "20", "40"]
    manifest = json.loads((out / "sweep_manifest.json").read_text())
    assert manifest["completed"] == [5, 10, 20, 40]
    for v in (5, 10, 20, 40):
        assert (out / f"v_{v}" / "summary.json").exists()


def test_cli_sweep_records_failures(tmp_path, monkeypatch):
    monkeypatch.setenv("MEC_SIM_THREADS", "1")
    cfg_path = _write(tmp_path, dict(MINIMAL, write_trace=False, figures=False))
    out = tmp_path / "sweep"
    rc = main([
        "sweep", "--config", str(cfg_path), "--param", "load_factor",
        "--values", "0.5,1.0", "--output-dir", str(out), "--no-figures",
    ])
    assert rc == 0
    # now a sweep with an invalid value is rejected up front
    rc = main([
        "sweep", "--config", str(cfg_path), "--param", "load_factor",
        "--values", "-1", "--output-dir", str(out), "--no-figures",
    ])
    assert rc == 2


def test_cli_bounds_reports_ceiling(tmp_path, capsys):
    delta = (np.full((2, 2), 5) - 5 * np.eye(2, dtype=int)).astype(int).tolist()
    cfg_path = _write(
        tmp_path,
        {
            "algorithm": "wog",
            "horizon_slots": 10,
            "seed": 0,
            "stations": [{"id": 0}, {"id": 1}],
            "delta_slots": delta,
        },
    )
    assert main(["bounds", "--config", str(cfg_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["h_max"] == [12, 12]
    assert out["v_ceiling"] == pytest.approx(38.0)


def test_cli_solve_pk(tmp_path, capsys):
    cfg_path = _write(
        tmp_path,
        {
            "algorithm": "known",
            "horizon_slots": 10,
            "seed": 0,
            "stations": [
                {"id": 0, "e_static_j": 0.0, "e_active_j": 1.0, "e_budget_j": 0.5},
                {"id": 1, "e_static_j": 0.0, "e_active_j": 1.0, "e_budget_j": 0.5},
            ],
            "arrival": {"type": "bernoulli", "p": [0.8, 0.2]},
        },
    )
    assert main(["solve-pk", "--config", str(cfg_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["y_star"] == pytest.approx([0.8, 0.2])
    assert out["mu_star"] == pytest.approx([0.5, 0.5])
    assert out["z_star"] == pytest.approx(1.0)


def test_cli_validate_passes(tmp_path):
    cfg_path = _write(tmp_path, {
        "algorithm": "wog",
        "horizon_slots": 1000,
        "seed": 3,
        "stations": [{"id": 0}, {"id": 1}],
        "arrival": {"type": "bernoulli", "p": 0.5},
    })
    assert main(["validate", "--config", str(cfg_path)]) == 0


def test_cli_dataset_gen(tmp_path):
    out = tmp_path / "loc.csv"
    assert main(["dataset-gen", "--out", str(out), "--seed", "1", "--stations", "10", "--groups", "20"]) == 0
    bs, users = load_locations(out)
    assert len(bs) == 10 and len(users) == 20


def test_cli_run_figures(tmp_path):
    cfg_path = _write(tmp_path, {
        "algorithm": "wog",
        "horizon_slots": 300,
        "seed": 3,
        "stations": [{"id": 0}, {"id": 1}],
        "arrival": {"type": "bernoulli", "p": 0.5},
    })
    out = tmp_path / "figs"
    assert main(["simulate", "--config", str(cfg_path), "--output-dir", str(out)]) == 0
    assert (out / "fig_outcomes.png").exists()
    assert (out / "fig_queues.png").exists()
    assert (out / "fig_energy.png").exists()
