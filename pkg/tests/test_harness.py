import json
from dataclasses import replace

import numpy as np
import pytest

from quadplan import harness as hs
from quadplan.cli import main
from quadplan.scenarios import CANONICAL, corridor


def short_run_spec(**kw):
    spec = corridor(length=6.0)
    spec.sim = replace(spec.sim, t_max=8.0)
    for k, v in kw.items():
        setattr(spec, k, v)
    return spec


@pytest.fixture(scope="module")
def pushed():
    """Short corridor flight with a 0.5 s lateral push."""
    spec = short_run_spec(disturbances=[hs.Disturbance(1.0, 0.5, (0.0, 2.0, 0.0))])
    return spec, hs.run_episode(spec)


def row(v=(0.0, 0.0, 0.0), risk=0.0, p=(0.0, 0.0, 0.0), d=5.0):
    return {"vx": v[0], "vy": v[1], "vz": v[2], "risk": risk, "px": p[0], "py": p[1], "pz": p[2],
            "d_static": d, "h_s": d - 0.55, "degraded": 0}


class TestRisk:
    @pytest.mark.parametrize("d,expected", [(0.2, 1.0), (0.25, 1.0), (0.4, 0.5), (0.55, 0.0), (2.0, 0.0)])
    def test_values(self, d, expected):
        assert hs.risk_index(d, 0.25, 0.3) == pytest.approx(expected, abs=1e-15)

    def test_step_when_band_empty(self):
        assert hs.risk_index([0.2, 0.25, 0.3], 0.25, 0.0).tolist() == [1.0, 0.0, 0.0]


class TestAggregate:
    def test_mean_risk(self):
        log = [row(risk=1.0), row(), row(), row(p=(1, 0, 0))]
        m = hs.aggregate_metrics(log, (1, 0, 0), 0.5, 0.25)
        assert m.risk_index == 0.25 and m.success

    def test_speeds(self):
        log = [row(v=(3, 4, 0)), row(v=(1, 0, 0)), row(v=(0, 0, 0))]
        m = hs.aggregate_metrics(log, (9, 9, 9), 0.5, 0.25)
        assert m.peak_velocity == 5.0 and m.avg_velocity == 2.0
        assert not m.success and not m.reached_goal

    def test_collision_flag(self):
        m = hs.aggregate_metrics([row(d=0.1, p=(1, 0, 0))], (1, 0, 0), 0.5, 0.25)
        assert m.collided and not m.success

    def test_empty(self):
        with pytest.raises(ValueError):
            hs.aggregate_metrics([], (0, 0, 0), 0.5, 0.25)


class TestForest:
    def test_zero_density(self):
        assert hs.generate_forest(0.0, (0, 0, 50, 10)) == []

    def test_count_and_spacing(self):
        trees = hs.generate_forest(0.11, (0, 0, 50, 10), seed=3)
        assert len(trees) == 55
        c = np.array([t[:2] for t in trees])
        dist = np.linalg.norm(c[:, None] - c[None], axis=2) + np.eye(len(c)) * 1e9
        assert dist.min() >= 0.9
        assert all(0.4 <= t[2] <= 0.6 for t in trees)

    def test_seeded(self):
        assert hs.generate_forest(0.2, (0, 0, 10, 10), seed=1) == hs.generate_forest(0.2, (0, 0, 10, 10), seed=1)

    def test_impossible_density(self):
        with pytest.raises(hs.ForestError):
            hs.generate_forest(3.0, (0, 0, 5, 5), max_attempts_per_tree=50)


class TestScenarioJson:
    @pytest.mark.parametrize("name", sorted(CANONICAL))
    def test_round_trip(self, name):
        spec = CANONICAL[name]()
        back = hs.ScenarioSpec.from_json(json.loads(json.dumps(spec.to_json())))
        assert back.to_json() == spec.to_json()

    def test_schema_checked(self):
        data = corridor().to_json()
        data["schema"] = 99
        with pytest.raises(ValueError):
            hs.ScenarioSpec.from_json(data)

    def test_variant_copy(self):
        base = CANONICAL["single_cylinder"]()
        v = base.variant(constraint="dc", gpio=False, seed=4)
        assert v.variant_label == "dc-nogpio" and v.seed == 4 and base.variant_label == "cbf-gpio"


class TestEpisode:
    def test_flight_succeeds(self, pushed):
        _, res = pushed
        assert res.metrics.success and res.metrics.risk_index == 0.0

    def test_log_columns(self, pushed):
        _, res = pushed
        assert all(set(hs.LOG_COLUMNS) <= set(r) for r in res.log)
        assert len(res.timing) == len(res.log)

    def test_logged_force_during_event(self, pushed):
        spec, res = pushed
        m = spec.quad.m
        for r in res.log:
            expected = 2.0 / m if 1.0 <= r["t"] < 1.5 else 0.0
            assert r["sigma_y"] == expected and r["sigma_x"] == 0.0

    def test_applied_thrust_within_bounds(self, pushed):
        spec, res = pushed
        T = np.array([r["T"] for r in res.log])
        assert np.all(T >= spec.quad.thrust_min) and np.all(T <= spec.quad.thrust_max)

    def test_log_file_round_trip(self, pushed, tmp_path):
        _, res = pushed
        hs.write_log(tmp_path / "a.csv", res.log)
        back = hs.read_log(tmp_path / "a.csv")
        assert [[b[c] for c in hs.LOG_COLUMNS] for b in back] == [[float(r[c]) for c in hs.LOG_COLUMNS]
                                                                 for r in res.log]

    def test_blocked_goal_reports_failure(self):
        spec = short_run_spec(cylinders=[(7.0, 3.0, 1.2, 3.0)])
        res = hs.run_episode(spec)
        assert not res.metrics.success and res.metrics.reason.startswith("global planner")


class TestBatch:
    def test_identical_seeds_zero_spread(self):
        m = hs.RunMetrics(1.5, 2.0, 0.1, True, 0.3, False, True)
        rows = hs.summarize([("cbf-gpio", 0, m), ("cbf-gpio", 1, m)])
        assert rows[0]["avg_velocity_std"] == 0.0 and rows[0]["success_rate"] == 1.0

    def test_table(self, tmp_path):
        rows = hs.summarize([("a", 0, hs.RunMetrics(1.0, 2.0, 0.0, True, 0.3, False, True))])
        assert "avg_velocity_avg" in hs.format_table(rows).splitlines()[0]
        hs.write_table_csv(tmp_path / "s.csv", rows)
        assert (tmp_path / "s.csv").read_text().startswith("variant,runs")


class TestCli:
    def test_scenario_plan_run_report(self, tmp_path):
        scen = tmp_path / "corridor.json"
        assert main(["scenario", "corridor", "--out", str(scen)]) == 0
        spec = hs.ScenarioSpec.load(scen)
        short = short_run_spec()
        short.save(scen)
        assert spec.name == "corridor"
        ref = tmp_path / "ref.csv"
        assert main(["plan", str(scen), "--out", str(ref)]) == 0
        assert ref.read_text().splitlines()[0].startswith("theta")
        runs = tmp_path / "runs"
        assert main(["run", str(scen), "--out", str(runs)]) == 0
        logs = list(runs.glob("corridor_cbf-gpio_seed0.csv"))
        assert len(logs) == 1
        assert main(["report", str(runs)]) == 0
        assert (runs / "summary.csv").exists() and (runs / "corridor_cbf-gpio_seed0.svg").exists()
