import json
import random

import numpy as np
import pytest

from subgoal_drive.errors import ConfigError
from subgoal_drive.evaluation import (EpisodeResult, EvalConfig, EvalReport, ExpertPolicy, ConstantPolicy,
                                      aggregate, evaluate, generate_eval_paths, rollout)
from subgoal_drive.expert import expert_action
from subgoal_drive.geometry import Pose
from subgoal_drive.sim import Action, ActorKind, ActorScript, ActorState, SimConfig


def res(success, total=1000.0, non_normal=0.0, vehicle=0, pedestrian=0, other=0):
    return EpisodeResult(success, total, non_normal, {"vehicle": vehicle, "pedestrian": pedestrian, "other": other},
                         "goal" if success else "stuck")


class BlindExpert:
    """Expert steering that never brakes."""

    def reset(self, sensor, condition_seed):
        pass

    def act(self, world, path, cursor, angle):
        a, _, _ = expert_action(world, path, cursor)
        return Action(a.steer, 1)


@pytest.fixture(scope="module")
def paths(eval_town):
    return generate_eval_paths(eval_town, EvalConfig(n_paths=3, path_length=120.0), SimConfig())


class TestAggregate:
    def test_success_rate(self):
        rep = aggregate([res(True)] * 27 + [res(False)] * 23)
        assert rep.success_rate == 54.0

    def test_collisions_per_km(self):
        rep = aggregate([res(True, 1180.0, vehicle=2), res(True, 1180.0, vehicle=1), res(False, 500.0, vehicle=9)])
        assert rep.collisions_per_km["vehicle"] == pytest.approx(1.27, abs=1e-2)

    def test_all_normal(self):
        assert aggregate([res(True), res(True, 300.0), res(False, 50.0, 50.0)]).normal_driving_rate == 100.0

    def test_normal_driving_rate(self):
        rep = aggregate([res(True, 1000.0, 100.0), res(True, 1000.0, 0.0)])
        assert rep.normal_driving_rate == pytest.approx(95.0)

    def test_undefined_without_success(self, tmp_path):
        rep = aggregate([res(False), res(False)])
        assert rep.success_rate == 0.0
        assert rep.normal_driving_rate is None
        assert all(v is None for v in rep.collisions_per_km.values())
        rep.write_json(tmp_path / "r.json")
        assert json.loads((tmp_path / "r.json").read_text())["normal_driving_rate"] is None
        rep.write_csv(tmp_path / "r.csv")
        assert "undefined" in (tmp_path / "r.csv").read_text()

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        results = [res(bool(rng.random() < 0.7), float(rng.uniform(100, 900)), 0.0, int(rng.integers(0, 3)))
                   for _ in range(40)]
        for r in results:
            r.distance_non_normal = r.distance_total * float(rng.uniform(0, 0.2))
        base = aggregate(results)
        for seed in range(5):
            shuffled = results[:]
            random.Random(seed).shuffle(shuffled)
            other = aggregate(shuffled)
            assert (other.success_rate, other.normal_driving_rate, other.collisions_per_km) == \
                (base.success_rate, base.normal_driving_rate, base.collisions_per_km)

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_json_roundtrip(self, tmp_path):
        rep = aggregate([res(True, 800.0, 12.5, 1), res(False)])
        rep.write_json(tmp_path / "r.json")
        back = EvalReport.read_json(tmp_path / "r.json")
        assert back.to_dict() == rep.to_dict()

    def test_invariant(self):
        with pytest.raises(ValueError):
            res(True, 10.0, 11.0)


def test_seed_sets_disjoint():
    with pytest.raises(ConfigError):
        EvalConfig(condition_seeds=(1, 2))


class TestRollout:
    def test_expert_actor_free(self, eval_town, paths):
        cfg = EvalConfig(actors=False)
        for ep in paths:
            r = rollout(ExpertPolicy(), eval_town, ep.route, ep.path, cfg, SimConfig(), condition_seed=2)
            assert r.success and r.termination == "goal"
            assert r.distance_non_normal == 0.0

    def test_never_moving_is_stuck(self, eval_town, paths):
        cfg = EvalConfig(actors=False, stuck_timeout=30)
        r = rollout(ConstantPolicy(0.0, 0), eval_town, paths[0].route, paths[0].path, cfg, SimConfig(),
                    condition_seed=2)
        assert r.termination == "stuck" and not r.success
        assert r.failure_cause == "throttle"

    def test_collision_does_not_fail(self, eval_town, paths):
        ep = paths[0]
        sim = SimConfig()
        car = _parked_on_route(ep.route, 60.0, sim)
        r = rollout(BlindExpert(), eval_town, ep.route, ep.path, EvalConfig(actors=False), sim,
                    condition_seed=2, actor_states=[car])
        assert r.success
        assert r.collisions["vehicle"] == 1  # one contiguous contact, counted once
        assert 0.0 < r.distance_non_normal < r.distance_total

    def test_deterministic(self, eval_town, paths):
        cfg = EvalConfig(actors=True)
        a = rollout(ExpertPolicy(), eval_town, paths[1].route, paths[1].path, cfg, SimConfig(), condition_seed=4,
                    actor_seed=9)
        b = rollout(ExpertPolicy(), eval_town, paths[1].route, paths[1].path, cfg, SimConfig(), condition_seed=4,
                    actor_seed=9)
        assert a == b

    def test_trace(self, eval_town, paths):
        trace = []
        r = rollout(ExpertPolicy(), eval_town, paths[2].route, paths[2].path, EvalConfig(actors=False), SimConfig(),
                    condition_seed=6, trace=trace)
        assert len(trace) == r.ticks
        assert {"x", "y", "angle", "steer", "throttle", "expert_steer"} <= set(trace[0])

    def test_evaluate_report(self, eval_town, paths):
        rep, traces = evaluate(ExpertPolicy(), eval_town, paths, EvalConfig(actors=False), SimConfig())
        assert rep.success_rate == 100.0 and rep.normal_driving_rate == 100.0
        assert traces == [None, None, None]


def _parked_on_route(route, s, sim):
    seg = np.hypot(*np.diff(route, axis=0).T)
    i = int(np.searchsorted(np.cumsum(seg), s))
    h = route[i + 1] - route[i]
    h = h / np.linalg.norm(h)
    pose = Pose(route[i], h)
    script = ActorScript(ActorKind.VEHICLE, np.array([route[i], route[i] + h]), 0.0, False)
    return ActorState(100, ActorKind.VEHICLE, pose, sim.vehicle_half_extents, script, 0.0)
