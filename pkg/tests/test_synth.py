import math

import numpy as np
import pytest

from crashkit import geom
from crashkit.filtering import check_collision_involvement
from crashkit.scenario import AgentPose, dumps, scenario_to_dict, validate_scenario
from crashkit.structured import Action, Orientation, StructuredAgentSpec, StructuredScene, TemplateCatalog, expand_template
from crashkit.synth import (
    PlacementError,
    SynthesisConfig,
    generate_corpus,
    load_bundled_map,
    place_agents,
    rollout_agent,
    synthesize,
)

STRAIGHT = load_bundled_map("straight_bidir")
CROSS = load_bundled_map("crossroads")
CATALOG = TemplateCatalog.load()


def collides(s):
    """Independent check: any step where the ego box meets another box."""
    ego = s.ego.boxes()
    for o in s.others:
        if geom.boxes_intersect_array(ego, o.boxes()).any():
            return True
    return False


def test_opposing_agent_placement_predicates():
    spec = StructuredAgentSpec(1, 1, Orientation.ParallelOpposite, 2, Action.KeepSpeed)
    scene = StructuredScene(StructuredAgentSpec(speed_bin=4), (spec,))
    placement = place_agents(scene, STRAIGHT)
    ego, other = placement.poses
    local = geom.to_local_frame(np.array([[other.x, other.y]]), (ego.x, ego.y), ego.heading)[0]
    assert local[0] >= 0 and local[1] >= 0
    assert 20.0 <= math.hypot(*local) < 40.0
    assert abs(geom.normalize_angle(other.heading - ego.heading - math.pi)) < 1e-9
    assert other.speed == 6.25
    assert ego.speed == 11.25


def test_ego_only_scene():
    s = synthesize(StructuredScene(StructuredAgentSpec(speed_bin=3)), STRAIGHT)
    assert len(s.tracks) == 1 and s.ego.agent_id == 0


def test_perpendicular_request_on_parallel_map_fails():
    spec = StructuredAgentSpec(1, 1, Orientation.PerpendicularLeft, 2, Action.KeepSpeed)
    with pytest.raises(PlacementError, match="no compatible lane for agent 1"):
        place_agents(StructuredScene(StructuredAgentSpec(), (spec,)), STRAIGHT)


def test_keep_speed_displacement():
    states = rollout_agent(AgentPose(geom.Point2(0.0, 0.0), 0.3, 10.0), Action.KeepSpeed, SynthesisConfig())
    assert np.hypot(*(states[-1, :2] - states[0, :2])) == pytest.approx(49.0, abs=1e-9)


def test_stop_reaches_zero_at_two_seconds():
    states = rollout_agent(AgentPose(geom.Point2(0.0, 0.0), 0.0, 5.0), Action.Stop, SynthesisConfig())
    assert states[19, 3] > 0 and states[20, 3] == 0.0
    assert np.all(states[21:, :2] == states[21, :2])


def test_turn_holds_heading_after_two_seconds():
    cfg = SynthesisConfig()
    states = rollout_agent(AgentPose(geom.Point2(0.0, 0.0), 0.0, 8.0), Action.TurnLeft, cfg)
    assert states[20, 2] == pytest.approx(0.7, abs=1e-12)
    assert np.all(states[20:, 2] == states[20, 2])


def test_speed_never_negative():
    for action in Action:
        states = rollout_agent(AgentPose(geom.Point2(0.0, 0.0), 0.0, 1.0), action, SynthesisConfig())
        assert np.all(states[:, 3] >= 0)


def test_every_collision_template_collides_on_its_maps():
    for t in CATALOG.of_kind("collision"):
        for name in t.maps:
            m = load_bundled_map(name)
            _, scene = expand_template(t, t.default_bindings())
            s = synthesize(scene, m)
            assert collides(s), (t.name, name)
            assert check_collision_involvement(s).collided


def test_regular_templates_do_not_collide():
    for t in CATALOG.of_kind("regular"):
        for name in t.maps:
            _, scene = expand_template(t, t.default_bindings())
            assert not collides(synthesize(scene, load_bundled_map(name))), (t.name, name)


def test_synthesized_scenarios_validate():
    for t in CATALOG:
        for name in t.maps:
            _, scene = expand_template(t, t.default_bindings())
            assert validate_scenario(synthesize(scene, load_bundled_map(name))) == []


def test_synthesis_is_deterministic():
    t = CATALOG["cross_left"]
    _, scene = expand_template(t, t.default_bindings())
    cfg = SynthesisConfig(position_jitter=2.0, speed_jitter=0.5, rng_seed=9)
    a = dumps(scenario_to_dict(synthesize(scene, CROSS, cfg)))
    b = dumps(scenario_to_dict(synthesize(scene, CROSS, cfg)))
    assert a == b


def test_thirty_two_agent_scene():
    others = tuple(
        StructuredAgentSpec(q, d, o, 2, Action.KeepSpeed)
        for q, o in ((1, Orientation.ParallelOpposite), (2, Orientation.ParallelOpposite))
        for d in range(4)
    )
    others = tuple((others * 4)[:31])
    s = synthesize(StructuredScene(StructuredAgentSpec(speed_bin=2), others), STRAIGHT)
    assert len(s.tracks) == 32


def test_generate_corpus_counts_and_splits():
    result = generate_corpus(CATALOG.of_kind("collision"), 20, seed=4, test_fraction=0.5)
    ds = result.dataset
    assert len(ds) + len(result.failures) == 20
    assert set(ds.splits.values()) <= {"train", "test"}
    again = generate_corpus(CATALOG.of_kind("collision"), 20, seed=4, test_fraction=0.5).dataset
    assert again.scenarios == ds.scenarios and again.splits == ds.splits
