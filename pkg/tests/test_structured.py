import itertools
import json

import pytest

from crashkit.structured import (
    Action,
    NoTemplateMatch,
    Orientation,
    RecordedInterpreterClient,
    SceneCountError,
    SceneParseError,
    SceneRangeError,
    SceneSyntaxError,
    StructuredAgentSpec,
    StructuredScene,
    TemplateCatalog,
    TemplateError,
    TemplateInterpreterClient,
    emit_structured_scene,
    expand_template,
    interpret,
    parse_structured_scene,
)

CATALOG = TemplateCatalog.load()

TWO_AGENTS = """{
  "ego": {"speed_bin": 4, "action": "KeepSpeed"},
  "others": [{"quadrant": 1, "distance_bin": 0, "orientation": "ParallelOpposite",
              "speed_bin": 2, "action": "KeepSpeed"}]
}"""


def test_parse_two_agent_document():
    scene = parse_structured_scene(TWO_AGENTS)
    assert len(scene.others) == 1
    other = scene.others[0]
    assert (other.quadrant, other.distance_bin, other.orientation, other.speed_bin, other.action) == (
        1,
        0,
        Orientation.ParallelOpposite,
        2,
        Action.KeepSpeed,
    )


def test_quadrant_zero_is_range_error():
    doc = json.loads(TWO_AGENTS)
    doc["others"][0]["quadrant"] = 0
    with pytest.raises(SceneRangeError):
        parse_structured_scene(json.dumps(doc))


def test_syntax_error_carries_position():
    with pytest.raises(SceneSyntaxError) as info:
        parse_structured_scene('{"ego": {"speed_bin": 1,\n "action": }}')
    assert info.value.line == 2


def test_too_many_agents_is_count_error():
    doc = json.loads(TWO_AGENTS)
    doc["others"] = doc["others"] * 32
    with pytest.raises(SceneCountError):
        parse_structured_scene(json.dumps(doc))


def test_unknown_key_rejected():
    doc = json.loads(TWO_AGENTS)
    doc["others"][0]["colour"] = "red"
    with pytest.raises(SceneParseError, match="unknown keys"):
        parse_structured_scene(json.dumps(doc))


def test_parse_emit_identity_over_all_enum_and_bin_values():
    for q, d, o, v, a in itertools.product(range(1, 5), range(5), Orientation, range(5), Action):
        spec = StructuredAgentSpec(q, d, o, v, a)
        scene = StructuredScene(StructuredAgentSpec(speed_bin=v, action=a), (spec,))
        assert parse_structured_scene(emit_structured_scene(scene)) == scene
        assert StructuredAgentSpec.from_vector(spec.to_vector()) == spec


def test_vector_has_eight_slots_with_reserved_zeros():
    vec = StructuredAgentSpec(3, 2, Orientation.PerpendicularLeft, 4, Action.Stop).to_vector()
    assert len(vec) == 8 and vec[5:] == [0, 0, 0]


def test_catalog_round_trip_for_every_binding():
    for t in CATALOG:
        for bindings in t.all_bindings():
            text, scene = expand_template(t, bindings)
            emitted = emit_structured_scene(scene)
            assert emit_structured_scene(parse_structured_scene(emitted)) == emitted
            assert text and "{" not in text


def test_catalog_covers_collision_directions():
    collision = CATALOG.of_kind("collision")
    assert len(collision) >= 12
    quadrants = {o.quadrant for t in collision for o in expand_template(t, t.default_bindings())[1].others}
    assert {1, 2, 4} <= quadrants
    assert {m for t in collision for m in t.maps} == {"straight_bidir", "crossroads"}


def test_head_on_front_binding():
    t = CATALOG["head_on"]
    bindings = dict(t.default_bindings(), direction="front")
    text, scene = expand_template(t, bindings)
    assert "front" in text
    assert len(scene.others) == 1
    assert scene.others[0].quadrant == 1
    assert scene.others[0].orientation is Orientation.ParallelOpposite


def test_expand_is_deterministic():
    t = CATALOG["rear_end"]
    b = t.default_bindings()
    assert expand_template(t, b) == expand_template(t, b)


def test_expand_unknown_and_missing_slots():
    t = CATALOG["head_on"]
    with pytest.raises(TemplateError, match="unknown slot 'weather'"):
        expand_template(t, dict(t.default_bindings(), weather="rain"))
    partial = t.default_bindings()
    partial.pop("direction")
    with pytest.raises(TemplateError, match="missing binding for slot 'direction'"):
        expand_template(t, partial)


def test_unknown_template_name():
    with pytest.raises(TemplateError, match="unknown template"):
        CATALOG["no_such_template"]


def test_template_backend_returns_paired_scene():
    client = TemplateInterpreterClient(CATALOG)
    t = CATALOG["cross_left"]
    text, scene = expand_template(t, t.default_bindings())
    assert interpret(text, client) == scene
    # whitespace and case do not matter to the lookup
    assert interpret("  " + text.upper(), client) == scene


def test_template_backend_unknown_prompt():
    with pytest.raises(NoTemplateMatch):
        interpret("a cow crosses the motorway", TemplateInterpreterClient(CATALOG))


def test_malformed_client_output_carries_payload():
    client = RecordedInterpreterClient({"p": "ego: fast"})
    with pytest.raises(SceneParseError) as info:
        interpret("p", client)
    assert info.value.payload == "ego: fast"
