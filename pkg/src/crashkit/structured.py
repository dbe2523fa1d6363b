"""Structured per-agent scene descriptions, the prompt template catalog and the
interpreter-client boundary.

Scene document format (JSON)::

    {"ego": {"quadrant": 1, "distance_bin": 0, "orientation": "ParallelSame",
             "speed_bin": 4, "action": "KeepSpeed"},
     "others": [{...same five fields...}, ...]}

Quadrants are taken in the ego frame (x forward, y left): 1 front-left
(x >= 0, y >= 0), 2 rear-left, 3 rear-right, 4 front-right. Orientation names
the direction the agent is heading relative to the ego: ``PerpendicularLeft``
points toward the ego's left side, ``PerpendicularRight`` toward its right.
"""

from __future__ import annotations

import enum
import itertools
import json
import re
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Protocol

MAX_SCENE_AGENTS = 32
DISTANCE_BIN_WIDTH = 20.0  # [m]
SPEED_BIN_WIDTH = 2.5  # [m/s]
VECTOR_DIM = 8

AGENT_FIELDS = ("quadrant", "distance_bin", "orientation", "speed_bin", "action")


class Orientation(enum.Enum):
    ParallelSame = "ParallelSame"
    ParallelOpposite = "ParallelOpposite"
    PerpendicularLeft = "PerpendicularLeft"
    PerpendicularRight = "PerpendicularRight"


class Action(enum.Enum):
    TurnLeft = "TurnLeft"
    TurnRight = "TurnRight"
    Accelerate = "Accelerate"
    Decelerate = "Decelerate"
    KeepSpeed = "KeepSpeed"
    Stop = "Stop"


class SceneParseError(ValueError):
    """Raised for any malformed scene document; ``payload`` holds the raw text."""

    def __init__(self, message: str, payload: str | None = None):
        super().__init__(message)
        self.payload = payload


class SceneSyntaxError(SceneParseError):
    def __init__(self, message: str, line: int, column: int, payload: str | None = None):
        super().__init__(f"{message} (line {line}, column {column})", payload)
        self.line = line
        self.column = column


class SceneRangeError(SceneParseError):
    pass


class SceneCountError(SceneParseError):
    pass


class TemplateError(ValueError):
    pass


class NoTemplateMatch(LookupError):
    pass


@dataclass(frozen=True)
class StructuredAgentSpec:
    quadrant: int = 1
    distance_bin: int = 0
    orientation: Orientation = Orientation.ParallelSame
    speed_bin: int = 0
    action: Action = Action.KeepSpeed

    def __post_init__(self) -> None:
        if self.quadrant not in (1, 2, 3, 4):
            raise SceneRangeError(f"quadrant must be 1-4, got {self.quadrant}")
        if self.distance_bin < 0:
            raise SceneRangeError(f"distance_bin must be >= 0, got {self.distance_bin}")
        if self.speed_bin < 0:
            raise SceneRangeError(f"speed_bin must be >= 0, got {self.speed_bin}")

    @property
    def distance_range(self) -> tuple[float, float]:
        return DISTANCE_BIN_WIDTH * self.distance_bin, DISTANCE_BIN_WIDTH * (self.distance_bin + 1)

    @property
    def distance_midpoint(self) -> float:
        return DISTANCE_BIN_WIDTH * (self.distance_bin + 0.5)

    @property
    def speed_midpoint(self) -> float:
        return SPEED_BIN_WIDTH * (self.speed_bin + 0.5)

    def to_vector(self) -> list[int]:
        """The 8-slot vector form; the last three slots are reserved and zero."""
        return [
            self.quadrant,
            self.distance_bin,
            list(Orientation).index(self.orientation),
            self.speed_bin,
            list(Action).index(self.action),
            0,
            0,
            0,
        ]

    @classmethod
    def from_vector(cls, vec: list[int]) -> StructuredAgentSpec:
        if len(vec) != VECTOR_DIM:
            raise SceneRangeError(f"agent vector must have {VECTOR_DIM} entries")
        if any(vec[5:]):
            raise SceneRangeError("reserved vector slots must be zero")
        try:
            orientation = list(Orientation)[vec[2]]
            action = list(Action)[vec[4]]
        except IndexError as exc:
            raise SceneRangeError(f"enum index out of range in {vec}") from exc
        return cls(vec[0], vec[1], orientation, vec[3], action)

    def to_dict(self) -> dict[str, Any]:
        return {
            "quadrant": self.quadrant,
            "distance_bin": self.distance_bin,
            "orientation": self.orientation.value,
            "speed_bin": self.speed_bin,
            "action": self.action.value,
        }


@dataclass(frozen=True)
class StructuredScene:
    ego: StructuredAgentSpec
    others: tuple[StructuredAgentSpec, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "others", tuple(self.others))
        if 1 + len(self.others) > MAX_SCENE_AGENTS:
            raise SceneCountError(f"at most {MAX_SCENE_AGENTS} agents per scene, got {1 + len(self.others)}")

    def to_vectors(self) -> list[list[int]]:
        return [self.ego.to_vector()] + [o.to_vector() for o in self.others]


def _agent_from_dict(obj: Any, where: str, *, ego: bool) -> StructuredAgentSpec:
    if not isinstance(obj, dict):
        raise SceneParseError(f"{where}: expected an object")
    unknown = set(obj) - set(AGENT_FIELDS)
    if unknown:
        raise SceneParseError(f"{where}: unknown keys {sorted(unknown)}")
    required = ("speed_bin", "action") if ego else AGENT_FIELDS
    missing = [k for k in required if k not in obj]
    if missing:
        raise SceneParseError(f"{where}: missing keys {missing}")
    kwargs: dict[str, Any] = {}
    for key in ("quadrant", "distance_bin", "speed_bin"):
        if key in obj:
            value = obj[key]
            if isinstance(value, bool) or not isinstance(value, int):
                raise SceneParseError(f"{where}.{key}: expected an integer, got {value!r}")
            kwargs[key] = value
    try:
        if "orientation" in obj:
            kwargs["orientation"] = Orientation(obj["orientation"])
        kwargs["action"] = Action(obj["action"])
    except ValueError as exc:
        raise SceneRangeError(f"{where}: {exc}") from exc
    try:
        return StructuredAgentSpec(**kwargs)
    except SceneRangeError as exc:
        raise SceneRangeError(f"{where}: {exc}") from exc


def scene_from_dict(doc: Any) -> StructuredScene:
    if not isinstance(doc, dict):
        raise SceneParseError("scene document must be an object")
    unknown = set(doc) - {"ego", "others"}
    if unknown:
        raise SceneParseError(f"unknown keys {sorted(unknown)}")
    if "ego" not in doc:
        raise SceneParseError("missing key 'ego'")
    others = doc.get("others", [])
    if not isinstance(others, list):
        raise SceneParseError("'others' must be a list")
    if 1 + len(others) > MAX_SCENE_AGENTS:
        raise SceneCountError(f"at most {MAX_SCENE_AGENTS} agents per scene, got {1 + len(others)}")
    ego = _agent_from_dict(doc["ego"], "ego", ego=True)
    return StructuredScene(ego, tuple(_agent_from_dict(o, f"others[{i}]", ego=False) for i, o in enumerate(others)))


def parse_structured_scene(text: str) -> StructuredScene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneSyntaxError(exc.msg, exc.lineno, exc.colno, payload=text) from exc
    try:
        return scene_from_dict(doc)
    except SceneParseError as exc:
        exc.payload = text
        raise


def scene_to_dict(scene: StructuredScene) -> dict[str, Any]:
    return {"ego": scene.ego.to_dict(), "others": [o.to_dict() for o in scene.others]}


def emit_structured_scene(scene: StructuredScene) -> str:
    """Canonical text form: fixed key order, two-space indent, trailing newline."""
    return json.dumps(scene_to_dict(scene), indent=2) + "\n"


# -- prompt templates ----------------------------------------------------------

_TEXT_SLOT = re.compile(r"\{(\w+)\}")
_SCENE_SLOT = re.compile(r"^\{(\w+)\.(\w+)\}$")


@dataclass(frozen=True)
class PromptTemplate:
    """A collision (or regular-traffic) description with slot variables.

    ``slots`` maps each slot name to its domain: value label -> attributes that
    scene placeholders of the form ``"{slot.attr}"`` pull from.
    """

    name: str
    text: str
    slots: Mapping[str, Mapping[str, Mapping[str, Any]]]
    scene: Mapping[str, Any]
    defaults: Mapping[str, str] = field(default_factory=dict)
    kind: str = "collision"
    maps: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "maps", tuple(self.maps))
        for slot in _TEXT_SLOT.findall(self.text):
            if slot not in self.slots:
                raise TemplateError(f"template {self.name!r}: text slot {slot!r} has no declared domain")
        for slot, attr in _scene_placeholders(self.scene):
            if slot not in self.slots:
                raise TemplateError(f"template {self.name!r}: scene slot {slot!r} has no declared domain")
            for label, attrs in self.slots[slot].items():
                if attr not in attrs:
                    raise TemplateError(f"template {self.name!r}: value {label!r} of {slot!r} lacks {attr!r}")
        for slot, domain in self.slots.items():
            if not domain:
                raise TemplateError(f"template {self.name!r}: slot {slot!r} has an empty domain")
        for slot, label in self.defaults.items():
            if slot not in self.slots or label not in self.slots[slot]:
                raise TemplateError(f"template {self.name!r}: bad default {slot}={label!r}")

    def default_bindings(self) -> dict[str, str]:
        return {slot: self.defaults.get(slot, next(iter(domain))) for slot, domain in self.slots.items()}

    def all_bindings(self) -> list[dict[str, str]]:
        names = list(self.slots)
        return [dict(zip(names, combo)) for combo in itertools.product(*(list(self.slots[n]) for n in names))]


def _scene_placeholders(node: Any) -> list[tuple[str, str]]:
    if isinstance(node, dict):
        return [p for v in node.values() for p in _scene_placeholders(v)]
    if isinstance(node, list):
        return [p for v in node for p in _scene_placeholders(v)]
    if isinstance(node, str):
        m = _SCENE_SLOT.match(node)
        return [(m.group(1), m.group(2))] if m else []
    return []


def _substitute(node: Any, template: PromptTemplate, bindings: Mapping[str, str]) -> Any:
    if isinstance(node, dict):
        return {k: _substitute(v, template, bindings) for k, v in node.items()}
    if isinstance(node, list):
        return [_substitute(v, template, bindings) for v in node]
    if isinstance(node, str):
        m = _SCENE_SLOT.match(node)
        if m:
            slot, attr = m.groups()
            return template.slots[slot][bindings[slot]][attr]
    return node


def expand_template(t: PromptTemplate, bindings: Mapping[str, str]) -> tuple[str, StructuredScene]:
    """Render the prompt text and its paired scene for one slot binding."""
    for slot in t.slots:
        if slot not in bindings:
            raise TemplateError(f"template {t.name!r}: missing binding for slot {slot!r}")
    for slot, label in bindings.items():
        if slot not in t.slots:
            raise TemplateError(f"template {t.name!r}: unknown slot {slot!r}")
        if label not in t.slots[slot]:
            raise TemplateError(f"template {t.name!r}: {label!r} is not in the domain of slot {slot!r}")
    text = _TEXT_SLOT.sub(lambda m: bindings[m.group(1)], t.text)
    scene = scene_from_dict(_substitute(t.scene, t, bindings))
    return text, scene


def template_from_dict(d: Mapping[str, Any]) -> PromptTemplate:
    return PromptTemplate(
        name=d["name"],
        text=d["text"],
        slots=d.get("slots", {}),
        scene=d["scene"],
        defaults=d.get("defaults", {}),
        kind=d.get("kind", "collision"),
        maps=tuple(d.get("maps", ())),
    )


class TemplateCatalog:
    def __init__(self, templates: list[PromptTemplate]):
        names = [t.name for t in templates]
        if len(set(names)) != len(names):
            raise TemplateError("duplicate template names in catalog")
        self.templates = {t.name: t for t in templates}

    def __getitem__(self, name: str) -> PromptTemplate:
        try:
            return self.templates[name]
        except KeyError:
            raise TemplateError(f"unknown template {name!r}") from None

    def __iter__(self):
        return iter(self.templates.values())

    def __len__(self) -> int:
        return len(self.templates)

    def of_kind(self, kind: str) -> list[PromptTemplate]:
        return [t for t in self if t.kind == kind]

    def select(self, spec: str) -> list[PromptTemplate]:
        """Resolve ``all``, a kind name, or a comma-separated list of template names."""
        if spec == "all":
            return list(self)
        if spec in {t.kind for t in self}:
            return self.of_kind(spec)
        return [self[name.strip()] for name in spec.split(",") if name.strip()]

    @classmethod
    def load(cls, path: str | Path | None = None) -> TemplateCatalog:
        if path is None:
            text = resources.files("crashkit.data").joinpath("templates.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        doc = json.loads(text)
        return cls([template_from_dict(d) for d in doc["templates"]])


# -- interpreter clients -------------------------------------------------------


class InterpreterClient(Protocol):
    """Text in, scene document text out."""

    def complete(self, prompt: str) -> str: ...


def _normalize_prompt(text: str) -> str:
    return " ".join(text.split()).lower()


class TemplateInterpreterClient:
    """Offline backend: answers with the scene paired to a catalog prompt."""

    def __init__(self, catalog: TemplateCatalog):
        self._index: dict[str, str] = {}
        for t in catalog:
            for bindings in t.all_bindings():
                text, scene = expand_template(t, bindings)
                self._index.setdefault(_normalize_prompt(text), emit_structured_scene(scene))

    def complete(self, prompt: str) -> str:
        try:
            return self._index[_normalize_prompt(prompt)]
        except KeyError:
            raise NoTemplateMatch(f"no template match for prompt: {prompt[:80]!r}") from None


class RecordedInterpreterClient:
    """Replays canned responses; the test double for a network backend."""

    def __init__(self, responses: Mapping[str, str]):
        self.responses = dict(responses)

    def complete(self, prompt: str) -> str:
        try:
            return self.responses[prompt]
        except KeyError:
            raise NoTemplateMatch(f"no recorded response for prompt: {prompt[:80]!r}") from None


class HttpInterpreterClient:
    """POSTs the prompt as plain text and expects a scene document in the body.

    The remote side is expected to wrap an instruction-following language model
    primed with the scene format; no retries are attempted here.
    """

    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        req = urllib.request.Request(
            self.url, data=prompt.encode("utf-8"), headers={"Content-Type": "text/plain; charset=utf-8"}
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read().decode("utf-8")


def interpret(prompt: str, client: InterpreterClient) -> StructuredScene:
    payload = client.complete(prompt)
    try:
        return parse_structured_scene(payload)
    except SceneParseError as exc:
        exc.payload = payload
        raise
