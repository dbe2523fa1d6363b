"""Top-down SVG plots of scenarios: lanes, agent footprints over time, an optional ego plan."""

from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

from crashkit import geom
from crashkit.scenario import EGO_ID, Scenario

EGO_COLOR = "#d62728"
AGENT_COLOR = "#1f77b4"
PLAN_COLOR = "#2ca02c"
LANE_COLOR = "#999999"


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _points(xy: np.ndarray) -> str:
    return " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in xy)


def render_svg(
    scenario: Scenario,
    plan: np.ndarray | None = None,
    every: int = 5,
    margin: float = 10.0,
    scale: float = 4.0,
) -> str:
    """SVG document for ``scenario``.

    :param plan: optional world-frame ``(T, >=2)`` ego trajectory drawn as a polyline
    :param every: draw footprints every ``every`` steps
    :param scale: pixels per meter
    """
    all_xy = [t.states[:, :2] for t in scenario.tracks]
    if plan is not None:
        all_xy.append(np.asarray(plan)[:, :2])
    xy = np.concatenate(all_xy)
    lo = xy.min(axis=0) - margin
    hi = xy.max(axis=0) + margin
    w, h = hi - lo
    svg = ET.Element(
        "svg",
        xmlns="http://www.w3.org/2000/svg",
        width=_fmt(w * scale),
        height=_fmt(h * scale),
        viewBox=f"{_fmt(lo[0])} {_fmt(-hi[1])} {_fmt(w)} {_fmt(h)}",
    )
    ET.SubElement(svg, "rect", x=_fmt(lo[0]), y=_fmt(-hi[1]), width=_fmt(w), height=_fmt(h), fill="white")
    # world y points up; SVG y points down
    world = ET.SubElement(svg, "g", transform="scale(1,-1)")

    lanes = ET.SubElement(world, "g", id="lanes", stroke=LANE_COLOR, fill="none")
    for seg in scenario.map.segments:
        ET.SubElement(
            lanes,
            "line",
            x1=_fmt(seg.start.x),
            y1=_fmt(seg.start.y),
            x2=_fmt(seg.end.x),
            y2=_fmt(seg.end.y),
            **{"stroke-width": "0.3", "stroke-dasharray": "1,1"},
        )

    agents = ET.SubElement(world, "g", id="agents")
    n = len(scenario.ego.poses)
    for track in scenario.tracks:
        color = EGO_COLOR if track.agent_id == EGO_ID else AGENT_COLOR
        g = ET.SubElement(agents, "g", fill=color, stroke=color, **{"data-agent": str(track.agent_id)})
        boxes = track.boxes()
        for i in range(0, len(boxes), every):
            alpha = 0.15 + 0.6 * i / max(1, n - 1)
            corners = geom.box_corners(boxes[i])
            ET.SubElement(
                g, "polygon", points=_points(corners), **{"fill-opacity": f"{alpha:.2f}", "stroke-width": "0.1"}
            )
        ET.SubElement(g, "polyline", points=_points(track.states[:, :2]), fill="none", **{"stroke-width": "0.2"})

    if plan is not None:
        ET.SubElement(
            world,
            "polyline",
            id="plan",
            points=_points(np.asarray(plan)[:, :2]),
            fill="none",
            stroke=PLAN_COLOR,
            **{"stroke-width": "0.4"},
        )
    ET.indent(svg)
    return ET.tostring(svg, encoding="unicode", xml_declaration=True) + "\n"
