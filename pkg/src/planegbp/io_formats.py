"""Serialisation: versioned JSON artefacts, TUM trajectories, CSV reports.

Every JSON artefact carries a format name and integer version in its header;
readers reject unknown names/versions. Floats go through Python's shortest
round-trip repr, so write-then-read reproduces values exactly. Parse failures
raise FormatError annotated with the byte offset (JSON) or line number
(text formats).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError
from .gaussians import GaussianInfo, to_moments
from .geometry import CameraModel, Pose
from .graph import FactorGraph

FORMAT_VERSIONS = {
    "factor-graph": 1,
    "experiment-config": 1,
    "event-log": 1,
    "reconstruction": 1,
    "packets": 1,
    "comparison": 1,
    "scene-spec": 1,
    "summary": 1,
}


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path, format_name: str, body: dict) -> None:
    if format_name not in FORMAT_VERSIONS:
        raise FormatError(f"unknown format {format_name!r}")
    doc = {"format": format_name, "version": FORMAT_VERSIONS[format_name]}
    doc.update(_jsonable(body))
    Path(path).write_text(json.dumps(doc, indent=1))


def read_json(path, format_name: str) -> dict:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(
            f"{path}: malformed JSON at byte offset {exc.pos}: {exc.msg}"
        ) from exc
    if doc.get("format") != format_name:
        raise FormatError(
            f"{path}: expected format {format_name!r}, found {doc.get('format')!r}"
        )
    want = FORMAT_VERSIONS[format_name]
    if doc.get("version") != want:
        raise FormatError(
            f"{path}: unsupported {format_name} version {doc.get('version')} "
            f"(reader supports {want})"
        )
    return doc


# ---------------------------------------------------------------------------
# Factor graph
# ---------------------------------------------------------------------------

def graph_to_dict(graph: FactorGraph) -> dict:
    variables = []
    for vid in sorted(graph.variables):
        node = graph.variables[vid]
        try:
            mom = to_moments(node.belief)
            mean = mom.mean.tolist()
            cov = mom.cov.tolist()
        except Exception:
            mean = node.mean.tolist()
            cov = None
        variables.append({
            "id": vid,
            "kind": node.kind,
            "mean": mean,
            "covariance": cov,
            "belief_eta": node.belief.eta.tolist(),
            "belief_lam": node.belief.lam.tolist(),
            "prior_eta": node.prior.eta.tolist(),
            "prior_lam": node.prior.lam.tolist(),
            "mean_cache": node.mean.tolist(),
        })
    factors = []
    for fid in sorted(graph.factors):
        fac = graph.factors[fid]
        factors.append({
            "id": fid,
            "kind": fac.kind,
            "adjacency": list(fac.adjacency),
            "measurement": None if fac.measurement is None else fac.measurement.tolist(),
            "sigma": fac.sigma.tolist(),
            "payload": _jsonable(fac.payload),
            "robust": fac.robust,
            "robust_scale": fac.robust_scale,
        })
    camera = None
    if graph.camera is not None:
        c = graph.camera
        camera = {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                  "width": c.width, "height": c.height}
    return {"camera": camera, "variables": variables, "factors": factors}


def graph_from_dict(doc: dict) -> FactorGraph:
    camera = CameraModel(**doc["camera"]) if doc.get("camera") else None
    graph = FactorGraph(camera=camera)
    for v in doc["variables"]:
        prior = GaussianInfo(np.asarray(v["prior_eta"]), np.asarray(v["prior_lam"]))
        graph.add_variable(v["kind"], np.asarray(v["mean_cache"]), prior, _fixed_id=v["id"])
        node = graph.variables[v["id"]]
        node.belief = GaussianInfo(np.asarray(v["belief_eta"]), np.asarray(v["belief_lam"]))
    for f in doc["factors"]:
        payload = dict(f["payload"])
        for key in ("p_conv", "pi_conv", "A"):
            if key in payload:
                payload[key] = np.asarray(payload[key], float)
        if "constituents" in payload:
            payload["constituents"] = [
                (np.asarray(z, float), np.asarray(p, float))
                for z, p in payload["constituents"]
            ]
        graph.add_factor(
            f["kind"], tuple(f["adjacency"]),
            None if f["measurement"] is None else np.asarray(f["measurement"]),
            np.asarray(f["sigma"]),
            payload=payload, robust=f["robust"], robust_scale=f["robust_scale"],
            _fixed_id=f["id"],
        )
    return graph


def write_graph(path, graph: FactorGraph) -> None:
    write_json(path, "factor-graph", graph_to_dict(graph))


def read_graph(path) -> FactorGraph:
    return graph_from_dict(read_json(path, "factor-graph"))


# ---------------------------------------------------------------------------
# TUM trajectories
# ---------------------------------------------------------------------------

def write_tum(path, timestamps, poses_cw) -> None:
    """World-to-camera poses are stored as camera-to-world (TUM convention)."""
    lines = []
    for t, pose in zip(timestamps, poses_cw):
        inv = pose.inverse()
        q = Rotation.from_matrix(inv.R).as_quat()  # x, y, z, w
        vals = [t, *inv.t, *q]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path):
    """Returns (timestamps, world-to-camera poses)."""
    timestamps, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(
                f"{path}:{lineno}: expected 8 fields (t tx ty tz qx qy qz qw), "
                f"got {len(parts)}"
            )
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        t, tx, ty, tz, qx, qy, qz, qw = vals
        R_wc = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
        pose_wc = Pose.from_rt(R_wc, np.array([tx, ty, tz]))
        timestamps.append(t)
        poses.append(pose_wc.inverse())
    return timestamps, poses


# ---------------------------------------------------------------------------
# CSV reports
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt(row[k]) if isinstance(row, dict) else _fmt(row[i])
                             for i, k in enumerate(fieldnames)])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for row in reader:
            out = {}
            for k, v in row.items():
                try:
                    out[k] = int(v)
                except ValueError:
                    try:
                        out[k] = float(v)
                    except ValueError:
                        out[k] = v
            rows.append(out)
        return rows


ITERATION_FIELDS = ["iteration", "avg_reproj_px", "total_energy",
                    "n_relinearised", "n_dropped", "n_factors", "n_variables"]

COST_FIELDS = ["sweep", "hops", "max_router_load", "n_routing_nodes"]


def write_iteration_csv(path, reports) -> None:
    rows = [
        {k: getattr(r, k) for k in ITERATION_FIELDS} for r in reports
    ]
    write_csv(path, ITERATION_FIELDS, rows)


def write_cost_csv(path, cost_records) -> None:
    write_csv(path, COST_FIELDS, cost_records)


# ---------------------------------------------------------------------------
# JSON schemas (for artefact validation in tests)
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_NUM_ARRAY = {"type": "array", "items": _NUM}
_MATRIX = {"type": "array", "items": _NUM_ARRAY}

GRAPH_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "variables", "factors"],
    "properties": {
        "format": {"const": "factor-graph"},
        "version": {"type": "integer"},
        "camera": {"type": ["object", "null"]},
        "variables": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "kind", "mean", "covariance",
                             "prior_eta", "prior_lam"],
                "properties": {
                    "id": {"type": "integer"},
                    "kind": {"type": "string"},
                    "mean": _NUM_ARRAY,
                    "covariance": {"anyOf": [_MATRIX, {"type": "null"}]},
                    "prior_eta": _NUM_ARRAY,
                    "prior_lam": _MATRIX,
                },
            },
        },
        "factors": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "kind", "adjacency", "measurement", "sigma"],
                "properties": {
                    "id": {"type": "integer"},
                    "kind": {"type": "string"},
                    "adjacency": {"type": "array", "items": {"type": "integer"}},
                    "sigma": _NUM_ARRAY,
                },
            },
        },
    },
}

EVENT_LOG_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "events"],
    "properties": {
        "format": {"const": "event-log"},
        "events": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["event", "iteration"],
                "properties": {
                    "event": {"enum": ["integrate", "confirm", "reject", "merge"]},
                    "iteration": {"type": "integer"},
                },
            },
        },
    },
}

RECONSTRUCTION_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "planes", "raw_points"],
    "properties": {
        "format": {"const": "reconstruction"},
        "planes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["rigid_id", "normal", "distance", "hull"],
                "properties": {
                    "rigid_id": {"type": "integer"},
                    "normal": _NUM_ARRAY,
                    "distance": _NUM,
                    "hull": _MATRIX,
                },
            },
        },
        "raw_points": _MATRIX,
    },
}

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "solver", "seed", "n_iterations"],
}
