"""Experiment harness: the system loop wiring front-end packets into the
graph, propagation sweeps, periodic hypothesis tests and merge passes, and
all output artefacts.

One logical clock drives everything: keyframes arrive every
`keyframe_interval` iterations, hypothesis tests run every test period and
merges every merge period, so each run is exactly reproducible from its
config and seed (or from a recorded packet stream).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .abstraction import AbstractionConfig, AbstractionManager
from .engine import (
    DirectTransport,
    GbpConfig,
    GbpEngine,
    IterationReport,
    energy_converged,
)
from .errors import ContractViolation
from .factors import PIXEL_KINDS
from .frontend import (
    KeyframePacket,
    SceneSpec,
    ate,
    average_depth,
    backproject,
    constant_velocity_prediction,
    generate_scene,
    triangulate_two_view,
)
from .gaussians import GaussianInfo
from .geometry import CameraModel, PlaneParams, Pose, transform_plane
from .graph import (
    COMBINED_RIGID_REPROJECTION,
    KEYFRAME,
    POINT,
    PRIOR,
    REPROJECTION,
    RIGID_BODY,
    RIGID_PLANE_PREDICTION,
    RIGID_REPROJECTION,
    FactorGraph,
)
from . import io_formats
from .reference import LmConfig, lm_solve
from .routing import PoolConfig, RoutingSimulator

SOLVERS = ("gbp", "gbp-routed", "lm")


@dataclass
class PriorConfig:
    first_keyframe_sigma: float = 1e-6
    keyframe_sigma: float = 10.0
    point_sigma: float = 100.0
    plane_sigma: float = 100.0
    scale_anchor_sigma: float = 1e-3
    default_depth: float = 3.0
    # simulated two-view initialisation quality (front-end relative pose)
    bootstrap_t_sigma: float = 0.01
    bootstrap_r_sigma: float = 0.005


@dataclass
class ExperimentConfig:
    scene: SceneSpec | None = None
    replay_path: str | None = None
    solver: str = "gbp"
    planes: bool = True
    compression: bool = True
    seed: int = 0
    sigma_r: float = 2.0
    robust: str | None = "tukey"
    keyframe_interval: int = 300
    max_iterations: int | None = None
    gbp: GbpConfig = field(default_factory=GbpConfig)
    abstraction: AbstractionConfig = field(default_factory=AbstractionConfig)
    priors: PriorConfig = field(default_factory=PriorConfig)
    out_dir: str | None = None

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ContractViolation(f"solver must be one of {SOLVERS}")
        if self.scene is None and self.replay_path is None:
            raise ContractViolation("config needs a scene spec or a replay path")

    @property
    def keyframe_interval_eff(self) -> int:
        return max(1, int(round(self.keyframe_interval * self.abstraction.iteration_scale)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.scene is not None:
            d["scene"] = self.scene.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = {k: v for k, v in d.items() if k not in ("format", "version")}
        if d.get("scene") is not None:
            d["scene"] = SceneSpec.from_dict(d["scene"])
        if isinstance(d.get("gbp"), dict):
            d["gbp"] = GbpConfig(**d["gbp"])
        if isinstance(d.get("abstraction"), dict):
            d["abstraction"] = AbstractionConfig(**d["abstraction"])
        if isinstance(d.get("priors"), dict):
            d["priors"] = PriorConfig(**d["priors"])
        return ExperimentConfig(**d)


@dataclass
class RunResult:
    config: ExperimentConfig
    summary: dict
    reports: list
    graph: FactorGraph
    manager: AbstractionManager | None
    packets: list
    out_dir: str | None


class _SlamState:
    def __init__(self):
        self.point_var: dict[int, int] = {}  # scene point id -> variable id
        self.keyframe_vars: list[int] = []
        self.scale_anchor_placed = False
        self.anchor_factor_id: int | None = None
        self.anchor_point_var: int | None = None


def _packets_for(config: ExperimentConfig):
    if config.replay_path is not None:
        doc = io_formats.read_json(config.replay_path, "packets")
        packets = [KeyframePacket.from_dict(p) for p in doc["packets"]]
        camera = CameraModel(**doc["camera"])
        return packets, camera, None
    spec = dataclasses.replace(config.scene, seed=config.seed)
    scene = generate_scene(spec)
    packets = [scene.emit_keyframe(k) for k in range(spec.n_keyframes)]
    return packets, scene.camera, scene


def _default_budget(config: ExperimentConfig, n_packets: int) -> int:
    a = config.abstraction
    budget = (n_packets - 1) * config.keyframe_interval_eff
    if config.planes:
        budget += a.t_max_eff + 2 * a.test_period_eff
    else:
        budget += 4 * config.keyframe_interval_eff
    return budget + 10


def _add_first_keyframe(graph, state, config, packet) -> int:
    pose = Pose(packet.true_pose)  # gauge anchor: world frame := first camera
    lam = np.eye(6) / config.priors.first_keyframe_sigma**2
    kf = graph.add_variable(KEYFRAME, pose.r, GaussianInfo(lam @ pose.r, lam))
    state.keyframe_vars.append(kf)
    return kf


def _add_keyframe(graph, state, manager, config, packet, iteration, camera,
                  pose_override: Pose | None = None):
    """Grow the graph with one keyframe packet; returns the keyframe id."""
    priors = config.priors
    first = not state.keyframe_vars
    if first:
        pose = Pose(packet.true_pose)  # gauge anchor: world frame := first camera
        sig = priors.first_keyframe_sigma
    elif pose_override is not None:
        pose = pose_override
        sig = priors.keyframe_sigma
    else:
        prev = Pose(graph.variables[state.keyframe_vars[-1]].mean)
        prev2 = (
            Pose(graph.variables[state.keyframe_vars[-2]].mean)
            if len(state.keyframe_vars) >= 2 else None
        )
        pose = constant_velocity_prediction(prev, prev2)
        sig = priors.keyframe_sigma
    lam = np.eye(6) / sig**2
    kf_id = graph.add_variable(KEYFRAME, pose.r, GaussianInfo(lam @ pose.r, lam))
    state.keyframe_vars.append(kf_id)

    existing = [
        graph.variables[v].mean for v in state.point_var.values()
        if v in graph.variables
    ]
    depth = average_depth(
        pose, np.stack(existing) if existing else np.zeros((0, 3)),
        priors.default_depth,
    )

    for pid, pixel in zip(packet.point_ids, packet.pixels):
        pid = int(pid)
        if pid in state.point_var:
            var = state.point_var[pid]
            if var in graph.variables:
                graph.add_factor(
                    REPROJECTION, (kf_id, var), pixel, config.sigma_r,
                    robust=config.robust,
                )
            elif manager is not None:
                hit = manager_lookup_absorbed(manager, pid)
                if hit is not None:
                    rigid_id, p_conv = hit
                    graph.add_factor(
                        RIGID_REPROJECTION, (kf_id, rigid_id), pixel, config.sigma_r,
                        payload={"p_conv": p_conv.copy()}, robust=config.robust,
                    )
        else:
            p0 = backproject(camera, pose, pixel, depth)
            plam = np.eye(3) / priors.point_sigma**2
            var = graph.add_variable(POINT, p0, GaussianInfo(plam @ p0, plam))
            state.point_var[pid] = var
            graph.add_factor(
                REPROJECTION, (kf_id, var), pixel, config.sigma_r,
                robust=config.robust,
            )
            if not state.scale_anchor_placed:
                # one anchored point fixes the monocular scale gauge
                state.anchor_factor_id = graph.add_factor(
                    PRIOR, (var,), p0, priors.scale_anchor_sigma
                )
                state.anchor_point_var = var
                state.scale_anchor_placed = True

    if config.planes and manager is not None:
        for proposal in packet.hypotheses:
            members = [
                state.point_var[p] for p in proposal.member_ids
                if p in state.point_var and state.point_var[p] in graph.variables
            ]
            manager.integrate_hypothesis(
                kf_id, proposal.pi_z, members, iteration, proposal.true_plane
            )
    return kf_id


def _current_means(engine: GbpEngine, graph: FactorGraph) -> dict:
    """Engine means, plus node means for variables added since the last
    recompile (edits within one phase can reference each other's results)."""
    means = engine.means()
    for vid, node in graph.variables.items():
        if vid not in means:
            means[vid] = node.mean.copy()
    return means


def manager_lookup_absorbed(manager: AbstractionManager, scene_pid: int):
    """(rigid_id, current baked position) of the point that absorbed scene_pid."""
    for rp in manager.rigid_planes.values():
        for pid, p_conv in rp.members:
            if pid == scene_pid:
                return rp.rigid_id, p_conv
    return None


def _bootstrap_two_view(graph, state, manager, config, packet0, packet1,
                        iteration, camera):
    """Initialise the map from the first two keyframes.

    Mirrors a monocular front-end's two-view initialisation: the second
    pose comes from the (noise-corrupted) true relative motion, and points
    matched in both views are triangulated; single-view points fall back
    to the average-depth policy.
    """
    priors = config.priors
    rng = np.random.default_rng([config.seed, 41])
    pose0 = Pose(graph.variables[state.keyframe_vars[0]].mean)
    rel_true = Pose(packet1.true_pose).compose(Pose(packet0.true_pose).inverse())
    noise = np.concatenate([
        rng.normal(scale=priors.bootstrap_t_sigma, size=3),
        rng.normal(scale=priors.bootstrap_r_sigma, size=3),
    ])
    pose1 = Pose(rel_true.r + noise).compose(pose0)
    klam = np.eye(6) / priors.keyframe_sigma**2
    kf1 = graph.add_variable(KEYFRAME, pose1.r, GaussianInfo(klam @ pose1.r, klam))
    state.keyframe_vars.append(kf1)

    pix0 = {int(pid): pix for pid, pix in zip(packet0.point_ids, packet0.pixels)}
    pix1 = {int(pid): pix for pid, pix in zip(packet1.point_ids, packet1.pixels)}
    kf0 = state.keyframe_vars[0]
    created = []
    for pid in sorted(set(pix0) | set(pix1)):
        if pid in pix0 and pid in pix1:
            p, ok = triangulate_two_view(camera, pose0, pose1, pix0[pid], pix1[pid])
            if not ok:
                p = backproject(camera, pose0, pix0[pid], priors.default_depth)
        else:
            pose, pix = (pose0, pix0[pid]) if pid in pix0 else (pose1, pix1[pid])
            p = backproject(camera, pose, pix, priors.default_depth)
        plam = np.eye(3) / priors.point_sigma**2
        var = graph.add_variable(POINT, p, GaussianInfo(plam @ p, plam))
        state.point_var[pid] = var
        created.append(pid)
        if pid in pix0:
            graph.add_factor(REPROJECTION, (kf0, var), pix0[pid], config.sigma_r,
                             robust=config.robust)
        if pid in pix1:
            graph.add_factor(REPROJECTION, (kf1, var), pix1[pid], config.sigma_r,
                             robust=config.robust)
        if not state.scale_anchor_placed:
            state.anchor_factor_id = graph.add_factor(
                PRIOR, (var,), p, priors.scale_anchor_sigma
            )
            state.anchor_point_var = var
            state.scale_anchor_placed = True

    if config.planes and manager is not None:
        for kf_id, packet in ((kf0, packet0), (kf1, packet1)):
            for proposal in packet.hypotheses:
                members = [
                    state.point_var[p] for p in proposal.member_ids
                    if p in state.point_var and state.point_var[p] in graph.variables
                ]
                manager.integrate_hypothesis(
                    kf_id, proposal.pi_z, members, iteration, proposal.true_plane
                )
    return kf1


def run(config: ExperimentConfig) -> RunResult:
    packets, camera, scene = _packets_for(config)
    if config.solver == "lm":
        return _run_lm(config, packets, camera, scene)

    graph = FactorGraph(camera=camera)
    state = _SlamState()
    manager = AbstractionManager(graph, config.abstraction, config.seed)
    # The map proper appears with the second keyframe (two-view bootstrap);
    # until then the graph holds only the anchored first pose.
    _add_first_keyframe(graph, state, config, packets[0])

    sim = None
    transport = DirectTransport()
    if config.solver == "gbp-routed":
        sim = _routing_sim_for(packets, graph)
        sim.bind_graph(graph)
        transport = sim.make_transport()
    engine = GbpEngine(graph, config.gbp, transport=transport)

    max_iterations = config.max_iterations or _default_budget(config, len(packets))
    kf_interval = config.keyframe_interval_eff
    a = config.abstraction
    reports = []
    census_rows = [_census_row(graph, 1)]
    next_kf = 1
    last_edit = 0

    for it in range(1, max_iterations + 1):
        reports.append(engine.iterate())
        mark = len(graph.journal)

        if next_kf < len(packets) and it % kf_interval == 0:
            engine.sync_graph()
            if next_kf == 1:
                _bootstrap_two_view(graph, state, manager, config,
                                    packets[0], packets[1], it, camera)
            else:
                _add_keyframe(graph, state, manager, config, packets[next_kf],
                              it, camera)
            next_kf += 1
            census_rows.append(_census_row(graph, next_kf))
        if config.planes and it % a.test_period_eff == 0 and manager.hypotheses:
            manager.run_tests(_current_means(engine, graph), it,
                              compress=config.compression)
        if config.planes and config.compression and it % a.merge_period_eff == 0:
            if len(manager.rigid_planes) > 1:
                manager.merge_pass(_current_means(engine, graph), it)

        events = graph.events_since(mark)
        if events:
            if sim is not None:
                sim.apply_edit(events)
            engine.on_graph_edit(events)
            last_edit = it
            census_rows.append(_census_row(graph, next_kf))

        if (
            next_kf >= len(packets)
            and not manager.hypotheses
            and it > last_edit + a.test_period_eff
            and energy_converged(reports, config.gbp.energy_rel_tol, config.gbp.energy_window)
        ):
            break

    engine.sync_graph()
    summary = _summarize(config, graph, state, manager, reports, packets)
    out_dir = config.out_dir
    if out_dir is not None:
        _write_artifacts(
            config, graph, state, manager, reports, packets, census_rows,
            summary, sim, camera, scene,
        )
    return RunResult(config, summary, reports, graph, manager, packets, out_dir)


def _routing_sim_for(packets, graph) -> RoutingSimulator:
    """Generous pools (2x a worst-case bound derived from the packet stream)."""
    n_kf = len(packets)
    all_points = set()
    n_obs = 0
    n_hyp = 0
    max_kf_obs = 0
    for p in packets:
        all_points.update(int(i) for i in p.point_ids)
        n_obs += len(p.point_ids)
        n_hyp += len(p.hypotheses)
        max_kf_obs = max(max_kf_obs, len(p.point_ids))
    max_v = {
        KEYFRAME: 2 * n_kf,
        POINT: 2 * len(all_points) + 4,
        "plane_hypothesis": 2 * n_hyp + 4,
        RIGID_BODY: 2 * n_hyp + 4,
    }
    max_f = {
        REPROJECTION: 2 * n_obs + 8,
        "plane_point": 2 * n_obs + 8,
        "plane_prediction": 2 * n_hyp + 4,
        RIGID_REPROJECTION: 2 * n_obs + 8,
        RIGID_PLANE_PREDICTION: 2 * n_hyp + 4,
        COMBINED_RIGID_REPROJECTION: 2 * n_hyp * n_kf + 8,
    }
    return RoutingSimulator(PoolConfig(max_v, max_f, 2 * max_kf_obs + 32))


def _census_row(graph, keyframes_added: int) -> dict:
    c = graph.snapshot_census()
    row = {"keyframes_added": keyframes_added,
           "n_factors": c["n_factors"], "n_variables": c["n_variables"]}
    for kind, count in c["factors"].items():
        row[f"f_{kind}"] = count
    return row


def _trajectories(graph, state, packets):
    est, gt = [], []
    for kf_id, packet in zip(state.keyframe_vars, packets):
        est.append(Pose(graph.variables[kf_id].mean))
        gt.append(Pose(np.asarray(packet.true_pose, float)))
    return est, gt


def _summarize(config, graph, state, manager, reports, packets) -> dict:
    est, gt = _trajectories(graph, state, packets)
    ate_cm, degenerate = float("nan"), True
    if len(est) >= 3:
        res = ate(
            np.stack([p.inverse().t for p in est]),
            np.stack([p.inverse().t for p in gt]),
        )
        ate_cm, degenerate = res.rms_cm, res.degenerate
    conv_px = next(
        (r.iteration for r in reports if r.avg_reproj_px <= config.gbp.convergence_px),
        None,
    )
    events = manager.events if manager else []
    return {
        "solver": config.solver,
        "seed": config.seed,
        "planes": config.planes,
        "compression": config.compression,
        "n_iterations": len(reports),
        "ate_cm": ate_cm,
        "ate_degenerate": degenerate,
        "converged_iteration_px": conv_px,
        "final_avg_reproj_px": reports[-1].avg_reproj_px if reports else None,
        "final_energy": reports[-1].total_energy if reports else None,
        "final_census": graph.snapshot_census(),
        "n_confirmed": sum(1 for e in events if e["event"] == "confirm"),
        "n_rejected": sum(1 for e in events if e["event"] == "reject"),
        "n_merged": sum(1 for e in events if e["event"] == "merge"),
    }


def export_reconstruction(graph: FactorGraph) -> dict:
    """Confirmed planes with in-plane hulls, plus unabstracted raw points."""
    from .abstraction import hull2d
    from .frontend import plane_basis

    planes = []
    for node in graph.variables_of_kind(RIGID_BODY):
        pi_conv = None
        baked = {}
        for fid in node.factor_ids:
            fac = graph.factors[fid]
            if fac.kind == RIGID_PLANE_PREDICTION and pi_conv is None:
                pi_conv = fac.payload["pi_conv"]
            elif fac.kind == RIGID_REPROJECTION:
                p = fac.payload["p_conv"]
                baked[tuple(np.round(p, 9))] = p
            elif fac.kind == COMBINED_RIGID_REPROJECTION:
                for _, p in fac.constituents():
                    baked[tuple(np.round(p, 9))] = p
        if pi_conv is None or not baked:
            continue
        pose = Pose(node.mean)
        plane_w = transform_plane(pose, PlaneParams(np.asarray(pi_conv, float)))
        pts_w = pose.apply(np.stack(list(baked.values())))
        e1, e2 = plane_basis(plane_w.normal)
        origin = plane_w.normal * plane_w.distance
        uv = np.stack([(pts_w - origin) @ e1, (pts_w - origin) @ e2], axis=1)
        hull = hull2d(uv)
        hull3d = (
            [] if hull is None
            else (origin[None] + hull[:, :1] * e1[None] + hull[:, 1:] * e2[None]).tolist()
        )
        planes.append({
            "rigid_id": node.id,
            "normal": plane_w.normal.tolist(),
            "distance": plane_w.distance,
            "hull": hull3d,
            "n_points": len(baked),
        })
    raw_points = [
        graph.variables[v.id].mean.tolist() for v in graph.variables_of_kind(POINT)
    ]
    return {"planes": planes, "raw_points": raw_points}


def _write_artifacts(config, graph, state, manager, reports, packets,
                     census_rows, summary, sim, camera, scene):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io_formats.write_json(out / "config.json", "experiment-config", config.to_dict())
    io_formats.write_iteration_csv(out / "iterations.csv", reports)
    fields = sorted({k for row in census_rows for k in row})
    fields = ["keyframes_added", "n_factors", "n_variables"] + [
        f for f in fields if f.startswith("f_")
    ]
    io_formats.write_csv(out / "census.csv", fields, census_rows)
    io_formats.write_json(out / "events.json", "event-log",
                          {"events": manager.events if manager else []})
    io_formats.write_graph(out / "graph.json", graph)
    est, gt = _trajectories(graph, state, packets)
    times = [float(i) for i in range(len(est))]
    io_formats.write_tum(out / "trajectory_est.txt", times, est)
    io_formats.write_tum(out / "trajectory_gt.txt", times, gt)
    io_formats.write_json(out / "reconstruction.json", "reconstruction",
                          export_reconstruction(graph))
    io_formats.write_json(out / "summary.json", "summary", summary)
    if scene is not None:
        cam = scene.camera
        io_formats.write_json(out / "packets.json", "packets", {
            "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                       "width": cam.width, "height": cam.height},
            "packets": [p.to_dict() for p in packets],
        })
    if sim is not None:
        io_formats.write_cost_csv(out / "cost.csv", sim.cost_report())


# ---------------------------------------------------------------------------
# Batch bundle-adjustment path (solver == "lm") and graph building helper
# ---------------------------------------------------------------------------

def build_ba_graph(
    config: ExperimentConfig, packets, camera,
    pose_noise: tuple = (0.05, 0.02),
    point_noise: float | None = None,
    scene=None,
) -> tuple:
    """Static raw BA graph over all packets with noisy initialisation.

    Keyframes after the first start from their true pose perturbed by
    (translation sigma m, rotation sigma rad) noise drawn from the config
    seed. Points start from average-depth backprojection of their first
    observation, or, when point_noise and the scene are given, from their
    true position perturbed by that sigma (a previously converged map that
    has drifted, the setup of convergence-time measurements). Propagation
    and direct solvers built from the same config share the initialisation.
    """
    rng = np.random.default_rng([config.seed, 77])
    graph = FactorGraph(camera=camera)
    state = _SlamState()
    cfg = dataclasses.replace(config, planes=False)
    for k, packet in enumerate(packets):
        override = None
        if k > 0:
            r = np.asarray(packet.true_pose, float).copy()
            r[:3] += rng.normal(scale=pose_noise[0], size=3)
            r[3:] += rng.normal(scale=pose_noise[1], size=3)
            override = Pose(r)
        _add_keyframe(graph, state, None, cfg, packet, 0, camera,
                      pose_override=override)
    if point_noise is not None and scene is not None:
        for pid, vid in state.point_var.items():
            node = graph.variables[vid]
            node.mean = scene.points[pid] + rng.normal(scale=point_noise, size=3)
            lam = node.prior.lam
            node.prior = GaussianInfo(lam @ node.mean, lam)
            node.belief = node.prior
            if vid == state.anchor_point_var:
                graph.factors[state.anchor_factor_id].measurement = node.mean.copy()
    return graph, state


def _run_lm(config: ExperimentConfig, packets, camera, scene) -> RunResult:
    graph, state = build_ba_graph(config, packets, camera)
    result = lm_solve(graph, LmConfig())
    for vid, mean in result.means.items():
        graph.variables[vid].mean = mean
    reports = [
        IterationReport(
            iteration=row["iteration"],
            avg_reproj_px=row["avg_reproj_px"],
            total_energy=row["cost"],
            n_relinearised=0,
            n_dropped=0,
            n_factors=len(graph.factors),
            n_variables=len(graph.variables),
        )
        for row in result.trace
    ]
    summary = _summarize(config, graph, state, None, reports, packets)
    summary["lm_converged"] = result.converged
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        io_formats.write_json(out / "config.json", "experiment-config", config.to_dict())
        io_formats.write_iteration_csv(out / "iterations.csv", reports)
        io_formats.write_graph(out / "graph.json", graph)
        est, gt = _trajectories(graph, state, packets)
        times = [float(i) for i in range(len(est))]
        io_formats.write_tum(out / "trajectory_est.txt", times, est)
        io_formats.write_tum(out / "trajectory_gt.txt", times, gt)
        io_formats.write_json(out / "summary.json", "summary", summary)
    return RunResult(config, summary, reports, graph, None, packets, config.out_dir)


# ---------------------------------------------------------------------------
# Run comparison
# ---------------------------------------------------------------------------

def compare_runs(run_dirs) -> dict:
    """Cross-run tables: ATE, convergence iteration, factor-count curves."""
    runs = []
    curves = {}
    for d in run_dirs:
        d = Path(d)
        summary = io_formats.read_json(d / "summary.json", "summary")
        runs.append({
            "dir": str(d),
            "solver": summary["solver"],
            "planes": summary.get("planes"),
            "compression": summary.get("compression"),
            "seed": summary["seed"],
            "ate_cm": summary["ate_cm"],
            "n_iterations": summary["n_iterations"],
            "converged_iteration_px": summary.get("converged_iteration_px"),
            "final_factors": summary.get("final_census", {}).get("n_factors"),
        })
        census_path = d / "census.csv"
        if census_path.exists():
            curves[str(d)] = io_formats.read_csv(census_path)
    return {"runs": runs, "census_curves": curves}
