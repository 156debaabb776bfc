"""Plane-hypothesis lifecycle: integration, confirm/reject, compression, merge.

Hypotheses enter the graph as plane variables tied to candidate member points
(distance factors) and to their source keyframe (prediction factor). Every
test period the proportion y of members whose point-on-plane likelihood
exceeds a threshold decides their fate: rejected hypotheses are excised,
confirmed ones are compressed into a 6-DoF rigid-body node with converged
parameters baked in, after which co-adjacent reprojection factors are
combined per keyframe. Confirmed planes that describe the same surface are
merged periodically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import ContractViolation, DegeneratePlaneError
from .gaussians import GaussianInfo
from .geometry import PlaneParams, Pose, transform_plane
from .graph import (
    COMBINED_RIGID_REPROJECTION,
    PLANE_HYPOTHESIS,
    PLANE_POINT,
    PLANE_PREDICTION,
    RIGID_BODY,
    RIGID_PLANE_PREDICTION,
    RIGID_REPROJECTION,
    FactorGraph,
    ReplaceVariables,
)
from .frontend import plane_basis

PENDING = "pending"
CONFIRMED = "confirmed"
REJECTED = "rejected"


@dataclass
class AbstractionConfig:
    y_reject: float = 0.5
    y_conf: float = 0.8
    l_thresh: float = 0.8
    t_min: int = 4000
    t_max: int = 6000
    test_period: int = 1000
    merge_period: int = 1000
    theta_merge_deg: float = 10.0
    d_merge: float = 0.05
    o_merge: float = 0.3
    n_samples: int = 100
    min_members: int = 4
    sigma_pp: float = 0.05
    sigma_pi: float = 20.0
    plane_prior_sigma: float = 100.0
    # All iteration thresholds/periods are multiplied by this factor so that
    # desk-scale runs can use proportionally shorter budgets.
    iteration_scale: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.y_reject < self.y_conf <= 1.0):
            raise ContractViolation("need 0 <= y_reject < y_conf <= 1")
        if self.t_min >= self.t_max:
            raise ContractViolation("need t_min < t_max")
        if self.iteration_scale <= 0:
            raise ContractViolation("iteration_scale must be positive")

    def _scaled(self, v: int) -> int:
        return max(1, int(round(v * self.iteration_scale)))

    @property
    def t_min_eff(self) -> int:
        return self._scaled(self.t_min)

    @property
    def t_max_eff(self) -> int:
        return self._scaled(self.t_max)

    @property
    def test_period_eff(self) -> int:
        return self._scaled(self.test_period)

    @property
    def merge_period_eff(self) -> int:
        return self._scaled(self.merge_period)


@dataclass
class PlaneHypothesis:
    variable_id: int
    source_keyframe_id: int
    pi_z: np.ndarray
    member_point_ids: list
    inserted_iteration: int
    status: str = PENDING
    rigid_id: int | None = None
    prediction_factor_id: int | None = None
    plane_point_factor_ids: dict = field(default_factory=dict)
    true_plane: int = -1  # evaluation bookkeeping only

    def age(self, iteration: int) -> int:
        return iteration - self.inserted_iteration


@dataclass
class RigidPlane:
    rigid_id: int
    pi_conv: np.ndarray  # plane in the body frame (world at bake time)
    members: list  # (source point id, p_conv) pairs, body frame
    basis: tuple  # (e1, e2) in-plane axes in the body frame
    hull: np.ndarray | None  # 2D hull vertices in plane coordinates

    def plane(self) -> PlaneParams:
        return PlaneParams(self.pi_conv)

    def world_plane(self, mean_r: np.ndarray) -> PlaneParams:
        return transform_plane(Pose(mean_r), PlaneParams(self.pi_conv))

    def world_points(self, mean_r: np.ndarray) -> np.ndarray:
        body = np.stack([p for _, p in self.members])
        return Pose(mean_r).apply(body)


def point_plane_likelihood(point, plane_m, sigma_pp: float) -> float:
    """Unnormalised plane-point density, peak value 1 at zero residual."""
    m = np.asarray(plane_m, float)
    d = np.linalg.norm(m)
    if d <= 1e-12:
        return 0.0
    resid = float(m / d @ np.asarray(point, float) - d)
    return math.exp(-0.5 * (resid / sigma_pp) ** 2)


def test_hypothesis(y: float, t: int, config: AbstractionConfig) -> str:
    """'reject' | 'confirm' | 'keep'; rejection is checked first."""
    if y < config.y_reject or t > config.t_max_eff:
        return "reject"
    if y > config.y_conf and t > config.t_min_eff:
        return "confirm"
    return "keep"


def bake_parameters(means: dict, plane_id: int, member_ids) -> tuple:
    """Immutable snapshot (pi_conv, [(pid, p_conv), ...]) of belief means."""
    pi_conv = np.asarray(means[plane_id], float).copy()
    baked = [(pid, np.asarray(means[pid], float).copy()) for pid in member_ids]
    return pi_conv, baked


# -- hull helpers ------------------------------------------------------------

def hull2d(points2d: np.ndarray):
    """CCW hull vertices of 2D points, or None if degenerate."""
    if points2d.shape[0] < 3:
        return None
    try:
        h = ConvexHull(points2d)
    except QhullError:
        return None
    return points2d[h.vertices]


def sample_in_hull(rng, vertices: np.ndarray, n: int) -> np.ndarray:
    """Uniform samples inside a convex polygon (fan triangulation)."""
    v0 = vertices[0]
    tris = [(v0, vertices[i], vertices[i + 1]) for i in range(1, len(vertices) - 1)]
    areas = np.array([
        abs((b - a)[0] * (c - a)[1] - (b - a)[1] * (c - a)[0]) / 2 for a, b, c in tris
    ])
    if areas.sum() <= 0:
        return np.repeat(v0[None], n, axis=0)
    choice = rng.choice(len(tris), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    out = np.empty((n, 2))
    for i, t in enumerate(choice):
        a, b, c = tris[t]
        out[i] = (1 - r1[i]) * a + r1[i] * (1 - r2[i]) * b + r1[i] * r2[i] * c
    return out


def points_in_hull(vertices: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Containment mask for a convex CCW polygon."""
    inside = np.ones(pts.shape[0], dtype=bool)
    m = len(vertices)
    sign = 0.0
    for i in range(m):
        a = vertices[i]
        b = vertices[(i + 1) % m]
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        if sign == 0.0 and np.any(np.abs(cross) > 1e-12):
            sign = np.sign(cross[np.argmax(np.abs(cross))])
        inside &= sign * cross >= -1e-9
    return inside


# ---------------------------------------------------------------------------

class AbstractionManager:
    """Owns the hypothesis pool and rigid planes; edits the graph in place."""

    def __init__(self, graph: FactorGraph, config: AbstractionConfig, seed: int = 0):
        self.graph = graph
        self.config = config
        self.rng = np.random.default_rng([seed, 23])
        self.hypotheses: dict[int, PlaneHypothesis] = {}
        self.rigid_planes: dict[int, RigidPlane] = {}
        self.events: list[dict] = []

    # -- lifecycle ------------------------------------------------------------

    def integrate_hypothesis(
        self, keyframe_id: int, pi_z, member_point_ids, iteration: int,
        true_plane: int = -1,
    ):
        """Insert one proposal; returns the hypothesis or None if filtered."""
        cfg = self.config
        members = [p for p in member_point_ids if p in self.graph.variables]
        if len(members) < cfg.min_members:
            return None
        pi_z = np.asarray(pi_z, float)
        kf_mean = self.graph.variables[keyframe_id].mean
        try:
            pi_world = transform_plane(Pose(kf_mean).inverse(), PlaneParams(pi_z))
        except DegeneratePlaneError:
            return None
        lam = np.eye(3) / cfg.plane_prior_sigma**2
        var_id = self.graph.add_variable(
            PLANE_HYPOTHESIS, pi_world.m, GaussianInfo(lam @ pi_world.m, lam)
        )
        hyp = PlaneHypothesis(
            variable_id=var_id,
            source_keyframe_id=keyframe_id,
            pi_z=pi_z.copy(),
            member_point_ids=list(members),
            inserted_iteration=iteration,
            true_plane=true_plane,
        )
        for pid in members:
            fid = self.graph.add_factor(
                PLANE_POINT, (var_id, pid), 0.0, cfg.sigma_pp, robust="tukey"
            )
            hyp.plane_point_factor_ids[pid] = fid
        hyp.prediction_factor_id = self.graph.add_factor(
            PLANE_PREDICTION, (var_id, keyframe_id), pi_z, cfg.sigma_pi, robust="tukey"
        )
        self.hypotheses[var_id] = hyp
        self.events.append({
            "event": "integrate", "iteration": iteration, "hypothesis": var_id,
            "keyframe": keyframe_id, "n_members": len(members),
            "true_plane": true_plane,
        })
        return hyp

    def live_members(self, hyp: PlaneHypothesis) -> list:
        """Members whose plane-point factor still exists."""
        return [
            pid
            for pid, fid in hyp.plane_point_factor_ids.items()
            if fid in self.graph.factors and pid in self.graph.variables
        ]

    def evaluate_hypothesis(self, hyp: PlaneHypothesis, means: dict):
        """(y, per-point likelihoods) at the given belief means."""
        cfg = self.config
        members = self.live_members(hyp)
        if not members:
            return 0.0, {}
        plane_m = means[hyp.variable_id]
        liks = {
            pid: point_plane_likelihood(means[pid], plane_m, cfg.sigma_pp)
            for pid in members
        }
        y = sum(1 for v in liks.values() if v > cfg.l_thresh) / len(liks)
        return y, liks

    def reject_hypothesis(self, hyp: PlaneHypothesis, iteration: int, y: float):
        for fid in list(hyp.plane_point_factor_ids.values()):
            if fid in self.graph.factors:
                self.graph.remove_factor(fid)
        if hyp.prediction_factor_id in self.graph.factors:
            self.graph.remove_factor(hyp.prediction_factor_id)
        self.graph.remove_variable(hyp.variable_id)
        hyp.status = REJECTED
        del self.hypotheses[hyp.variable_id]
        self.events.append({
            "event": "reject", "iteration": iteration,
            "hypothesis": hyp.variable_id, "y": y,
            "true_plane": hyp.true_plane,
        })

    def confirm_hypothesis(
        self, hyp: PlaneHypothesis, means: dict, iteration: int, y: float,
        compress: bool = True,
    ):
        """Bake converged parameters and compress into a rigid body.

        With compress=False the hypothesis merely changes status (the
        no-compression ablation keeps plane variables and factors live).
        """
        if not compress:
            hyp.status = CONFIRMED
            del self.hypotheses[hyp.variable_id]
            self.events.append({
                "event": "confirm", "iteration": iteration,
                "hypothesis": hyp.variable_id, "y": y, "rigid_id": None,
                "true_plane": hyp.true_plane,
            })
            return None
        cfg = self.config
        members = self.live_members(hyp)
        liks = {
            pid: point_plane_likelihood(means[pid], means[hyp.variable_id], cfg.sigma_pp)
            for pid in members
        }
        qualifying = [pid for pid in members if liks[pid] > cfg.l_thresh]
        pi_conv, baked = bake_parameters(means, hyp.variable_id, qualifying)
        conv = {hyp.variable_id: pi_conv}
        conv.update({pid: p for pid, p in baked})
        rigid_id, absorbed = self.graph.replace_with_rigid_body(
            hyp.variable_id, qualifying, conv
        )
        body_points = [(pid, conv[pid]) for pid in absorbed]
        rp = self._make_rigid_plane(rigid_id, pi_conv, body_points)
        self.rigid_planes[rigid_id] = rp
        hyp.status = CONFIRMED
        hyp.rigid_id = rigid_id
        del self.hypotheses[hyp.variable_id]
        self.events.append({
            "event": "confirm", "iteration": iteration,
            "hypothesis": hyp.variable_id, "y": y, "rigid_id": rigid_id,
            "n_absorbed": len(absorbed), "true_plane": hyp.true_plane,
        })
        return rp

    def _make_rigid_plane(self, rigid_id, pi_conv, body_points) -> RigidPlane:
        plane = PlaneParams(np.asarray(pi_conv, float))
        e1, e2 = plane_basis(plane.normal)
        origin = plane.normal * plane.distance
        if body_points:
            pts = np.stack([p for _, p in body_points])
            uv = np.stack([(pts - origin) @ e1, (pts - origin) @ e2], axis=1)
            hull = hull2d(uv)
        else:
            hull = None
        return RigidPlane(rigid_id, np.asarray(pi_conv, float).copy(),
                          list(body_points), (e1, e2), hull)

    def run_tests(self, means: dict, iteration: int, compress: bool = True):
        """Periodic confirm/reject pass over all pending hypotheses."""
        outcomes = []
        for hyp in list(self.hypotheses.values()):
            y, _ = self.evaluate_hypothesis(hyp, means)
            verdict = test_hypothesis(y, hyp.age(iteration), self.config)
            if verdict == "reject":
                self.reject_hypothesis(hyp, iteration, y)
            elif verdict == "confirm":
                rp = self.confirm_hypothesis(hyp, means, iteration, y, compress)
                if rp is not None:
                    self.combine_rigid_factors(rp.rigid_id)
            outcomes.append((hyp.variable_id, verdict, y))
        return outcomes

    # -- factor combination ----------------------------------------------------

    def combine_rigid_factors(self, rigid_id: int):
        """Merge co-adjacent rigid reprojection factors, one per keyframe."""
        graph = self.graph
        per_kf: dict[int, list] = {}
        for fid in list(graph.variables[rigid_id].factor_ids):
            fac = graph.factors[fid]
            if fac.kind == RIGID_REPROJECTION:
                per_kf.setdefault(fac.adjacency[0], []).append(fid)
        created = []
        for kf_id, fids in per_kf.items():
            if len(fids) < 2:
                continue
            cons = []
            first = graph.factors[fids[0]]
            for fid in fids:
                fac = graph.factors[fid]
                cons.append((fac.measurement.copy(), fac.payload["p_conv"].copy()))
            cid = graph.add_factor(
                COMBINED_RIGID_REPROJECTION,
                (kf_id, rigid_id),
                None,
                first.sigma,
                payload={"constituents": cons},
                robust=first.robust,
                robust_scale=first.robust_scale,
            )
            for fid in fids:
                graph.remove_factor(fid)
            created.append(cid)
        return created

    # -- merging ----------------------------------------------------------------

    def _world_hull_samples(self, rp: RigidPlane, mean_r: np.ndarray, n: int):
        if rp.hull is None:
            return None
        uv = sample_in_hull(self.rng, rp.hull, n)
        e1, e2 = rp.basis
        origin = rp.plane().normal * rp.plane().distance
        body = origin[None] + uv[:, :1] * e1[None] + uv[:, 1:] * e2[None]
        return Pose(mean_r).apply(body)

    def _to_plane_coords(self, rp: RigidPlane, mean_r: np.ndarray, pts_world: np.ndarray):
        body = Pose(mean_r).inverse().apply(pts_world)
        e1, e2 = rp.basis
        origin = rp.plane().normal * rp.plane().distance
        rel = body - origin
        return np.stack([rel @ e1, rel @ e2], axis=1)

    def merge_planes(self, a: RigidPlane, b: RigidPlane, means: dict, iteration: int):
        """Merge two confirmed planes when aligned, close and overlapping."""
        cfg = self.config
        mean_a = means[a.rigid_id]
        mean_b = means[b.rigid_id]
        try:
            pa = a.world_plane(mean_a)
            pb = b.world_plane(mean_b)
        except DegeneratePlaneError:
            return None
        cosang = abs(float(pa.normal @ pb.normal))
        if math.degrees(math.acos(min(cosang, 1.0))) > cfg.theta_merge_deg:
            return None
        sa = self._world_hull_samples(a, mean_a, cfg.n_samples)
        sb = self._world_hull_samples(b, mean_b, cfg.n_samples)
        if sa is None or sb is None:
            return None
        sep_ab = float(np.mean(np.abs(sa @ pb.normal - pb.distance)))
        sep_ba = float(np.mean(np.abs(sb @ pa.normal - pa.distance)))
        if max(sep_ab, sep_ba) > cfg.d_merge:
            return None
        in_b = points_in_hull(b.hull, self._to_plane_coords(b, mean_b, sa))
        in_a = points_in_hull(a.hull, self._to_plane_coords(a, mean_a, sb))
        overlap = max(float(np.mean(in_b)), float(np.mean(in_a)))
        if overlap < cfg.o_merge:
            return None

        # Merged plane: averaged (sign-aligned) normals, distance through the
        # world centroid of all member points.
        n_a = pa.normal
        n_b = pb.normal if pa.normal @ pb.normal >= 0 else -pb.normal
        n_new = n_a + n_b
        n_new /= np.linalg.norm(n_new)
        pts_a = a.world_points(mean_a)
        pts_b = b.world_points(mean_b)
        all_pts = np.concatenate([pts_a, pts_b], axis=0)
        d_new = float(n_new @ all_pts.mean(axis=0))
        pi_new = n_new * d_new

        graph = self.graph
        mark = len(graph.journal)
        rigid_id = graph.add_variable(
            RIGID_BODY, np.zeros(6), GaussianInfo(np.zeros(6), np.eye(6))
        )
        for old, mean_old in ((a, mean_a), (b, mean_b)):
            pose_old = Pose(mean_old)
            for fid in list(graph.variables[old.rigid_id].factor_ids):
                fac = graph.factors[fid]
                if fac.kind == RIGID_REPROJECTION:
                    graph.add_factor(
                        RIGID_REPROJECTION, (fac.adjacency[0], rigid_id),
                        fac.measurement, fac.sigma,
                        payload={"p_conv": pose_old.apply(fac.payload["p_conv"])},
                        robust=fac.robust, robust_scale=fac.robust_scale,
                    )
                elif fac.kind == COMBINED_RIGID_REPROJECTION:
                    cons = [
                        (z.copy(), pose_old.apply(p)) for z, p in fac.constituents()
                    ]
                    graph.add_factor(
                        COMBINED_RIGID_REPROJECTION, (fac.adjacency[0], rigid_id),
                        None, fac.sigma, payload={"constituents": cons},
                        robust=fac.robust, robust_scale=fac.robust_scale,
                    )
                elif fac.kind == RIGID_PLANE_PREDICTION:
                    graph.add_factor(
                        RIGID_PLANE_PREDICTION, (rigid_id, fac.adjacency[1]),
                        fac.measurement, fac.sigma,
                        payload={"pi_conv": pi_new.copy()},
                        robust=fac.robust, robust_scale=fac.robust_scale,
                    )
                else:
                    raise ContractViolation(
                        f"rigid body {old.rigid_id} has unexpected factor {fac.kind}"
                    )
                graph.remove_factor(fid)
            graph.remove_variable(old.rigid_id)
        primitives = tuple(graph.journal[mark:])
        del graph.journal[mark:]
        graph.journal.append(
            ReplaceVariables((a.rigid_id, b.rigid_id), rigid_id, primitives)
        )

        members = [(pid, p) for (pid, _), p in zip(a.members, pts_a)]
        members += [(pid, p) for (pid, _), p in zip(b.members, pts_b)]
        rp = self._make_rigid_plane(rigid_id, pi_new, members)
        del self.rigid_planes[a.rigid_id]
        del self.rigid_planes[b.rigid_id]
        self.rigid_planes[rigid_id] = rp
        self.events.append({
            "event": "merge", "iteration": iteration,
            "merged": [a.rigid_id, b.rigid_id], "rigid_id": rigid_id,
            "overlap": overlap, "separation": max(sep_ab, sep_ba),
        })
        return rp

    def merge_pass(self, means: dict, iteration: int) -> int:
        """Try all confirmed pairs once; returns the number of merges."""
        merged = 0
        changed = True
        while changed:
            changed = False
            ids = sorted(self.rigid_planes)
            for i, aid in enumerate(ids):
                for bid in ids[i + 1:]:
                    if aid not in self.rigid_planes or bid not in self.rigid_planes:
                        continue
                    rp = self.merge_planes(
                        self.rigid_planes[aid], self.rigid_planes[bid], means, iteration
                    )
                    if rp is not None:
                        merged += 1
                        means[rp.rigid_id] = np.zeros(6)
                        changed = True
        return merged
