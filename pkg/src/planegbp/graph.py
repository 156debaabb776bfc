"""Editable heterogeneous factor graph: the master scene representation.

Variables and factors are typed nodes; every structural edit appends an
event to a journal from which the graph can be replayed exactly. Edits are
meant to happen between propagation sweeps (single writer); the engine keeps
its own compiled view and is told about edits through the journal.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractViolation
from .gaussians import GaussianInfo
from .geometry import CameraModel

# Variable kinds and their state dimensions.
KEYFRAME = "keyframe"
POINT = "point"
PLANE_HYPOTHESIS = "plane_hypothesis"
RIGID_BODY = "rigid_body"

VARIABLE_DIMS = {KEYFRAME: 6, POINT: 3, PLANE_HYPOTHESIS: 3, RIGID_BODY: 6}

# Factor kinds and the variable-kind signature of their adjacency, in order.
REPROJECTION = "reprojection"
PLANE_POINT = "plane_point"
PLANE_PREDICTION = "plane_prediction"
RIGID_REPROJECTION = "rigid_reprojection"
RIGID_PLANE_PREDICTION = "rigid_plane_prediction"
COMBINED_RIGID_REPROJECTION = "combined_rigid_reprojection"
PRIOR = "prior"
# Generic linear-Gaussian factor h(X) = A X over 1 or 2 variables; used by
# synthetic validation graphs (tree/loopy exactness) rather than the SLAM
# measurement models.
LINEAR = "linear"

FACTOR_SIGNATURES = {
    REPROJECTION: (KEYFRAME, POINT),
    PLANE_POINT: (PLANE_HYPOTHESIS, POINT),
    PLANE_PREDICTION: (PLANE_HYPOTHESIS, KEYFRAME),
    RIGID_REPROJECTION: (KEYFRAME, RIGID_BODY),
    RIGID_PLANE_PREDICTION: (RIGID_BODY, KEYFRAME),
    COMBINED_RIGID_REPROJECTION: (KEYFRAME, RIGID_BODY),
    PRIOR: None,  # unary, attaches to any variable kind
    LINEAR: None,  # arity 1 or 2, any variable kinds
}

# Measurement dimension per pixel/plane observation; combined factors carry a
# list of 2-pixel constituents, priors measure the full variable block.
MEASUREMENT_DIMS = {
    REPROJECTION: 2,
    PLANE_POINT: 1,
    PLANE_PREDICTION: 3,
    RIGID_REPROJECTION: 2,
    RIGID_PLANE_PREDICTION: 3,
}


@dataclass
class VariableNode:
    id: int
    kind: str
    belief: GaussianInfo
    prior: GaussianInfo
    mean: np.ndarray  # linearisation-relevant mean cache
    factor_ids: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return VARIABLE_DIMS[self.kind]


@dataclass
class StoredLinearisation:
    x0: np.ndarray
    gaussian: GaussianInfo
    weight: float


@dataclass
class FactorNode:
    id: int
    kind: str
    adjacency: tuple
    measurement: Optional[np.ndarray]
    sigma: np.ndarray  # per-residual-component noise std
    payload: dict = field(default_factory=dict)
    robust: Optional[str] = None  # None or "tukey"
    robust_scale: float = 4.685
    created_iteration: int = 0
    linearisation: Optional[StoredLinearisation] = None

    @property
    def arity(self) -> int:
        return len(self.adjacency)

    def constituents(self):
        """(z, p_conv) pairs for combined factors."""
        return self.payload.get("constituents", [])


# --- Edit journal ----------------------------------------------------------

@dataclass(frozen=True)
class AddVariable:
    id: int
    kind: str
    mean: np.ndarray
    prior: GaussianInfo


@dataclass(frozen=True)
class RemoveVariable:
    id: int


@dataclass(frozen=True)
class AddFactor:
    id: int
    kind: str
    adjacency: tuple
    measurement: Optional[np.ndarray]
    sigma: np.ndarray
    payload: dict
    robust: Optional[str]
    robust_scale: float


@dataclass(frozen=True)
class RemoveFactor:
    id: int


@dataclass(frozen=True)
class ReplaceVariables:
    """Atomic rigid-body compression: old variables collapse into one."""

    old_variable_ids: tuple
    new_variable_id: int
    events: tuple  # the primitive events realising the replacement


def _as_sigma(sigma, mdim: int) -> np.ndarray:
    arr = np.asarray(sigma, dtype=float).reshape(-1)
    if arr.shape[0] == 1:
        arr = np.full(mdim, arr[0])
    if arr.shape[0] != mdim:
        raise ContractViolation(f"sigma has {arr.shape[0]} components, expected {mdim}")
    if np.any(arr <= 0):
        raise ContractViolation("noise sigma must be positive")
    return arr


class FactorGraph:
    def __init__(self, camera: Optional[CameraModel] = None):
        self.camera = camera
        self.variables: dict[int, VariableNode] = {}
        self.factors: dict[int, FactorNode] = {}
        self.journal: list = []
        self.iteration = 0  # advanced by the harness; stamps new factors
        self._next_var_id = 0
        self._next_factor_id = 0

    # -- variables ----------------------------------------------------------

    def add_variable(
        self,
        kind: str,
        mean: np.ndarray,
        prior: Optional[GaussianInfo] = None,
        _fixed_id: Optional[int] = None,
    ) -> int:
        if kind not in VARIABLE_DIMS:
            raise ContractViolation(f"unknown variable kind {kind!r}")
        dim = VARIABLE_DIMS[kind]
        mean = np.asarray(mean, dtype=float).reshape(-1)
        if mean.shape[0] != dim:
            raise ContractViolation(f"{kind} mean must have dim {dim}")
        if prior is None:
            prior = GaussianInfo.zero(dim)
        if prior.dim != dim:
            raise ContractViolation("prior dimension does not match variable kind")
        vid = self._next_var_id if _fixed_id is None else _fixed_id
        if vid in self.variables:
            raise ContractViolation(f"variable id {vid} already live")
        self._next_var_id = max(self._next_var_id, vid) + 1
        belief = prior if not prior.is_zero() else GaussianInfo.zero(dim)
        self.variables[vid] = VariableNode(vid, kind, belief, prior, mean.copy())
        self.journal.append(AddVariable(vid, kind, mean.copy(), prior))
        return vid

    def remove_variable(self, variable_id: int) -> None:
        node = self._variable(variable_id)
        if node.factor_ids:
            raise ContractViolation(
                f"variable {variable_id} still has {len(node.factor_ids)} live factors"
            )
        del self.variables[variable_id]
        self.journal.append(RemoveVariable(variable_id))

    # -- factors ------------------------------------------------------------

    def add_factor(
        self,
        kind: str,
        adjacency,
        measurement,
        sigma,
        payload: Optional[dict] = None,
        robust: Optional[str] = None,
        robust_scale: float = 4.685,
        _fixed_id: Optional[int] = None,
    ) -> int:
        if kind not in FACTOR_SIGNATURES:
            raise ContractViolation(f"unknown factor kind {kind!r}")
        adjacency = tuple(int(v) for v in adjacency)
        for vid in adjacency:
            if vid not in self.variables:
                raise ContractViolation(f"factor adjacency references dead variable {vid}")
        signature = FACTOR_SIGNATURES[kind]
        if kind == LINEAR:
            if not 1 <= len(adjacency) <= 2:
                raise ContractViolation("linear factors take 1 or 2 variables")
        elif signature is None:
            if len(adjacency) != 1:
                raise ContractViolation("prior factors are unary")
        else:
            if len(adjacency) != len(signature):
                raise ContractViolation(
                    f"{kind} expects arity {len(signature)}, got {len(adjacency)}"
                )
            for vid, want in zip(adjacency, signature):
                have = self.variables[vid].kind
                if have != want:
                    raise ContractViolation(
                        f"{kind} adjacency slot expects {want}, variable {vid} is {have}"
                    )

        payload = dict(payload or {})
        if kind == LINEAR:
            A = np.asarray(payload.get("A"), dtype=float)
            joint = sum(self.variables[v].dim for v in adjacency)
            measurement = np.atleast_1d(np.asarray(measurement, dtype=float))
            if A.ndim != 2 or A.shape != (measurement.shape[0], joint):
                raise ContractViolation(
                    f"linear factor matrix must be ({measurement.shape[0]}, {joint})"
                )
            payload["A"] = A
            sigma = _as_sigma(sigma, measurement.shape[0])
        elif kind == COMBINED_RIGID_REPROJECTION:
            cons = payload.get("constituents")
            if not cons or len(cons) < 2:
                raise ContractViolation("combined factors need >= 2 constituents")
            measurement = None
            sigma = _as_sigma(sigma, 2)
        elif kind == PRIOR:
            dim = self.variables[adjacency[0]].dim
            measurement = np.asarray(measurement, dtype=float).reshape(-1)
            if measurement.shape[0] != dim:
                raise ContractViolation("prior measurement must match variable dim")
            sigma = _as_sigma(sigma, dim)
        else:
            mdim = MEASUREMENT_DIMS[kind]
            measurement = np.atleast_1d(np.asarray(measurement, dtype=float))
            if measurement.shape[0] != mdim:
                raise ContractViolation(
                    f"{kind} measurement must have dim {mdim}, got {measurement.shape[0]}"
                )
            sigma = _as_sigma(sigma, mdim)

        fid = self._next_factor_id if _fixed_id is None else _fixed_id
        if fid in self.factors:
            raise ContractViolation(f"factor id {fid} already live")
        self._next_factor_id = max(self._next_factor_id, fid) + 1
        node = FactorNode(
            fid, kind, adjacency, measurement, sigma, payload,
            robust, robust_scale, created_iteration=self.iteration,
        )
        self.factors[fid] = node
        for vid in adjacency:
            self.variables[vid].factor_ids.append(fid)
        self.journal.append(
            AddFactor(fid, kind, adjacency, measurement, sigma, payload, robust, robust_scale)
        )
        return fid

    def remove_factor(self, factor_id: int) -> None:
        node = self._factor(factor_id)
        for vid in node.adjacency:
            self.variables[vid].factor_ids.remove(factor_id)
        del self.factors[factor_id]
        self.journal.append(RemoveFactor(factor_id))

    # -- compression --------------------------------------------------------

    def replace_with_rigid_body(self, plane_id: int, point_ids, converged_means: dict):
        """Collapse a confirmed plane and its points into one rigid-body node.

        Points that also border another plane hypothesis, or that carry a
        prior factor (gauge anchors), are excluded rather than absorbed.
        Returns (rigid_id, absorbed_point_ids).
        """
        plane = self._variable(plane_id)
        if plane.kind != PLANE_HYPOTHESIS:
            raise ContractViolation(f"variable {plane_id} is not a plane hypothesis")
        if plane_id not in converged_means:
            raise ContractViolation("converged means must include the plane")

        absorbed = []
        for pid in point_ids:
            point = self._variable(pid)
            if point.kind != POINT:
                raise ContractViolation(f"variable {pid} is not a point")
            if pid not in converged_means:
                raise ContractViolation(f"converged means missing point {pid}")
            other_plane = any(
                self.factors[fid].kind == PLANE_POINT
                and self.factors[fid].adjacency[0] != plane_id
                for fid in point.factor_ids
            )
            anchored = any(self.factors[fid].kind == PRIOR for fid in point.factor_ids)
            if not other_plane and not anchored:
                absorbed.append(pid)

        mark = len(self.journal)
        pi_conv = np.asarray(converged_means[plane_id], dtype=float).copy()

        rigid_id = self.add_variable(
            RIGID_BODY,
            np.zeros(6),
            prior=GaussianInfo(np.zeros(6), np.eye(6) * 1.0),  # weak unit prior, gauge anchor
        )

        # Plane-point factors disappear for qualifying and non-qualifying
        # members alike; prediction factors transfer to the rigid body.
        for fid in list(plane.factor_ids):
            fac = self.factors[fid]
            if fac.kind == PLANE_POINT:
                self.remove_factor(fid)
            elif fac.kind == PLANE_PREDICTION:
                keyframe_id = fac.adjacency[1]
                self.add_factor(
                    RIGID_PLANE_PREDICTION,
                    (rigid_id, keyframe_id),
                    fac.measurement,
                    fac.sigma,
                    payload={"pi_conv": pi_conv},
                    robust=fac.robust,
                    robust_scale=fac.robust_scale,
                )
                self.remove_factor(fid)
            else:
                raise ContractViolation(f"plane {plane_id} has unexpected factor {fac.kind}")

        # Re-type reprojection factors of absorbed points.
        for pid in absorbed:
            p_conv = np.asarray(converged_means[pid], dtype=float).copy()
            for fid in list(self._variable(pid).factor_ids):
                fac = self.factors[fid]
                if fac.kind != REPROJECTION:
                    raise ContractViolation(
                        f"absorbed point {pid} has unexpected factor kind {fac.kind}"
                    )
                keyframe_id = fac.adjacency[0]
                self.add_factor(
                    RIGID_REPROJECTION,
                    (keyframe_id, rigid_id),
                    fac.measurement,
                    fac.sigma,
                    payload={"p_conv": p_conv},
                    robust=fac.robust,
                    robust_scale=fac.robust_scale,
                )
                self.remove_factor(fid)

        for pid in absorbed:
            self.remove_variable(pid)
        self.remove_variable(plane_id)

        primitives = tuple(self.journal[mark:])
        del self.journal[mark:]
        self.journal.append(
            ReplaceVariables(tuple([plane_id] + absorbed), rigid_id, primitives)
        )
        return rigid_id, absorbed

    # -- queries -------------------------------------------------------------

    def snapshot_census(self) -> dict:
        """Exact per-kind node and factor counts."""
        variables = Counter(v.kind for v in self.variables.values())
        factors = Counter(f.kind for f in self.factors.values())
        return {
            "variables": {k: variables.get(k, 0) for k in VARIABLE_DIMS},
            "factors": {k: factors.get(k, 0) for k in FACTOR_SIGNATURES},
            "n_variables": len(self.variables),
            "n_factors": len(self.factors),
        }

    def variables_of_kind(self, kind: str):
        return [v for v in self.variables.values() if v.kind == kind]

    def factors_of_kind(self, kind: str):
        return [f for f in self.factors.values() if f.kind == kind]

    def events_since(self, mark: int):
        return self.journal[mark:]

    def check_integrity(self) -> None:
        """Bipartite structure, live adjacency, arity tables."""
        for fid, fac in self.factors.items():
            signature = FACTOR_SIGNATURES[fac.kind]
            if signature is not None and len(fac.adjacency) != len(signature):
                raise ContractViolation(f"factor {fid} arity mismatch")
            for vid in fac.adjacency:
                if vid not in self.variables:
                    raise ContractViolation(f"factor {fid} references dead variable {vid}")
                if fid not in self.variables[vid].factor_ids:
                    raise ContractViolation(f"adjacency list missing factor {fid}")
        for vid, var in self.variables.items():
            for fid in var.factor_ids:
                if fid not in self.factors:
                    raise ContractViolation(f"variable {vid} lists dead factor {fid}")

    def _variable(self, vid: int) -> VariableNode:
        if vid not in self.variables:
            raise ContractViolation(f"no live variable {vid}")
        return self.variables[vid]

    def _factor(self, fid: int) -> FactorNode:
        if fid not in self.factors:
            raise ContractViolation(f"no live factor {fid}")
        return self.factors[fid]

    # -- journal replay -------------------------------------------------------

    @staticmethod
    def replay(journal, camera: Optional[CameraModel] = None) -> "FactorGraph":
        g = FactorGraph(camera=camera)

        def apply(event):
            if isinstance(event, AddVariable):
                g.add_variable(event.kind, event.mean, event.prior, _fixed_id=event.id)
            elif isinstance(event, RemoveVariable):
                g.remove_variable(event.id)
            elif isinstance(event, AddFactor):
                g.add_factor(
                    event.kind, event.adjacency, event.measurement, event.sigma,
                    payload=event.payload, robust=event.robust,
                    robust_scale=event.robust_scale, _fixed_id=event.id,
                )
            elif isinstance(event, RemoveFactor):
                g.remove_factor(event.id)
            elif isinstance(event, ReplaceVariables):
                for sub in event.events:
                    apply(sub)
            else:
                raise ContractViolation(f"unknown journal event {event!r}")

        for event in journal:
            apply(event)
        g.journal = list(journal)
        return g
