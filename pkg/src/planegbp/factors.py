"""Measurement models for all factor kinds.

Each kind provides a batched evaluator returning residual values, analytic
Jacobian blocks in adjacency order and a validity mask (cheirality or plane
degeneracy failures flag the row as an outlier for the current iteration
rather than raising). Scalar wrappers expose the single-instance contracts
and raise the corresponding errors.

Linearisation follows the first-order expansion of the residual v(X) around
X0 with robust-rescaled noise S' = S / w:

    lam = J^T S'^-1 J        eta = J^T S'^-1 (J X0 - v(X0))

which is invariant to the sign convention of v. A Tukey weight w is computed
from the Mahalanobis norm of the unrobustified residual at X0; w = 0 turns
the factor into a zero-information message until beliefs move again.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, ContractViolation, DegeneratePlaneError
from .gaussians import GaussianInfo
from .geometry import (
    EPS_DEPTH,
    EPS_PLANE,
    CameraModel,
    PlaneParams,
    Pose,
    plane_boxminus,
    proj_jacobian_cam_batch,
    project_cam_batch,
    so3_exp_batch,
    so3_hat_batch,
    so3_right_jacobian_batch,
    transform_plane,
    transform_plane_jacobians_batch,
    transform_plane_min_batch,
)
from .graph import (
    COMBINED_RIGID_REPROJECTION,
    LINEAR,
    PLANE_POINT,
    PLANE_PREDICTION,
    PRIOR,
    REPROJECTION,
    RIGID_PLANE_PREDICTION,
    RIGID_REPROJECTION,
    FactorNode,
    StoredLinearisation,
)

TUKEY_SCALE_DEFAULT = 4.685  # 95% efficiency constant, Mahalanobis units

LINEAR_KINDS = {PRIOR, LINEAR}

# Factor kinds whose residuals are pixel errors; these define the average
# reprojection error used as the convergence criterion.
PIXEL_KINDS = {REPROJECTION, RIGID_REPROJECTION, COMBINED_RIGID_REPROJECTION}


@dataclass
class Residual:
    """Residual value with Jacobian blocks keyed by adjacent variable id."""

    value: np.ndarray
    jacobians: dict
    x0: np.ndarray  # stacked evaluation point, adjacency order
    valid: bool = True


# ---------------------------------------------------------------------------
# Batched evaluators (hot path). Parameter stacks are (n, dim) arrays.
# ---------------------------------------------------------------------------

def eval_reprojection_batch(cam: CameraModel, z, c, p, want_jac=True):
    R = so3_exp_batch(c[:, 3:])
    p_cam = (R @ p[:, :, None])[:, :, 0] + c[:, :3]
    pix, valid = project_cam_batch(cam, p_cam)
    value = z - pix
    if not want_jac:
        return value, None, None, valid
    safe = p_cam.copy()
    safe[~valid, 2] = 1.0
    Jproj = proj_jacobian_cam_batch(cam, safe)
    dp_dw = -(R @ so3_hat_batch(p)) @ so3_right_jacobian_batch(c[:, 3:])
    Jc = np.concatenate([-Jproj, -Jproj @ dp_dw], axis=2)
    Jp = -Jproj @ R
    return value, Jc, Jp, valid


def eval_plane_point_batch(m, p, want_jac=True):
    d = np.linalg.norm(m, axis=-1)
    valid = d > EPS_PLANE
    ds = np.where(valid, d, 1.0)
    n = m / ds[:, None]
    value = (np.einsum("ni,ni->n", n, p) - ds)[:, None]
    if not want_jac:
        return value, None, None, valid
    Jp = n[:, None, :]
    proj = np.eye(3)[None] - n[:, :, None] * n[:, None, :]
    Jm = (np.einsum("ni,nij->nj", p, proj) / ds[:, None] - n)[:, None, :]
    return value, Jm, Jp, valid


def eval_plane_prediction_batch(z, pi, c, want_jac=True):
    d_in = np.linalg.norm(pi, axis=-1)
    valid = d_in > EPS_PLANE
    pi_safe = np.where(valid[:, None], pi, [[0.0, 0.0, 1.0]])
    R = so3_exp_batch(c[:, 3:])
    if want_jac:
        m_cam, dm_dpose, dm_dm = transform_plane_jacobians_batch(
            R, c[:, :3], c[:, 3:], pi_safe
        )
    else:
        m_cam = transform_plane_min_batch(R, c[:, :3], pi_safe)
    valid &= np.linalg.norm(m_cam, axis=-1) > EPS_PLANE
    value = z - m_cam
    if not want_jac:
        return value, None, None, valid
    return value, -dm_dm, -dm_dpose, valid


def eval_rigid_plane_prediction_batch(z, pi_conv, r, c, want_jac=True):
    Rr = so3_exp_batch(r[:, 3:])
    Rc = so3_exp_batch(c[:, 3:])
    if want_jac:
        m_world, dmw_dr, _ = transform_plane_jacobians_batch(
            Rr, r[:, :3], r[:, 3:], pi_conv
        )
    else:
        m_world = transform_plane_min_batch(Rr, r[:, :3], pi_conv)
    valid = np.linalg.norm(m_world, axis=-1) > EPS_PLANE
    mw_safe = np.where(valid[:, None], m_world, [[0.0, 0.0, 1.0]])
    if want_jac:
        m_cam, dmc_dc, dmc_dmw = transform_plane_jacobians_batch(
            Rc, c[:, :3], c[:, 3:], mw_safe
        )
    else:
        m_cam = transform_plane_min_batch(Rc, c[:, :3], mw_safe)
    valid &= np.linalg.norm(m_cam, axis=-1) > EPS_PLANE
    value = z - m_cam
    if not want_jac:
        return value, None, None, valid
    Jr = -(dmc_dmw @ dmw_dr)
    Jc = -dmc_dc
    return value, Jr, Jc, valid


def eval_rigid_reprojection_batch(cam: CameraModel, z, p_conv, c, r, want_jac=True):
    Rr = so3_exp_batch(r[:, 3:])
    Rc = so3_exp_batch(c[:, 3:])
    p_world = (Rr @ p_conv[:, :, None])[:, :, 0] + r[:, :3]
    p_cam = (Rc @ p_world[:, :, None])[:, :, 0] + c[:, :3]
    pix, valid = project_cam_batch(cam, p_cam)
    value = z - pix
    if not want_jac:
        return value, None, None, valid
    safe = p_cam.copy()
    safe[~valid, 2] = 1.0
    Jproj = proj_jacobian_cam_batch(cam, safe)
    dpc_dwc = -(Rc @ so3_hat_batch(p_world)) @ so3_right_jacobian_batch(c[:, 3:])
    Jc = np.concatenate([-Jproj, -Jproj @ dpc_dwc], axis=2)
    dpw_dwr = -(Rr @ so3_hat_batch(p_conv)) @ so3_right_jacobian_batch(r[:, 3:])
    JR = -Jproj @ Rc
    Jr = np.concatenate([JR, JR @ dpw_dwr], axis=2)
    return value, Jc, Jr, valid


# ---------------------------------------------------------------------------
# Single-instance residual API
# ---------------------------------------------------------------------------

def residual_reprojection(c: Pose, p, z, cam: CameraModel) -> Residual:
    value, Jc, Jp, valid = eval_reprojection_batch(
        cam, np.asarray(z, float)[None], c.r[None], np.asarray(p, float)[None]
    )
    if not valid[0]:
        raise BehindCameraError("point behind camera")
    return Residual(value[0], {"pose": Jc[0], "point": Jp[0]},
                    np.concatenate([c.r, np.asarray(p, float)]))


def residual_plane_point(p, pi: PlaneParams) -> Residual:
    value, Jm, Jp, valid = eval_plane_point_batch(
        pi.m[None], np.asarray(p, float)[None]
    )
    if not valid[0]:
        raise DegeneratePlaneError("degenerate plane in plane-point residual")
    return Residual(value[0], {"plane": Jm[0], "point": Jp[0]},
                    np.concatenate([pi.m, np.asarray(p, float)]))


def residual_plane_prediction(pi: PlaneParams, c: Pose, z_pi: PlaneParams) -> Residual:
    value, Jpi, Jc, valid = eval_plane_prediction_batch(
        z_pi.m[None], pi.m[None], c.r[None]
    )
    if not valid[0]:
        raise DegeneratePlaneError("degenerate plane in prediction residual")
    return Residual(value[0], {"plane": Jpi[0], "pose": Jc[0]},
                    np.concatenate([pi.m, c.r]))


def residual_rigid_plane_prediction(
    r: Pose, c: Pose, z_pi: PlaneParams, pi_conv: PlaneParams
) -> Residual:
    value, Jr, Jc, valid = eval_rigid_plane_prediction_batch(
        z_pi.m[None], pi_conv.m[None], r.r[None], c.r[None]
    )
    if not valid[0]:
        raise DegeneratePlaneError("degenerate plane in rigid prediction residual")
    return Residual(value[0], {"rigid": Jr[0], "pose": Jc[0]},
                    np.concatenate([r.r, c.r]))


def residual_rigid_reprojection(c: Pose, r: Pose, z, p_conv, cam: CameraModel) -> Residual:
    value, Jc, Jr, valid = eval_rigid_reprojection_batch(
        cam, np.asarray(z, float)[None], np.asarray(p_conv, float)[None],
        c.r[None], r.r[None]
    )
    if not valid[0]:
        raise BehindCameraError("rigid point behind camera")
    return Residual(value[0], {"pose": Jc[0], "rigid": Jr[0]},
                    np.concatenate([c.r, r.r]))


# ---------------------------------------------------------------------------
# Robust loss
# ---------------------------------------------------------------------------

def tukey_weight(rho: float, c: float) -> float:
    """Covariance-rescaling weight; hard zero beyond the cutoff."""
    if c <= 0:
        raise ContractViolation("tukey scale must be positive")
    if rho > c:
        return 0.0
    x = rho / c
    return (1.0 - x * x) ** 2


def tukey_rescale(residual_mahalanobis: float, sigma, c: float):
    """(sigma', weight): rescaled noise; sigma' is None when weight is 0."""
    w = tukey_weight(residual_mahalanobis, c)
    if w == 0.0:
        return None, 0.0
    return np.asarray(sigma, float) / np.sqrt(w), w


def tukey_weight_batch(rho: np.ndarray, c) -> np.ndarray:
    x = np.clip(rho / c, 0.0, 1.0)
    w = (1.0 - x * x) ** 2
    return np.where(rho > c, 0.0, w)


# ---------------------------------------------------------------------------
# Graph-level evaluation (object path: tests, reference solvers)
# ---------------------------------------------------------------------------

def _params_of(graph, factor: FactorNode, means: dict) -> list:
    return [np.asarray(means[vid], dtype=float) for vid in factor.adjacency]


def evaluate_factor(graph, factor: FactorNode, means: dict, want_jac=True) -> Residual:
    """Residual of one factor at the given variable means.

    Invalid rows (cheirality/degeneracy) come back with valid=False and
    zeroed Jacobians instead of raising, matching the engine's outlier
    handling.
    """
    params = _params_of(graph, factor, means)
    x0 = np.concatenate(params)
    kind = factor.kind
    if kind == PRIOR:
        value = params[0] - factor.measurement
        dim = value.shape[0]
        return Residual(value, {factor.adjacency[0]: np.eye(dim)}, x0)
    if kind == LINEAR:
        A = factor.payload["A"]
        value = factor.measurement - A @ x0
        jac, off = {}, 0
        for vid, p in zip(factor.adjacency, params):
            jac[vid] = -A[:, off : off + p.shape[0]]
            off += p.shape[0]
        return Residual(value, jac, x0)
    if kind == REPROJECTION:
        value, J0, J1, valid = eval_reprojection_batch(
            graph.camera, factor.measurement[None], params[0][None], params[1][None],
            want_jac=want_jac,
        )
    elif kind == PLANE_POINT:
        value, J0, J1, valid = eval_plane_point_batch(
            params[0][None], params[1][None], want_jac=want_jac
        )
    elif kind == PLANE_PREDICTION:
        value, J0, J1, valid = eval_plane_prediction_batch(
            factor.measurement[None], params[0][None], params[1][None], want_jac=want_jac
        )
    elif kind == RIGID_REPROJECTION:
        value, J0, J1, valid = eval_rigid_reprojection_batch(
            graph.camera, factor.measurement[None],
            factor.payload["p_conv"][None], params[0][None], params[1][None],
            want_jac=want_jac,
        )
    elif kind == RIGID_PLANE_PREDICTION:
        value, J0, J1, valid = eval_rigid_plane_prediction_batch(
            factor.measurement[None], factor.payload["pi_conv"][None],
            params[0][None], params[1][None], want_jac=want_jac,
        )
    elif kind == COMBINED_RIGID_REPROJECTION:
        cons = factor.constituents()
        zs = np.stack([np.asarray(z, float) for z, _ in cons])
        ps = np.stack([np.asarray(pc, float) for _, pc in cons])
        n = len(cons)
        value, J0, J1, valid = eval_rigid_reprojection_batch(
            graph.camera, zs, ps,
            np.repeat(params[0][None], n, axis=0), np.repeat(params[1][None], n, axis=0),
            want_jac=want_jac,
        )
        ok = bool(np.all(valid))
        jac = {}
        if want_jac:
            J0 = np.where(valid[:, None, None], J0, 0.0)
            J1 = np.where(valid[:, None, None], J1, 0.0)
            jac = {factor.adjacency[0]: J0.reshape(-1, 6),
                   factor.adjacency[1]: J1.reshape(-1, 6)}
        value = np.where(valid[:, None], value, 0.0)
        res = Residual(value.reshape(-1), jac, x0, valid=ok)
        res.constituent_valid = valid
        return res
    else:
        raise ContractViolation(f"cannot evaluate factor kind {kind}")

    ok = bool(valid[0])
    jac = {}
    if want_jac:
        if not ok:
            J0 = np.zeros_like(J0)
            J1 = np.zeros_like(J1)
        jac = {factor.adjacency[0]: J0[0], factor.adjacency[1]: J1[0]}
    return Residual(value[0] if ok else np.zeros_like(value[0]), jac, x0, valid=ok)


def _sigma_stack(factor: FactorNode) -> np.ndarray:
    if factor.kind == COMBINED_RIGID_REPROJECTION:
        return np.tile(factor.sigma, len(factor.constituents()))
    return factor.sigma


def factor_energy(graph, factor: FactorNode, means: dict) -> float:
    """Half squared Mahalanobis residual with the unrobustified noise."""
    res = evaluate_factor(graph, factor, means, want_jac=False)
    sigma = _sigma_stack(factor)
    return float(0.5 * np.sum((res.value / sigma) ** 2))


def graph_energy(graph, means: dict) -> float:
    return sum(factor_energy(graph, f, means) for f in graph.factors.values())


def linearise(graph, factor: FactorNode, means: dict) -> GaussianInfo:
    """Linearised Gaussian over the factor's joint support; stores X0.

    Combined factors accumulate their constituents, each with its own
    robust weight. An outlier-flagged residual produces a zero-information
    factor for this iteration.
    """
    res = evaluate_factor(graph, factor, means)
    dims = [graph.variables[vid].dim for vid in factor.adjacency]
    total = int(sum(dims))
    sigma = _sigma_stack(factor)

    if not res.valid and factor.kind != COMBINED_RIGID_REPROJECTION:
        g = GaussianInfo.zero(total)
        factor.linearisation = StoredLinearisation(res.x0, g, 0.0)
        return g

    J = np.zeros((res.value.shape[0], total))
    off = 0
    for vid, d in zip(factor.adjacency, dims):
        J[:, off : off + d] = res.jacobians[vid]
        off += d

    inv_var = 1.0 / (sigma**2)
    if factor.robust == "tukey":
        if factor.kind == COMBINED_RIGID_REPROJECTION:
            v2 = (res.value**2 * inv_var).reshape(-1, 2).sum(axis=1)
            rho = np.sqrt(v2)
            w = tukey_weight_batch(rho, factor.robust_scale)
            weights = np.repeat(w, 2)
            mean_weight = float(np.mean(w))
        else:
            rho = float(np.sqrt(np.sum(res.value**2 * inv_var)))
            mean_weight = tukey_weight(rho, factor.robust_scale)
            weights = np.full(res.value.shape[0], mean_weight)
    else:
        weights = np.ones(res.value.shape[0])
        mean_weight = 1.0

    D = inv_var * weights
    Jw = J * D[:, None]
    lam = J.T @ Jw
    eta = Jw.T @ (J @ res.x0 - res.value)
    g = GaussianInfo(eta, lam)
    factor.linearisation = StoredLinearisation(res.x0.copy(), g, mean_weight)
    return g


def needs_relinearisation(factor: FactorNode, means: dict, beta: float) -> bool:
    """True when beliefs drifted more than beta (L1) from the stored point."""
    if factor.linearisation is None:
        return True
    if factor.kind in LINEAR_KINDS:
        return False
    x = np.concatenate([np.asarray(means[vid], float) for vid in factor.adjacency])
    return float(np.sum(np.abs(x - factor.linearisation.x0))) > beta
