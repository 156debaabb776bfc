import numpy as np
import pytest

from planegbp.errors import ContractViolation
from planegbp.gaussians import GaussianInfo
from planegbp.geometry import CameraModel
from planegbp.graph import (
    KEYFRAME,
    PLANE_HYPOTHESIS,
    PLANE_POINT,
    PLANE_PREDICTION,
    POINT,
    PRIOR,
    REPROJECTION,
    RIGID_BODY,
    RIGID_PLANE_PREDICTION,
    RIGID_REPROJECTION,
    FactorGraph,
)

CAM = CameraModel(fx=500, fy=500, cx=320, cy=240, width=640, height=480)


def small_graph():
    g = FactorGraph(camera=CAM)
    kf = g.add_variable(KEYFRAME, np.zeros(6))
    pts = [g.add_variable(POINT, np.array([0.1 * i, 0, 3.0])) for i in range(3)]
    for p in pts:
        g.add_factor(REPROJECTION, (kf, p), np.array([320.0, 240.0]), 2.0)
    return g, kf, pts


def test_add_then_remove_restores_graph():
    g, kf, pts = small_graph()
    before = g.snapshot_census()
    vid = g.add_variable(POINT, np.zeros(3))
    g.remove_variable(vid)
    assert g.snapshot_census() == before


def test_keyframe_count_increments():
    g = FactorGraph(camera=CAM)
    assert g.snapshot_census()["variables"][KEYFRAME] == 0
    g.add_variable(KEYFRAME, np.zeros(6))
    assert g.snapshot_census()["variables"][KEYFRAME] == 1


def test_base_experiment_census():
    # 35 keyframes, 3108 points, 10000 reprojection factors
    g = FactorGraph(camera=CAM)
    kfs = [g.add_variable(KEYFRAME, np.zeros(6)) for _ in range(35)]
    pts = [g.add_variable(POINT, np.array([0.0, 0.0, 3.0])) for _ in range(3108)]
    z = np.array([320.0, 240.0])
    for i in range(10000):
        g.add_factor(REPROJECTION, (kfs[i % 35], pts[i % 3108]), z, 2.0)
    census = g.snapshot_census()
    assert census["variables"][KEYFRAME] == 35
    assert census["variables"][POINT] == 3108
    assert census["factors"][REPROJECTION] == 10000


def test_remove_variable_with_live_factors_rejected():
    g, kf, pts = small_graph()
    with pytest.raises(ContractViolation):
        g.remove_variable(pts[0])


def test_factor_arity_and_kind_validation():
    g, kf, pts = small_graph()
    with pytest.raises(ContractViolation):  # reprojection is (keyframe, point)
        g.add_factor(REPROJECTION, (pts[0], pts[1]), np.zeros(2), 2.0)
    with pytest.raises(ContractViolation):  # dangling adjacency
        g.add_factor(REPROJECTION, (kf, 999), np.zeros(2), 2.0)
    plane = g.add_variable(PLANE_HYPOTHESIS, np.array([0, 0, 1.0]))
    fid = g.add_factor(PLANE_POINT, (plane, pts[0]), 0.0, 0.05)
    assert g.factors[fid].adjacency == (plane, pts[0])


def test_empty_graph_census_all_zero():
    census = FactorGraph().snapshot_census()
    assert census["n_variables"] == 0 and census["n_factors"] == 0
    assert all(v == 0 for v in census["variables"].values())
    assert all(v == 0 for v in census["factors"].values())


def test_removing_hypothesis_restores_raw_graph():
    g, kf, pts = small_graph()
    baseline = g.snapshot_census()
    plane = g.add_variable(PLANE_HYPOTHESIS, np.array([0, 0, 3.0]))
    fids = [g.add_factor(PLANE_POINT, (plane, p), 0.0, 0.05) for p in pts[:2]]
    fids.append(g.add_factor(PLANE_PREDICTION, (plane, kf), np.array([0, 0, 3.0]), 20.0))
    for fid in fids:
        g.remove_factor(fid)
    g.remove_variable(plane)
    assert g.snapshot_census() == baseline


def test_replace_with_rigid_body_counting():
    g, kf, pts = small_graph()
    plane = g.add_variable(PLANE_HYPOTHESIS, np.array([0, 0, 3.0]))
    for p in pts[:2]:
        g.add_factor(PLANE_POINT, (plane, p), 0.0, 0.05)
    g.add_factor(PLANE_PREDICTION, (plane, kf), np.array([0, 0, 3.0]), 20.0)
    n_vars = len(g.variables)
    conv = {plane: np.array([0, 0, 3.0]),
            pts[0]: np.array([0, 0, 3.0]), pts[1]: np.array([0.1, 0, 3.0])}
    rigid, absorbed = g.replace_with_rigid_body(plane, pts[:2], conv)
    assert absorbed == pts[:2]
    # variable count: -(1 + |absorbed|) + 1
    assert len(g.variables) == n_vars - (1 + 2) + 1
    census = g.snapshot_census()
    assert census["variables"][RIGID_BODY] == 1
    assert census["variables"][PLANE_HYPOTHESIS] == 0
    assert census["factors"][PLANE_POINT] == 0
    assert census["factors"][RIGID_REPROJECTION] == 2
    assert census["factors"][RIGID_PLANE_PREDICTION] == 1
    assert census["factors"][REPROJECTION] == 1  # the unabsorbed point keeps its
    g.check_integrity()


def test_replace_excludes_points_on_other_hypotheses_and_anchored():
    g, kf, pts = small_graph()
    plane_a = g.add_variable(PLANE_HYPOTHESIS, np.array([0, 0, 3.0]))
    plane_b = g.add_variable(PLANE_HYPOTHESIS, np.array([0, 0, 2.0]))
    for p in pts:
        g.add_factor(PLANE_POINT, (plane_a, p), 0.0, 0.05)
    g.add_factor(PLANE_POINT, (plane_b, pts[1]), 0.0, 0.05)  # shared membership
    g.add_factor(PRIOR, (pts[2],), np.array([0.2, 0, 3.0]), 1e-3)  # gauge anchor
    conv = {plane_a: np.array([0, 0, 3.0])}
    conv.update({p: np.array([0, 0, 3.0]) for p in pts})
    rigid, absorbed = g.replace_with_rigid_body(plane_a, pts, conv)
    assert absorbed == [pts[0]]  # pts[1] shared, pts[2] anchored
    assert pts[1] in g.variables and pts[2] in g.variables
    g.check_integrity()


def test_journal_replay_reconstructs_graph():
    g, kf, pts = small_graph()
    plane = g.add_variable(PLANE_HYPOTHESIS, np.array([0, 0, 3.0]))
    for p in pts[:2]:
        g.add_factor(PLANE_POINT, (plane, p), 0.0, 0.05)
    g.add_factor(PLANE_PREDICTION, (plane, kf), np.array([0, 0, 3.0]), 20.0)
    conv = {plane: np.array([0, 0, 3.0]),
            pts[0]: np.array([0, 0, 3.0]), pts[1]: np.array([0.1, 0, 3.0])}
    g.replace_with_rigid_body(plane, pts[:2], conv)
    g.remove_factor(next(iter(g.factors)))

    replayed = FactorGraph.replay(g.journal, camera=CAM)
    assert set(replayed.variables) == set(g.variables)
    assert set(replayed.factors) == set(g.factors)
    for vid, node in g.variables.items():
        twin = replayed.variables[vid]
        assert twin.kind == node.kind
        assert np.allclose(twin.prior.eta, node.prior.eta)
    for fid, fac in g.factors.items():
        twin = replayed.factors[fid]
        assert twin.kind == fac.kind and twin.adjacency == fac.adjacency
        if fac.measurement is not None:
            assert np.allclose(twin.measurement, fac.measurement)
    replayed.check_integrity()


def test_ids_never_reused():
    g, kf, pts = small_graph()
    fid = next(iter(g.factors))
    g.remove_factor(fid)
    new_fid = g.add_factor(REPROJECTION, (kf, pts[0]), np.zeros(2), 2.0)
    assert new_fid != fid
    vid = g.add_variable(POINT, np.zeros(3))
    g.remove_variable(vid)
    assert g.add_variable(POINT, np.zeros(3)) != vid


def test_bipartite_integrity_check():
    g, kf, pts = small_graph()
    g.check_integrity()
    # corrupt the structure deliberately
    g.variables[kf].factor_ids.append(98765)
    with pytest.raises(ContractViolation):
        g.check_integrity()
