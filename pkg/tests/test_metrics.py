import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as st_np

from handsdf.helper.eval_utils.metrics import (
    CHAMFER_CONVENTION,
    chamfer_distance,
    end_point_error,
    evaluate_meshes,
    f_score,
    intersection_volume,
    voxel_centers,
)
from handsdf.helper.ext_utils.exceptions import InvalidInputError
from handsdf.helper.hand_utils.kinematics import HandPose
from handsdf.helper.sdf_utils.field import Box, Sphere
from handsdf.helper.sdf_utils.mesh import Mesh

cloud = st_np.arrays(
    np.float64, st.tuples(st.integers(1, 20), st.just(3)), elements=st.floats(-100.0, 100.0)
)


def cube(center, half=10.0):
    return Box(np.asarray(center, dtype=np.float64), np.full(3, half)).to_mesh()


def test_chamfer_examples():
    origin = np.zeros((1, 3))
    assert chamfer_distance(origin, origin) == 0.0
    assert chamfer_distance(origin, np.array([[3.0, 0.0, 0.0]])) == pytest.approx(18.0)
    two = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    assert chamfer_distance(two, origin) == pytest.approx(50.0)


@settings(max_examples=50, deadline=None)
@given(cloud, cloud)
def test_chamfer_is_symmetric(a, b):
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a))
    assert chamfer_distance(a, a) == 0.0


@pytest.mark.parametrize(
    ("pred", "gt", "expected"),
    [
        ([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], 1.0),
        ([[0.0, 0.0, 0.0]], [[50.0, 0.0, 0.0]], 0.0),
        ([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]], 2.0 / 3.0),
        # the threshold itself is not a match
        ([[5.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]], 0.0),
    ],
)
def test_f_score(pred, gt, expected):
    assert f_score(np.array(pred), np.array(gt), 5.0) == pytest.approx(expected)


def test_point_set_validation():
    with pytest.raises(InvalidInputError):
        chamfer_distance(np.zeros((0, 3)), np.zeros((1, 3)))
    with pytest.raises(InvalidInputError):
        f_score(np.array([[np.nan, 0.0, 0.0]]), np.zeros((1, 3)), 5.0)
    with pytest.raises(InvalidInputError):
        f_score(np.zeros((1, 3)), np.zeros((1, 3)), 0.0)


def test_voxel_centers():
    xs, ys, zs = voxel_centers(np.zeros(3), np.array([2.0, 1.5, 0.0]), 1.0)
    np.testing.assert_allclose(xs, [0.5, 1.5])
    np.testing.assert_allclose(ys, [0.5, 1.5])
    assert len(zs) == 0


def test_intersection_of_offset_cubes():
    # overlap is 10 x 20 x 20 mm
    assert intersection_volume(cube([0, 0, 0]), cube([10, 0, 0])) == pytest.approx(4.0)
    assert intersection_volume(cube([0, 0, 0]), cube([10, 0, 0]), voxel=2.0) == pytest.approx(4.0)


def test_identical_cubes_share_their_volume():
    # 20 mm cube, 80 voxel centers per axis
    assert intersection_volume(cube([0, 0, 0]), cube([0, 0, 0]), voxel=0.25) == pytest.approx(
        8.0, rel=0.02
    )


def brute_sq_distances(a, b):
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(17)
    a, b = rng.uniform(0.0, 100.0, (2000, 3)), rng.uniform(0.0, 100.0, (1500, 3))
    d = brute_sq_distances(a, b)
    assert chamfer_distance(a, b) == d.min(axis=1).mean() + d.min(axis=0).mean()


@pytest.mark.parametrize("threshold", [5.0, 10.0])
def test_f_score_matches_brute_force(threshold):
    rng = np.random.default_rng(18)
    pred, gt = rng.uniform(0.0, 100.0, (1800, 3)), rng.uniform(0.0, 100.0, (2000, 3))
    d = brute_sq_distances(pred, gt)
    precision = float((d.min(axis=1) < threshold**2).mean())
    recall = float((d.min(axis=0) < threshold**2).mean())
    expected = 2.0 * precision * recall / (precision + recall)
    assert f_score(pred, gt, threshold) == expected


def test_intersection_edge_cases():
    assert intersection_volume(cube([0, 0, 0]), cube([50, 0, 0])) == 0.0
    assert intersection_volume(cube([0, 0, 0]), Mesh.empty()) == 0.0
    with pytest.raises(InvalidInputError):
        intersection_volume(cube([0, 0, 0]), cube([0, 0, 0]), voxel=0.0)


def test_self_intersection_is_volume():
    sphere = Sphere(np.zeros(3), 20.0)
    mesh = sphere.to_mesh()
    expected = sphere.volume() / 1000.0
    assert intersection_volume(mesh, mesh) == pytest.approx(expected, rel=0.03)
    assert intersection_volume(mesh, mesh.flipped()) == pytest.approx(expected, rel=0.03)


def test_end_point_error(hand):
    pose = HandPose.zero()
    moved = HandPose(np.zeros(45), np.array([0.0, 0.3, 0.0]), np.array([5.0, 0.0, 0.0]))
    assert end_point_error(pose, moved, hand) == 0.0
    bent = pose.with_articulation(np.r_[np.zeros(9), 0.5, np.zeros(35)])
    assert end_point_error(pose, bent, hand) > 0.0


def test_evaluate_identical_meshes():
    mesh = Sphere(np.zeros(3), 30.0).to_mesh()
    report = evaluate_meshes(mesh, mesh, samples=2000, seed=3)
    assert report.chamfer == 0.0
    assert report.f5 == report.f10 == 1.0
    assert report.intersection_volume is None
    assert report.epe is None
    data = report.to_dict()
    assert data["thresholds"] == [5.0, 10.0]
    assert data["chamfer_convention"] == CHAMFER_CONVENTION
    assert data["pred_points"] == data["gt_points"] == 2000


def test_evaluate_with_hand_and_poses(hand):
    pred = cube([0, 0, 0])
    gt = cube([2, 0, 0])
    report = evaluate_meshes(
        pred, gt, hand=cube([10, 0, 0]), poses=(HandPose.zero(), HandPose.zero()),
        model=hand, samples=3000,
    )
    assert 0.0 < report.chamfer < 10.0
    assert report.f5 > 0.9
    assert report.intersection_volume == pytest.approx(4.0)
    assert report.epe == 0.0


def test_evaluate_rejects_empty():
    with pytest.raises(InvalidInputError):
        evaluate_meshes(Mesh.empty(), cube([0, 0, 0]))
