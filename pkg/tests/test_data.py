import asyncio

import numpy as np
import pytest

from handsdf.helper.ext_utils.exceptions import InvalidInputError
from handsdf.helper.hand_utils.camera import Intrinsics, project_points
from handsdf.helper.hand_utils.kinematics import HandPose, hand_sdf, hand_surface_points
from handsdf.helper.scene_utils.data import (
    MeshSdf,
    SampleSet,
    generate_grasp_scene,
    make_primitive,
    palm_center,
    place_object,
    point_mesh_sdf,
    read_scene,
    sample_counts,
    sample_points,
    scene_conditioning,
    scene_dir,
    write_scene,
)
from handsdf.helper.sdf_utils.field import Box, Sphere
from handsdf.helper.sdf_utils.mesh import Mesh

TINY_CAMERA = Intrinsics.centered(40.0, (16, 16))


@pytest.mark.parametrize(
    ("n", "ratio", "expected"),
    [(100, 0.95, (95, 5)), (10, 0.95, (10, 0)), (7, 0.0, (0, 7)), (20, 0.5, (10, 10))],
)
def test_sample_counts(n, ratio, expected):
    assert sample_counts(n, ratio) == expected


def test_sample_set_lengths():
    with pytest.raises(InvalidInputError):
        SampleSet(np.zeros((3, 3)), np.zeros(2), np.zeros(3, dtype=bool))


def test_sample_points(small_scene):
    samples = sample_points(small_scene, 400, 5.0, small_scene.bounds, seed=9)
    near_count, uniform_count = sample_counts(400)
    assert len(samples) == 400
    assert samples.near_surface.sum() == near_count
    assert np.all(samples.near_surface[:near_count])
    np.testing.assert_allclose(samples.sdf_values, small_scene.obj.evaluate(samples.points))
    assert np.all(np.abs(samples.sdf_values[:near_count]) <= 5.0)

    uniform = samples.points[near_count:]
    assert len(uniform) == uniform_count
    assert np.all(uniform >= small_scene.bounds[0]) and np.all(uniform <= small_scene.bounds[1])
    pixels = project_points(small_scene.camera, small_scene.global_pose, uniform)
    assert np.all((pixels >= 0) & (pixels <= 15))


def test_sample_points_is_seeded(small_scene):
    a = sample_points(small_scene, 50, 5.0, small_scene.bounds, seed=4)
    b = sample_points(small_scene, 50, 5.0, small_scene.bounds, seed=4)
    c = sample_points(small_scene, 50, 5.0, small_scene.bounds, seed=5)
    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)


def test_sample_points_validation(small_scene):
    with pytest.raises(InvalidInputError):
        sample_points(small_scene, 0, 5.0, small_scene.bounds, seed=0)
    with pytest.raises(InvalidInputError):
        sample_points(small_scene, 10, 0.0, small_scene.bounds, seed=0)
    behind = np.array([[-10.0, -10.0, -900.0], [10.0, 10.0, -800.0]])
    with pytest.raises(InvalidInputError):
        sample_points(small_scene, 40, 5.0, behind, seed=0, near_ratio=0.5)


def test_point_mesh_sdf_matches_box():
    box = Box(np.array([5.0, 0.0, 0.0]), np.array([10.0, 20.0, 15.0]))
    pts = np.random.default_rng(2).uniform(-30.0, 40.0, (60, 3))
    np.testing.assert_allclose(point_mesh_sdf(box.to_mesh(), pts), box.sdf(pts), atol=1e-9)
    assert point_mesh_sdf(box.to_mesh(), np.array([5.0, 0.0, 0.0])) == pytest.approx(-10.0)


def test_point_mesh_sdf_flags_open_meshes():
    closed = Box(np.zeros(3), np.full(3, 10.0)).to_mesh()
    opened = Mesh(closed.vertices, closed.triangles[1:])
    center = np.zeros((1, 3))
    values, watertight = point_mesh_sdf(closed, center, with_flag=True)
    assert watertight
    np.testing.assert_allclose(values, [-10.0], atol=1e-9)
    values, watertight = point_mesh_sdf(opened, center, with_flag=True)
    assert not watertight
    # one missing face still leaves a winding number near 11/12
    np.testing.assert_allclose(values, [-10.0], atol=1e-9)
    assert not MeshSdf(opened).watertight


def test_mesh_sdf_field():
    mesh = Sphere(np.zeros(3), 30.0).to_mesh()
    field = MeshSdf(mesh)
    assert field.watertight
    np.testing.assert_allclose(field.bounds, [[-40.0] * 3, [40.0] * 3])
    values = field.evaluate(np.array([[0.0, 0.0, 0.0], [45.0, 0.0, 0.0]]))
    assert values[0] == pytest.approx(-30.0, abs=0.2)
    assert values[1] == pytest.approx(15.0, abs=0.2)


@pytest.mark.parametrize(
    ("kind", "largest"),
    [("sphere", (30.0, 120.0)), ("box", (30.0, 100.0)), ("capsule", (40.0, 120.0)),
     ("cylinder", (30.0, 100.0))],
)
def test_make_primitive(kind, largest):
    rng = np.random.default_rng(11)
    for _ in range(20):
        primitive = make_primitive(kind, rng)(np.array([1.0, 2.0, 3.0]))
        assert primitive.kind == kind
        assert primitive.sdf(np.array([[1.0, 2.0, 3.0]]))[0] < 0
        lo, hi = largest
        assert lo - 1e-9 <= primitive_extent(primitive) <= hi + 1e-9


def primitive_extent(primitive):
    if primitive.kind == "sphere":
        return 2.0 * primitive.radius
    if primitive.kind == "box":
        return 2.0 * primitive.half_extents.max()
    if primitive.kind == "capsule":
        return np.linalg.norm(primitive.end - primitive.start) + 2.0 * primitive.radius
    return 2.0 * max(primitive.radius, primitive.half_height)


def test_make_primitive_unknown():
    with pytest.raises(InvalidInputError):
        make_primitive("torus", np.random.default_rng(0))


def test_place_object_clears_the_hand(hand):
    theta = np.zeros(45)
    rng = np.random.default_rng(3)
    center = place_object(lambda c: Sphere(c, 20.0), hand, theta, rng)
    palm = palm_center(hand, theta)
    assert center[2] < palm[2]
    sphere = Sphere(center, 20.0)
    hand_points, _ = hand_surface_points(hand, theta, 16)
    clearance = sphere.sdf(hand_points).min()
    assert 0.0 <= clearance < 10.0
    assert hand_sdf(hand, theta).evaluate(sphere.to_mesh().vertices).min() >= 0.0


def test_scene_dir():
    assert scene_dir("/data", 7).endswith("scene_00007")


def test_generate_is_deterministic():
    a = generate_grasp_scene("sphere", 3, intrinsics=TINY_CAMERA)
    b = generate_grasp_scene("sphere", 3, intrinsics=TINY_CAMERA)
    assert a.grasp == b.grasp
    np.testing.assert_array_equal(a.pose.to_array(), b.pose.to_array())
    np.testing.assert_array_equal(a.image, b.image)


@pytest.mark.parametrize("kind", ["sphere", "box", "capsule", "cylinder"])
def test_generated_scene(kind):
    scene = generate_grasp_scene(kind, 21, intrinsics=TINY_CAMERA)
    assert scene.kind == kind
    assert scene.image.shape == (16, 16, 2)
    assert scene.image[:, :, 0].sum() > 0
    assert np.all((scene.image >= 0.0) & (scene.image <= 1.0))
    lo, hi = scene.obj.bounds
    assert np.all(lo >= scene.bounds[0]) and np.all(hi <= scene.bounds[1])
    hand_points, _ = hand_surface_points(scene.model, scene.pose.articulation, 64)
    assert scene.obj.evaluate(hand_points).min() >= -1.0
    assert np.linalg.norm(scene.pose.global_rotation) <= 0.3 + 1e-9


def test_generate_unknown_kind():
    with pytest.raises(InvalidInputError):
        generate_grasp_scene("torus", 0)


def test_scene_round_trip(tmp_path, small_scene):
    samples = sample_points(small_scene, 30, 5.0, small_scene.bounds, seed=1)
    directory = scene_dir(str(tmp_path), 0)
    asyncio.run(write_scene(directory, small_scene, samples))
    scene, back = asyncio.run(read_scene(directory))
    assert scene.kind == "sphere"
    np.testing.assert_array_equal(scene.pose.to_array(), small_scene.pose.to_array())
    # stored as float32
    np.testing.assert_array_equal(scene.image, small_scene.image.astype(np.float32))
    np.testing.assert_array_equal(back.points, samples.points.astype(np.float32))
    np.testing.assert_array_equal(back.sdf_values, samples.sdf_values.astype(np.float32))
    np.testing.assert_array_equal(back.near_surface, samples.near_surface)
    assert scene.camera.intrinsics == small_scene.camera.intrinsics
    pts = samples.points
    np.testing.assert_allclose(scene.obj.evaluate(pts), small_scene.obj.evaluate(pts))
    assert len(scene.mesh.triangles) == len(small_scene.mesh.triangles)


def test_scene_conditioning(small_scene):
    context = scene_conditioning(small_scene, 3)
    assert [level.shape for level in context.levels] == [(16, 16, 2), (8, 8, 2), (4, 4, 2)]
    np.testing.assert_array_equal(context.articulation, small_scene.pose.articulation)
    moved = scene_conditioning(small_scene, 3, articulation=np.full(45, 0.1))
    np.testing.assert_array_equal(moved.articulation, 0.1)
    assert isinstance(small_scene.pose, HandPose)
