"""
Synthetic grasp scenes and SDF supervision: a primitive object placed against
a posed capsule hand, a rendered mask/depth image, and near-surface biased
query samples labeled with exact signed distances.
"""

from dataclasses import dataclass
from os import path as ospath

import numpy as np
from scipy.spatial.transform import Rotation
from tenacity import RetryError, retry, retry_if_exception_type, stop_after_attempt

from handsdf import LOGGER
from handsdf.helper.ext_utils.exceptions import (
    InvalidInputError,
    PlacementError,
    SceneGenerationError,
)
from handsdf.helper.ext_utils.files_utils import (
    decode_image,
    decode_samples,
    encode_image,
    encode_samples,
    read_bytes,
    read_json,
    write_bytes,
    write_json,
)
from handsdf.helper.ext_utils.task_utils import parallel_map
from handsdf.helper.hand_utils.camera import (
    Intrinsics,
    WeakPerspective,
    camera_from_dict,
    camera_to_dict,
    in_front,
    project_points,
    weak_to_full,
)
from handsdf.helper.hand_utils.kinematics import (
    GRASP_LIBRARY,
    HandPose,
    default_hand,
    forward_kinematics,
    global_transform,
    hand_model_from_dict,
    hand_model_to_dict,
    hand_sdf,
    hand_surface_points,
    pose_jitter,
)
from handsdf.helper.sdf_utils.field import (
    PRIMITIVE_KINDS,
    AnalyticSdf,
    Box,
    Capsule,
    Cylinder,
    SdfField,
    Sphere,
    as_bounds,
    pyramid_levels,
)
from handsdf.helper.sdf_utils.mesh import (
    export_mesh,
    import_mesh,
    point_mesh_distance,
    sample_surface,
    winding_number,
)
from handsdf.helper.sdf_utils.neural import SceneConditioning

PLACEMENT_ATTEMPTS = 10
MAX_PENETRATION = 1.0
PLACEMENT_CLEARANCE = 0.5
PALM_JOINTS = (0, 4, 7, 10, 13)
SCENE_DEPTH = 550.0
TRACE_STEPS = 64
TRACE_EPSILON = 0.5


@dataclass(frozen=True, eq=False)
class SceneSpec:
    kind: str
    obj: AnalyticSdf
    mesh: object
    model: object
    pose: HandPose
    camera: object
    image: np.ndarray
    bounds: np.ndarray
    grasp: str = ""

    @property
    def global_pose(self):
        return global_transform(self.pose)


@dataclass(frozen=True, eq=False)
class SampleSet:
    points: np.ndarray
    sdf_values: np.ndarray
    near_surface: np.ndarray

    def __post_init__(self):
        if not (len(self.points) == len(self.sdf_values) == len(self.near_surface)):
            raise InvalidInputError("sample arrays must have equal length")

    def __len__(self):
        return len(self.points)


def sample_counts(n, near_ratio=0.95):
    """Uniform count is floor((1 - ratio) n); near-surface samples take the rest."""
    uniform = int(np.floor((1.0 - near_ratio) * n))
    return n - uniform, uniform


def sample_points(scene, n, surface_band, bounds, seed, near_ratio=0.95):
    """
    Supervision samples: surface points pushed along their normal by
    N(0, band / 3) (offsets and labels beyond the band are redrawn), then
    uniform points inside `bounds` that are in front of the camera and project
    into the image. Labels come from the analytic object.
    """
    if n < 1:
        raise InvalidInputError("sample count must be at least 1")
    if not surface_band > 0:
        raise InvalidInputError("surface band must be positive")
    bounds = as_bounds(bounds)
    rng = np.random.default_rng(seed)
    near_count, uniform_count = sample_counts(n, near_ratio)

    near = []
    have = 0
    while have < near_count:
        want = 2 * (near_count - have) + 8
        surface, normals = sample_surface(scene.mesh, want, seed=rng.integers(2**32))
        offsets = rng.normal(0.0, surface_band / 3.0, want)
        points = surface + offsets[:, None] * normals
        sdf = scene.obj.evaluate(points)
        keep = (np.abs(offsets) <= surface_band) & (np.abs(sdf) <= surface_band)
        near.append(points[keep][: near_count - have])
        have += len(near[-1])

    uniform = []
    have = 0
    rounds = 0
    width, height = scene.camera.intrinsics.image_size
    while have < uniform_count:
        rounds += 1
        if rounds > 1000:
            raise InvalidInputError("uniform sampling bounds do not intersect the camera view")
        want = 4 * (uniform_count - have) + 8
        points = rng.uniform(bounds[0], bounds[1], (want, 3))
        visible = in_front(scene.camera, scene.global_pose, points)
        points = points[visible]
        pixels = project_points(scene.camera, scene.global_pose, points)
        inside = (
            (pixels[:, 0] >= 0) & (pixels[:, 0] <= width - 1)
            & (pixels[:, 1] >= 0) & (pixels[:, 1] <= height - 1)
        )
        uniform.append(points[inside][: uniform_count - have])
        have += len(uniform[-1])

    points = np.concatenate(near + uniform).reshape(-1, 3)
    flags = np.zeros(len(points), dtype=bool)
    flags[:near_count] = True
    return SampleSet(points, scene.obj.evaluate(points), flags)


def point_mesh_sdf(mesh, x, with_flag=False):
    """
    Signed distance to a triangle mesh: nearest-triangle distance, negative
    where the generalized winding number exceeds one half.

    Args:
        mesh: The triangle mesh, ideally watertight.
        x: One point or an (N, 3) array.
        with_flag: Also return whether the mesh was watertight. False means
            the sign came from the winding threshold on an open surface.

    Returns:
        The signed distance (scalar or (N,)), or (distance, watertight).
    """
    x = np.asarray(x, dtype=np.float64)
    pts = x.reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("query points must be finite")
    watertight = mesh.is_watertight
    if not watertight:
        LOGGER.warning("Mesh is not watertight; sign falls back to the winding threshold")
    distance = parallel_map(lambda p: point_mesh_distance(mesh, p), pts, chunk_size=1024)
    winding = parallel_map(lambda p: winding_number(mesh, p), pts, chunk_size=1024)
    sdf = np.where(np.abs(winding) > 0.5, -distance, distance)
    sdf = float(sdf[0]) if x.ndim == 1 else sdf
    return (sdf, watertight) if with_flag else sdf


class MeshSdf(SdfField):
    def __init__(self, mesh, margin=10.0):
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        super().__init__(np.stack([lo - margin, hi + margin]))
        self.mesh = mesh
        self.watertight = mesh.is_watertight

    def _evaluate(self, points):
        return point_mesh_sdf(self.mesh, points)


def make_primitive(kind, rng):
    """
    Draws primitive parameters and returns a factory placing the shape at a
    given center; every kind's largest extent lies in 30-120 mm.
    """
    if kind == "sphere":
        radius = rng.uniform(15.0, 60.0)
        return lambda c: Sphere(c, radius)
    if kind == "box":
        half = rng.uniform(15.0, 50.0, 3)
        rotation = Rotation.random(random_state=rng).as_matrix()
        return lambda c: Box(c, half, rotation)
    if kind == "capsule":
        radius = rng.uniform(15.0, 30.0)
        length = rng.uniform(10.0, 120.0 - 2.0 * radius)
        axis = Rotation.random(random_state=rng).apply([0.0, 0.0, 1.0])
        return lambda c: Capsule(c - 0.5 * length * axis, c + 0.5 * length * axis, radius)
    if kind == "cylinder":
        radius = rng.uniform(15.0, 40.0)
        half_height = rng.uniform(15.0, 50.0)
        axis = Rotation.random(random_state=rng).apply([0.0, 0.0, 1.0])
        return lambda c: Cylinder(c, axis, radius, half_height)
    raise InvalidInputError(f"unknown primitive kind {kind!r}")


def _gap(primitive, hand_points, hand_field, object_points):
    """Signed clearance: negative when either surface sample enters the other shape."""
    return min(
        float(primitive.sdf(hand_points).min()),
        float(hand_field.evaluate(object_points).min()),
    )


def palm_center(model, articulation):
    return forward_kinematics(model, articulation).positions[list(PALM_JOINTS)].mean(axis=0)


def place_object(factory, model, articulation, rng, samples_per_bone=16):
    """
    Slides the object away from the palm along -z until it clears the hand,
    bisecting the offset down to a small clearance.
    """
    palm = palm_center(model, articulation)
    lateral = np.array([*rng.uniform(-10.0, 10.0, 2), 0.0])
    hand_points, _ = hand_surface_points(model, articulation, samples_per_bone)
    hand_field = hand_sdf(model, articulation)
    down = np.array([0.0, 0.0, -1.0])
    base = factory(np.zeros(3)).to_mesh().vertices

    def gap(d):
        center = palm + lateral + d * down
        return _gap(factory(center), hand_points, hand_field, base + center) - PLACEMENT_CLEARANCE

    lo, hi = 0.0, 20.0
    while gap(hi) < 0:
        lo, hi = hi, 2.0 * hi
        if hi > 300.0:
            raise PlacementError("object never clears the hand within 300 mm")
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 0.01:
            break
    return palm + lateral + hi * down


def render_scene(obj, hand_field, rig, global_pose, bound=150.0):
    """
    Sphere-traces the hand + object union from the camera.

    Returns:
        (height, width, 2) image: object mask and normalized depth (1 at the
        near plane, 0 at the far plane and for background).
    """
    width, height = rig.intrinsics.image_size
    cx, cy = rig.intrinsics.principal_point
    f = rig.intrinsics.focal
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    dirs = np.stack([(u - cx) / f, (v - cy) / f, np.ones_like(u)], axis=-1).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    near = max(float(rig.depth_offset[2]) - 2.0 * bound, 1.0)
    far = float(rig.depth_offset[2]) + 2.0 * bound
    rot = global_pose.rotation
    shift = global_pose.translation + rig.depth_offset

    def trace(rays):
        t = np.full(len(rays), near)
        hit = np.zeros(len(rays), dtype=bool)
        active = np.ones(len(rays), dtype=bool)
        for _ in range(TRACE_STEPS):
            if not active.any():
                break
            pts = (rays[active] * t[active, None] - shift) @ rot
            d = np.minimum(obj.evaluate(pts), hand_field.evaluate(pts))
            idx = np.flatnonzero(active)
            done = d < TRACE_EPSILON
            hit[idx[done]] = True
            t[idx[~done]] += d[~done]
            active[idx[done]] = False
            active &= t < far
        pts = (rays * t[:, None] - shift) @ rot
        mask = hit & (obj.evaluate(pts) <= hand_field.evaluate(pts))
        z = rays[:, 2] * t
        depth = np.where(hit, np.clip((far - z) / (far - near), 0.0, 1.0), 0.0)
        return np.stack([mask.astype(np.float64), depth], axis=1)

    image = parallel_map(trace, dirs, chunk_size=4096)
    return image.reshape(height, width, 2)


def generate_grasp_scene(
    kind,
    seed,
    model=None,
    jitter=0.05,
    intrinsics=None,
    bound=150.0,
):
    """
    Deterministic scene for (kind, seed): a grasp from the library with
    articulation jitter, a primitive resting against the palm side, and the
    rendered mask/depth image.
    """
    if kind not in PRIMITIVE_KINDS:
        raise InvalidInputError(f"unknown primitive kind {kind!r}")
    model = model or default_hand()
    intrinsics = intrinsics or Intrinsics.centered()
    rng = np.random.default_rng(seed)
    bounds = np.array([[-bound] * 3, [bound] * 3])

    @retry(
        stop=stop_after_attempt(PLACEMENT_ATTEMPTS),
        retry=retry_if_exception_type(PlacementError),
    )
    def attempt():
        grasp = str(rng.choice(sorted(GRASP_LIBRARY)))
        pose = HandPose(GRASP_LIBRARY[grasp])
        pose = pose_jitter(pose, jitter, int(rng.integers(2**32)))
        factory = make_primitive(kind, rng)
        center = place_object(factory, model, pose.articulation, rng)
        primitive = factory(center)
        box = primitive.aabb()
        if np.any(box[0] < bounds[0]) or np.any(box[1] > bounds[1]):
            raise PlacementError("object leaves the scene bounds")
        hand_points, _ = hand_surface_points(model, pose.articulation, 64)
        penetration = -float(primitive.sdf(hand_points).min())
        if penetration > MAX_PENETRATION:
            raise PlacementError(f"hand penetrates the object by {penetration:.2f} mm")
        return grasp, pose, primitive

    try:
        grasp, pose, primitive = attempt()
    except RetryError as e:
        raise SceneGenerationError(
            f"{kind} scene for seed {seed} failed after"
            f" {e.last_attempt.attempt_number} attempts: {e.last_attempt.exception()}"
        ) from e

    obj = AnalyticSdf(primitive)
    global_rotation = Rotation.random(random_state=rng).as_rotvec()
    global_rotation *= 0.3 * rng.random() / max(np.linalg.norm(global_rotation), 1e-12)
    center = 0.5 * (primitive.aabb().sum(axis=0) / 2.0 + palm_center(model, pose.articulation))
    rotation = Rotation.from_rotvec(global_rotation).as_matrix()
    pose = HandPose(pose.articulation, global_rotation, -rotation @ center)
    rig = weak_to_full(
        WeakPerspective(intrinsics.focal / SCENE_DEPTH, (0.0, 0.0)), intrinsics
    )
    hand = hand_sdf(model, pose.articulation)
    image = render_scene(obj, hand, rig, global_transform(pose), bound)
    return SceneSpec(kind, obj, primitive.to_mesh(), model, pose, rig, image, bounds, grasp)


def scene_dir(root, index):
    return ospath.join(root, f"scene_{index:05d}")


async def write_scene(directory, scene, samples):
    """Writes one scene in the dataset directory layout."""
    await write_json(
        ospath.join(directory, "hand.json"),
        {
            "model": hand_model_to_dict(scene.model),
            "pose": scene.pose.to_array().tolist(),
            "grasp": scene.grasp,
        },
    )
    await write_json(ospath.join(directory, "camera.json"), camera_to_dict(scene.camera))
    await write_json(
        ospath.join(directory, "object.json"),
        {"kind": scene.kind, "bounds": scene.bounds.tolist(), **scene.obj.to_dict()},
    )
    await write_bytes(ospath.join(directory, "object.obj"), export_mesh(scene.mesh, "obj"))
    await write_bytes(ospath.join(directory, "image.npyish"), encode_image(scene.image))
    await write_bytes(
        ospath.join(directory, "samples.bin"),
        encode_samples(samples.points, samples.sdf_values, samples.near_surface),
    )


async def read_scene(directory):
    """Loads (SceneSpec, SampleSet) back from a scene directory."""
    hand = await read_json(ospath.join(directory, "hand.json"))
    camera = camera_from_dict(await read_json(ospath.join(directory, "camera.json")))
    info = await read_json(ospath.join(directory, "object.json"))
    mesh = import_mesh(await read_bytes(ospath.join(directory, "object.obj")), "obj")
    image = decode_image(await read_bytes(ospath.join(directory, "image.npyish")))
    points, sdf, near = decode_samples(await read_bytes(ospath.join(directory, "samples.bin")))
    scene = SceneSpec(
        info["kind"],
        AnalyticSdf.from_dict(info),
        mesh,
        hand_model_from_dict(hand["model"]),
        HandPose.from_array(hand["pose"]),
        camera,
        image,
        np.asarray(info["bounds"], dtype=np.float64),
        hand.get("grasp", ""),
    )
    return scene, SampleSet(points, sdf, near)


def scene_conditioning(scene, levels=3, articulation=None):
    """Decoder context of a scene, optionally at a different articulation."""
    theta = scene.pose.articulation if articulation is None else articulation
    return SceneConditioning(
        scene.model,
        np.asarray(theta, dtype=np.float64),
        pyramid_levels(scene.image, levels),
        scene.camera,
        scene.global_pose,
    )
