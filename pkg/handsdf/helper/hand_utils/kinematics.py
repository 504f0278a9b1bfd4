"""
Capsule-skinned kinematic hand.

Frames follow the wrist convention: +x points from the wrist toward the
fingers, +y toward the thumb, the palm faces -z, and finger flexion is a
positive rotation about +y. Lengths are millimeters, angles radians.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from handsdf.helper.ext_utils.exceptions import InvalidInputError, ShapeMismatchError
from handsdf.helper.sdf_utils.field import AnalyticSdf, Capsule
from handsdf.helper.sdf_utils.mesh import Mesh

from .skeleton import ancestors_and_self, chain_order, leaf_indices, make_tree, subtree_indices

JOINT_COUNT = 16
ARTICULATION_SIZE = 45
POSE_SIZE = 51
ROTATION_TOLERANCE = 1e-6
SMALL_ANGLE = 1e-8

JOINT_NAMES = (
    "wrist",
    "thumb1", "thumb2", "thumb3",
    "index1", "index2", "index3",
    "middle1", "middle2", "middle3",
    "ring1", "ring2", "ring3",
    "pinky1", "pinky2", "pinky3",
)
JOINT_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14)


def _frozen(array, dtype=np.float64):
    out = np.array(array, dtype=dtype)
    out.flags.writeable = False
    return out


def _finite(array, what):
    array = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise InvalidInputError(f"{what} must be finite")
    return array


def _articulation(articulation):
    theta = _finite(articulation, "articulation").reshape(-1)
    if theta.size != ARTICULATION_SIZE:
        raise ShapeMismatchError(f"articulation has {theta.size} entries, expected 45")
    return theta


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = _finite(self.rotation, "rotation").reshape(3, 3)
        translation = _finite(self.translation, "translation").reshape(3)
        if (
            np.abs(rotation.T @ rotation - np.eye(3)).max() > ROTATION_TOLERANCE
            or abs(np.linalg.det(rotation) - 1.0) > ROTATION_TOLERANCE
        ):
            raise InvalidInputError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _frozen(rotation))
        object.__setattr__(self, "translation", _frozen(translation))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        return cls(Rotation.from_rotvec(np.array(_finite(rotvec, "rotation"))).as_matrix(), translation)

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other):
        """self after other: x -> self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def matrix(self):
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out


@dataclass(frozen=True, eq=False)
class HandPose:
    articulation: np.ndarray
    global_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        theta = _articulation(self.articulation)
        norms = np.linalg.norm(theta.reshape(15, 3), axis=1)
        if np.any(norms > np.pi + 1e-9):
            raise InvalidInputError("joint axis-angle magnitude exceeds pi")
        rotation = _finite(self.global_rotation, "global rotation").reshape(3)
        translation = _finite(self.global_translation, "global translation").reshape(3)
        object.__setattr__(self, "articulation", _frozen(theta))
        object.__setattr__(self, "global_rotation", _frozen(rotation))
        object.__setattr__(self, "global_translation", _frozen(translation))

    @classmethod
    def zero(cls):
        return cls(np.zeros(ARTICULATION_SIZE))

    def to_array(self):
        return np.concatenate([self.articulation, self.global_rotation, self.global_translation])

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != POSE_SIZE:
            raise ShapeMismatchError(f"pose has {values.size} entries, expected 51")
        return cls(values[:45], values[45:48], values[48:])

    def with_articulation(self, articulation):
        return replace(self, articulation=articulation)


@dataclass(frozen=True)
class Bone:
    frame: int
    start: tuple
    end: tuple
    radius: float
    contact: bool


@dataclass(frozen=True, eq=False)
class HandModel:
    """
    Fixed-topology hand: 16 frames (wrist + 15 joints) and a capsule skin.

    Bones come first one per non-root joint, spanning the parent frame from
    its origin to the joint offset, then a distal-pad and a fingertip bone
    per leaf joint running out to the leaf's tip offset.
    """

    joint_parents: tuple
    bone_offsets: np.ndarray
    tip_offsets: np.ndarray
    capsule_radii: np.ndarray
    contact_labels: np.ndarray
    joint_names: tuple = JOINT_NAMES

    def __post_init__(self):
        parents = tuple(int(p) for p in self.joint_parents)
        if len(parents) != JOINT_COUNT:
            raise InvalidInputError(
                f"hand needs exactly 15 non-root joints, got {len(parents) - 1}"
            )
        root, nodes = make_tree(parents, tuple(self.joint_names))
        offsets = _finite(self.bone_offsets, "bone offsets").reshape(JOINT_COUNT, 3)
        tips = _finite(self.tip_offsets, "tip offsets").reshape(JOINT_COUNT, 3)
        leaves = leaf_indices(nodes)
        bone_count = JOINT_COUNT - 1 + 2 * len(leaves)
        radii = _finite(self.capsule_radii, "capsule radii").reshape(-1)
        contacts = np.asarray(self.contact_labels, dtype=bool).reshape(-1)
        if radii.size != bone_count or contacts.size != bone_count:
            raise ShapeMismatchError(f"expected {bone_count} bone radii and contact flags")
        if np.any(radii <= 0):
            raise InvalidInputError("capsule radii must be positive")

        object.__setattr__(self, "joint_parents", parents)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "bone_offsets", _frozen(offsets))
        object.__setattr__(self, "tip_offsets", _frozen(tips))
        object.__setattr__(self, "capsule_radii", _frozen(radii))
        object.__setattr__(self, "contact_labels", _frozen(contacts, dtype=bool))
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "order", tuple(chain_order(root)))
        object.__setattr__(self, "leaves", tuple(leaves))

        bones = [
            Bone(parents[j], (0.0, 0.0, 0.0), tuple(offsets[j]), radii[j - 1], contacts[j - 1])
            for j in range(1, JOINT_COUNT)
        ]
        for n, leaf in enumerate(leaves):
            tip = tips[leaf]
            k = JOINT_COUNT - 1 + 2 * n
            bones.append(Bone(leaf, (0.0, 0.0, 0.0), tuple(0.5 * tip), radii[k], contacts[k]))
            bones.append(Bone(leaf, tuple(0.5 * tip), tuple(tip), radii[k + 1], contacts[k + 1]))
        object.__setattr__(self, "bones", tuple(bones))

    @property
    def bone_count(self):
        return len(self.bones)

    def parent(self, joint):
        return self.joint_parents[joint]

    def subtree(self, joint):
        return subtree_indices(self.nodes[joint])

    def chain(self, joint):
        return ancestors_and_self(self.nodes[joint])


def default_hand():
    """Average adult proportions, rest pose with straight fingers."""
    offsets = np.zeros((JOINT_COUNT, 3))
    tips = np.zeros((JOINT_COUNT, 3))
    offsets[1:4] = [(22.0, 18.0, -8.0), (28.0, 26.0, -6.0), (21.0, 19.0, -3.0)]
    tips[3] = (17.0, 15.0, -2.0)
    fingers = {
        4: ((88.0, 24.0), 40.0, 24.0, 20.0),
        7: ((90.0, 3.0), 44.0, 27.0, 21.0),
        10: ((84.0, -16.0), 41.0, 26.0, 20.0),
        13: ((76.0, -33.0), 32.0, 19.0, 18.0),
    }
    for first, ((x, y), proximal, middle, tip) in fingers.items():
        offsets[first] = (x, y, 0.0)
        offsets[first + 1] = (proximal, 0.0, 0.0)
        offsets[first + 2] = (middle, 0.0, 0.0)
        tips[first + 2] = (tip, 0.0, 0.0)

    joint_radii = [10.0, 9.0, 8.5] + [11.0, 9.0, 8.0] * 4
    leaf_radii = [8.5, 8.0, 7.5, 7.0, 7.5, 7.0, 7.0, 6.5, 6.5, 6.0]
    contacts = [False] * 15 + [True] * 10
    return HandModel(JOINT_PARENTS, offsets, tips, joint_radii + leaf_radii, contacts)


def hand_model_to_dict(model):
    return {
        "joint_names": list(model.joint_names),
        "joint_parents": list(model.joint_parents),
        "bone_offsets": model.bone_offsets.tolist(),
        "tip_offsets": model.tip_offsets.tolist(),
        "capsule_radii": model.capsule_radii.tolist(),
        "contact_labels": model.contact_labels.tolist(),
    }


def hand_model_from_dict(data):
    try:
        return HandModel(
            tuple(data["joint_parents"]),
            data["bone_offsets"],
            data["tip_offsets"],
            data["capsule_radii"],
            data["contact_labels"],
            tuple(data.get("joint_names", JOINT_NAMES)),
        )
    except KeyError as e:
        raise InvalidInputError(f"hand model is missing {e}") from e


@dataclass(frozen=True, eq=False)
class JointFrames:
    """
    World placements G_j (joint frame -> wrist frame) for every joint,
    satisfying G_j = G_parent(j) . T_parent(j),j.
    """

    rotations: np.ndarray
    translations: np.ndarray

    def __len__(self):
        return len(self.rotations)

    @property
    def positions(self):
        return self.translations

    def transform(self, joint):
        return RigidTransform(self.rotations[joint], self.translations[joint])

    def inverse(self, joint):
        """Map from wrist-frame points into joint's local frame."""
        return self.transform(joint).inverse()


def joint_rotations(articulation):
    """(15, 3, 3) Rodrigues rotations of the non-root joints."""
    return Rotation.from_rotvec(np.array(_articulation(articulation).reshape(15, 3))).as_matrix()


def joint_local_transform(model, articulation, joint):
    """T_parent(j),j: rotation R(theta_j) and rest offset t_j."""
    return RigidTransform(joint_rotations(articulation)[joint - 1], model.bone_offsets[joint])


def forward_kinematics(model, articulation):
    local = joint_rotations(articulation)
    rotations = np.zeros((JOINT_COUNT, 3, 3))
    translations = np.zeros((JOINT_COUNT, 3))
    rotations[0] = np.eye(3)
    for j in model.order[1:]:
        p = model.parent(j)
        rotations[j] = rotations[p] @ local[j - 1]
        translations[j] = translations[p] + rotations[p] @ model.bone_offsets[j]
    return JointFrames(_frozen(rotations), _frozen(translations))


def global_transform(pose):
    return RigidTransform.from_rotvec(pose.global_rotation, pose.global_translation)


def wrist_to_joint_coords(model, articulation, x):
    """
    Query point(s) in the frame of each of the 15 non-root joints.

    Returns:
        (45,) for one point or (N, 45) for a batch, joint blocks in joint order.
    """
    x = _finite(x, "query point")
    frames = forward_kinematics(model, articulation)
    pts = x.reshape(-1, 3)
    rel = pts[:, None, :] - frames.translations[None, 1:, :]
    local = np.einsum("kji,nkj->nki", frames.rotations[1:], rel)
    out = local.reshape(len(pts), ARTICULATION_SIZE)
    return out[0] if x.ndim == 1 else out


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_derivative(rotvec):
    """(3, 3, 3) partial derivatives dR/dv_i of the Rodrigues map at v."""
    v = np.asarray(rotvec, dtype=np.float64)
    norm_sq = float(v @ v)
    if norm_sq < SMALL_ANGLE**2:
        return np.stack([skew(e) for e in np.eye(3)])
    rot = Rotation.from_rotvec(v).as_matrix()
    vx = skew(v)
    return np.stack(
        [
            (v[i] * vx + skew(np.cross(v, (np.eye(3) - rot)[:, i]))) @ rot / norm_sq
            for i in range(3)
        ]
    )


def rotation_derivatives(articulation):
    theta = _articulation(articulation).reshape(15, 3)
    return np.stack([rotation_derivative(v) for v in theta])


def wrist_to_joint_jacobian(model, articulation, x):
    """d wrist_to_joint_coords / d articulation: (45, 45), or (N, 45, 45)."""
    x = _finite(x, "query point")
    pts = x.reshape(-1, 3)
    theta = _articulation(articulation)
    frames = forward_kinematics(model, theta)
    derivs = rotation_derivatives(theta)
    jac = np.zeros((len(pts), ARTICULATION_SIZE, ARTICULATION_SIZE))
    for j in range(1, JOINT_COUNT):
        parent_rot = frames.rotations[model.parent(j)]
        u = (pts - frames.translations[j]) @ parent_rot
        # (dR_i)^T u for each component i
        du = np.einsum("iba,nb->nia", derivs[j - 1], u)
        for k in model.subtree(j):
            link = frames.rotations[k].T @ frames.rotations[j]
            block = np.einsum("ab,nib->nai", link, du)
            jac[:, 3 * (k - 1) : 3 * k, 3 * (j - 1) : 3 * j] = block
    return jac[0] if x.ndim == 1 else jac


def _capsule_frame(axis):
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def capsule_samples(start, end, radius, count):
    """
    Deterministic quasi-uniform points on a capsule surface.

    The axial coordinate runs uniformly over [-r, L + r]; on the hemispherical
    caps this is area-uniform as well, and a golden-angle spiral spreads the
    azimuth.
    """
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    axis = end - start
    length = float(np.linalg.norm(axis))
    axis = axis / length if length > 0 else np.array([1.0, 0.0, 0.0])
    u, w = _capsule_frame(axis)
    i = np.arange(count)
    s = (i + 0.5) / count * (length + 2.0 * radius) - radius
    excess = np.where(s < 0.0, s, np.where(s > length, s - length, 0.0))
    ring = np.sqrt(np.clip(radius**2 - excess**2, 0.0, None))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return (
        start
        + s[:, None] * axis
        + ring[:, None] * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * w)
    )


def bone_local_samples(model, samples_per_bone):
    if samples_per_bone < 1:
        raise InvalidInputError("samples_per_bone must be at least 1")
    return [capsule_samples(b.start, b.end, b.radius, samples_per_bone) for b in model.bones]


def hand_surface_points(model, articulation, samples_per_bone):
    """
    Posed capsule-skin samples.

    Returns:
        points (N, 3) in the wrist frame and the bone index of every point,
        grouped bone by bone.
    """
    frames = forward_kinematics(model, articulation)
    local = bone_local_samples(model, samples_per_bone)
    points = [
        q @ frames.rotations[b.frame].T + frames.translations[b.frame]
        for b, q in zip(model.bones, local, strict=True)
    ]
    bone_ids = np.repeat(np.arange(model.bone_count), samples_per_bone)
    return np.concatenate(points), bone_ids


def hand_points_jacobian(model, articulation, samples_per_bone):
    """(N, 3, 45) derivative of every hand_surface_points sample."""
    theta = _articulation(articulation)
    frames = forward_kinematics(model, theta)
    points, bone_ids = hand_surface_points(model, theta, samples_per_bone)
    local = joint_rotations(theta)
    derivs = rotation_derivatives(theta)
    # dx/dtheta_j,i = A dR_i R^T A^T (x - t_j), A the parent world rotation
    spin = np.zeros((JOINT_COUNT, 3, 3, 3))
    for j in range(1, JOINT_COUNT):
        a = frames.rotations[model.parent(j)]
        spin[j] = np.einsum("ab,ibc,dc,ed->iae", a, derivs[j - 1], local[j - 1], a)
    jac = np.zeros((len(points), 3, ARTICULATION_SIZE))
    for b, bone in enumerate(model.bones):
        rows = bone_ids == b
        for j in model.chain(bone.frame):
            rel = points[rows] - frames.translations[j]
            jac[rows, :, 3 * (j - 1) : 3 * j] = np.einsum("iae,ne->nai", spin[j], rel)
    return jac


def joint_keypoints(model, articulation):
    """Joint origins followed by one fingertip per leaf, in the wrist frame."""
    frames = forward_kinematics(model, articulation)
    tips = [
        frames.rotations[leaf] @ model.tip_offsets[leaf] + frames.translations[leaf]
        for leaf in model.leaves
    ]
    return np.concatenate([frames.translations, np.asarray(tips).reshape(-1, 3)])


def posed_capsules(model, articulation):
    frames = forward_kinematics(model, articulation)
    capsules = []
    for bone in model.bones:
        rot, t = frames.rotations[bone.frame], frames.translations[bone.frame]
        capsules.append(
            Capsule(rot @ np.asarray(bone.start) + t, rot @ np.asarray(bone.end) + t, bone.radius)
        )
    return capsules


def hand_sdf(model, articulation):
    return AnalyticSdf(posed_capsules(model, articulation))


def hand_mesh(model, articulation, count=12):
    """Union of closed capsule meshes; overlapping shells are kept as is."""
    return Mesh.concatenate([c.to_mesh(count=count) for c in posed_capsules(model, articulation)])


def canonical_articulation(articulation):
    """Rewraps every joint whose rotation angle exceeds pi onto the short way round."""
    theta = _articulation(articulation).reshape(15, 3).copy()
    angles = np.linalg.norm(theta, axis=1)
    wrap = angles > np.pi
    theta[wrap] *= ((angles[wrap] - 2.0 * np.pi) / angles[wrap])[:, None]
    return theta.reshape(-1)


def pose_jitter(pose, sigma, seed):
    """Gaussian articulation noise, clipped to +-pi per entry; global pose kept."""
    if sigma < 0:
        raise InvalidInputError(f"jitter sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return pose
    rng = np.random.default_rng(seed)
    noisy = pose.articulation + rng.normal(0.0, sigma, ARTICULATION_SIZE)
    noisy = np.clip(noisy, -np.pi, np.pi)
    return pose.with_articulation(canonical_articulation(noisy))


def _grasp(curls, thumb):
    theta = np.zeros((15, 3))
    theta[0:3] = thumb
    for n, (mcp, pip, dip) in enumerate(curls):
        first = 3 + 3 * n
        theta[first : first + 3, 1] = (mcp, pip, dip)
    return theta.reshape(-1)


GRASP_LIBRARY = {
    "flat": np.zeros(ARTICULATION_SIZE),
    "power": _grasp(
        [(0.7, 0.9, 0.5)] * 4,
        [(0.3, 0.4, 0.0), (0.0, 0.5, 0.0), (0.0, 0.4, 0.0)],
    ),
    "pinch": _grasp(
        [(0.5, 0.6, 0.3), (0.25, 0.3, 0.2), (0.2, 0.25, 0.15), (0.2, 0.2, 0.1)],
        [(0.4, 0.3, 0.0), (0.0, 0.4, 0.0), (0.0, 0.3, 0.0)],
    ),
}
