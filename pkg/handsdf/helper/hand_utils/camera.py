from dataclasses import dataclass

import numpy as np

from handsdf.helper.ext_utils.exceptions import BehindCameraError, InvalidCameraError

DEFAULT_FOCAL = 480.0
DEFAULT_IMAGE_SIZE = (224, 224)


@dataclass(frozen=True)
class Intrinsics:
    """Square pixels, zero skew."""

    focal: float
    principal_point: tuple
    image_size: tuple

    def __post_init__(self):
        width, height = (int(v) for v in self.image_size)
        cx, cy = (float(v) for v in self.principal_point)
        if not (np.isfinite(self.focal) and self.focal > 0):
            raise InvalidCameraError(f"focal must be positive, got {self.focal}")
        if width <= 0 or height <= 0:
            raise InvalidCameraError(f"image size must be positive, got {self.image_size}")
        if not (0.0 <= cx <= width and 0.0 <= cy <= height):
            raise InvalidCameraError("principal point must lie inside the image")
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "principal_point", (cx, cy))
        object.__setattr__(self, "image_size", (width, height))

    @classmethod
    def centered(cls, focal=DEFAULT_FOCAL, image_size=DEFAULT_IMAGE_SIZE):
        width, height = image_size
        return cls(focal, ((width - 1) / 2.0, (height - 1) / 2.0), (width, height))

    def matrix(self):
        cx, cy = self.principal_point
        return np.array([[self.focal, 0.0, cx], [0.0, self.focal, cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class WeakPerspective:
    scale: float
    translation_2d: tuple

    def __post_init__(self):
        tx, ty = (float(v) for v in self.translation_2d)
        if not np.all(np.isfinite([self.scale, tx, ty])) or not self.scale > 0:
            raise InvalidCameraError(f"weak perspective scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation_2d", (tx, ty))


@dataclass(frozen=True, eq=False)
class CameraRig:
    intrinsics: Intrinsics
    depth_offset: np.ndarray

    def __post_init__(self):
        offset = np.asarray(self.depth_offset, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(offset)) or offset[2] <= 0:
            raise InvalidCameraError("depth offset must be finite with positive z")
        offset.flags.writeable = False
        object.__setattr__(self, "depth_offset", offset)


def weak_to_full(weak, intrinsics):
    """Depth offset (t_x, t_y, f / s); t_x and t_y are taken as millimeters."""
    if not weak.scale > 0:
        raise InvalidCameraError(f"weak perspective scale must be positive, got {weak.scale}")
    tx, ty = weak.translation_2d
    return CameraRig(intrinsics, np.array([tx, ty, intrinsics.focal / weak.scale]))


def weak_scale(rig):
    return rig.intrinsics.focal / float(rig.depth_offset[2])


def camera_points(rig, global_pose, points):
    """Wrist-frame points moved into the camera frame: T_w x + offset."""
    points = np.asarray(points, dtype=np.float64)
    return global_pose.apply(points) + rig.depth_offset


def project_points(rig, global_pose, points):
    cam = camera_points(rig, global_pose, np.asarray(points).reshape(-1, 3))
    if np.any(cam[:, 2] <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    cx, cy = rig.intrinsics.principal_point
    f = rig.intrinsics.focal
    return np.stack([f * cam[:, 0] / cam[:, 2] + cx, f * cam[:, 1] / cam[:, 2] + cy], axis=1)


def project(rig, global_pose, x):
    """Pixel coordinates of one wrist-frame point; not clamped to the image."""
    return project_points(rig, global_pose, x)[0]


def in_front(rig, global_pose, points):
    return camera_points(rig, global_pose, points)[:, 2] > 0


def camera_to_dict(rig):
    intr = rig.intrinsics
    return {
        "focal": intr.focal,
        "cx": intr.principal_point[0],
        "cy": intr.principal_point[1],
        "width": intr.image_size[0],
        "height": intr.image_size[1],
        "offset": rig.depth_offset.tolist(),
    }


def camera_from_dict(data):
    try:
        intr = Intrinsics(data["focal"], (data["cx"], data["cy"]), (data["width"], data["height"]))
        return CameraRig(intr, data["offset"])
    except KeyError as e:
        raise InvalidCameraError(f"camera is missing {e}") from e
