"""Signed distance fields: the shared evaluation contract, analytic primitives,
trilinear grids and the pixel-aligned feature pyramid.

Every field uses millimeters and the convention negative inside, positive
outside, zero on the surface.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from threading import Lock

import numpy as np
import trimesh
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import map_coordinates
from skimage.transform import downscale_local_mean

from handsdf.helper.ext_utils.exceptions import InvalidInputError, ShapeMismatchError
from handsdf.helper.ext_utils.task_utils import parallel_map

from .mesh import Mesh

PRIMITIVE_KINDS = ("sphere", "box", "capsule", "cylinder")


def as_points(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeMismatchError(f"expected (N, 3) points, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("query points must be finite")
    return pts


def as_bounds(bounds):
    box = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    if not np.all(np.isfinite(box)) or np.any(box[1] <= box[0]):
        raise InvalidInputError(f"degenerate bounds {box.tolist()}")
    return box


class SdfField(ABC):
    """Common contract: points in the wrist frame (mm) to signed distance (mm)."""

    def __init__(self, bounds):
        self.bounds = as_bounds(bounds)
        self._query_lock = Lock()
        self._query_count = 0

    @property
    def query_count(self):
        return self._query_count

    def evaluate(self, points):
        pts = as_points(points)
        with self._query_lock:
            self._query_count += len(pts)
        return self._evaluate(pts)

    def __call__(self, points):
        return self.evaluate(points)

    @abstractmethod
    def _evaluate(self, points):
        """Vectorized (N, 3) -> (N,) evaluation."""


def eval_sdf(sdf_field, x):
    x = np.asarray(x, dtype=np.float64)
    values = sdf_field.evaluate(x)
    return float(values[0]) if x.ndim == 1 else values


def eval_grad(sdf_field, x, step=1.0):
    """Central-difference gradient, one (x +- h e_i) pair per axis."""
    if not step > 0:
        raise InvalidInputError(f"gradient step must be positive, got {step}")
    x = np.asarray(x, dtype=np.float64)
    pts = as_points(x)
    offsets = np.concatenate([np.eye(3), -np.eye(3)]) * step
    stencil = (pts[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    values = sdf_field.evaluate(stencil).reshape(len(pts), 6)
    grad = (values[:, :3] - values[:, 3:]) / (2.0 * step)
    return grad[0] if x.ndim == 1 else grad


def _frame(axis):
    """Rotation matrix whose third column is the given unit axis."""
    return trimesh.geometry.align_vectors([0.0, 0.0, 1.0], axis)[:3, :3]


def _primitive_mesh(tm, rotation, center):
    tm.apply_translation(-tm.bounds.mean(axis=0))
    vertices = np.asarray(tm.vertices) @ np.asarray(rotation).T + center
    return Mesh(vertices, np.asarray(tm.faces)).cleaned()


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float
    kind: str = field(default="sphere", init=False)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if not self.radius > 0:
            raise InvalidInputError(f"sphere radius must be positive, got {self.radius}")

    def sdf(self, points):
        return np.linalg.norm(points - self.center, axis=1) - self.radius

    def contains(self, points):
        return np.sum((points - self.center) ** 2, axis=1) < self.radius**2

    def aabb(self):
        return np.stack([self.center - self.radius, self.center + self.radius])

    def volume(self):
        return 4.0 / 3.0 * np.pi * self.radius**3

    def to_mesh(self, subdivisions=4):
        tm = trimesh.creation.icosphere(subdivisions=subdivisions, radius=self.radius)
        return _primitive_mesh(tm, np.eye(3), self.center)

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class Box:
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    kind: str = field(default="box", init=False)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(
            self, "half_extents", np.asarray(self.half_extents, dtype=np.float64)
        )
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        if np.any(self.half_extents <= 0):
            raise InvalidInputError("box half extents must be positive")

    def _local(self, points):
        return (points - self.center) @ self.rotation

    def sdf(self, points):
        q = np.abs(self._local(points)) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)

    def contains(self, points):
        return np.all(np.abs(self._local(points)) < self.half_extents, axis=1)

    def aabb(self):
        reach = np.abs(self.rotation) @ self.half_extents
        return np.stack([self.center - reach, self.center + reach])

    def volume(self):
        return float(np.prod(2.0 * self.half_extents))

    def to_mesh(self):
        tm = trimesh.creation.box(extents=2.0 * self.half_extents)
        return _primitive_mesh(tm, self.rotation, self.center)

    def to_dict(self):
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "half_extents": self.half_extents.tolist(),
            "rotation": self.rotation.tolist(),
        }


@dataclass(frozen=True, eq=False)
class Capsule:
    start: np.ndarray
    end: np.ndarray
    radius: float
    kind: str = field(default="capsule", init=False)

    def __post_init__(self):
        object.__setattr__(self, "start", np.asarray(self.start, dtype=np.float64))
        object.__setattr__(self, "end", np.asarray(self.end, dtype=np.float64))
        if not self.radius > 0:
            raise InvalidInputError(f"capsule radius must be positive, got {self.radius}")

    def segment_distance(self, points):
        axis = self.end - self.start
        length_sq = float(axis @ axis)
        rel = points - self.start
        if length_sq == 0.0:
            return np.linalg.norm(rel, axis=1)
        t = np.clip(rel @ axis / length_sq, 0.0, 1.0)
        return np.linalg.norm(rel - t[:, None] * axis, axis=1)

    def sdf(self, points):
        return self.segment_distance(points) - self.radius

    def contains(self, points):
        return self.segment_distance(points) < self.radius

    def aabb(self):
        lo = np.minimum(self.start, self.end) - self.radius
        hi = np.maximum(self.start, self.end) + self.radius
        return np.stack([lo, hi])

    def volume(self):
        length = np.linalg.norm(self.end - self.start)
        return np.pi * self.radius**2 * (length + 4.0 / 3.0 * self.radius)

    def to_mesh(self, count=32):
        axis = self.end - self.start
        length = float(np.linalg.norm(axis))
        rotation = _frame(axis / length) if length > 0 else np.eye(3)
        tm = trimesh.creation.capsule(
            height=length, radius=self.radius, count=[count, count]
        )
        return _primitive_mesh(tm, rotation, 0.5 * (self.start + self.end))

    def to_dict(self):
        return {
            "kind": self.kind,
            "start": self.start.tolist(),
            "end": self.end.tolist(),
            "radius": self.radius,
        }


@dataclass(frozen=True, eq=False)
class Cylinder:
    center: np.ndarray
    axis: np.ndarray
    radius: float
    half_height: float
    kind: str = field(default="cylinder", init=False)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "axis", axis / np.linalg.norm(axis))
        if not (self.radius > 0 and self.half_height > 0):
            raise InvalidInputError("cylinder radius and half height must be positive")

    def _split(self, points):
        rel = points - self.center
        h = rel @ self.axis
        radial = np.linalg.norm(rel - h[:, None] * self.axis, axis=1)
        return radial, h

    def sdf(self, points):
        radial, h = self._split(points)
        d = np.stack([radial - self.radius, np.abs(h) - self.half_height], axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return inside + np.linalg.norm(np.maximum(d, 0.0), axis=1)

    def contains(self, points):
        radial, h = self._split(points)
        return (radial < self.radius) & (np.abs(h) < self.half_height)

    def aabb(self):
        a = self.axis
        reach = self.half_height * np.abs(a) + self.radius * np.sqrt(
            np.clip(1.0 - a**2, 0.0, None)
        )
        return np.stack([self.center - reach, self.center + reach])

    def volume(self):
        return np.pi * self.radius**2 * 2.0 * self.half_height

    def to_mesh(self, sections=64):
        tm = trimesh.creation.cylinder(
            radius=self.radius, height=2.0 * self.half_height, sections=sections
        )
        return _primitive_mesh(tm, _frame(self.axis), self.center)

    def to_dict(self):
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "axis": self.axis.tolist(),
            "radius": self.radius,
            "half_height": self.half_height,
        }


PRIMITIVES = {"sphere": Sphere, "box": Box, "capsule": Capsule, "cylinder": Cylinder}


def primitive_from_dict(data):
    data = dict(data)
    kind = data.pop("kind", None)
    if kind not in PRIMITIVES:
        raise InvalidInputError(f"unknown primitive kind {kind!r}")
    return PRIMITIVES[kind](**data)


class AnalyticSdf(SdfField):
    """Exact field of one primitive or the union (pointwise min) of several."""

    def __init__(self, primitives, margin=0.0):
        if not isinstance(primitives, list | tuple):
            primitives = (primitives,)
        if not primitives:
            raise InvalidInputError("an analytic field needs at least one primitive")
        self.primitives = tuple(primitives)
        boxes = np.stack([p.aabb() for p in self.primitives])
        bounds = np.stack([boxes[:, 0].min(axis=0), boxes[:, 1].max(axis=0)])
        super().__init__(bounds + np.array([[-margin], [margin]]))

    @property
    def kind(self):
        kinds = {p.kind for p in self.primitives}
        return kinds.pop() if len(kinds) == 1 else "union"

    def _evaluate(self, points):
        return np.minimum.reduce([p.sdf(points) for p in self.primitives])

    def contains(self, points):
        pts = as_points(points)
        return np.logical_or.reduce([p.contains(pts) for p in self.primitives])

    def to_mesh(self):
        meshes = [p.to_mesh() for p in self.primitives]
        return Mesh.concatenate(meshes)

    def to_dict(self):
        return {"primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, data):
        return cls([primitive_from_dict(p) for p in data["primitives"]])


class GridSdf(SdfField):
    """
    Trilinear field over a regular node grid spanning `bounds`.

    Queries outside the box read the clamped boundary value (floored at zero)
    and add the Euclidean distance to the box, so the domain exterior is never
    reported as inside.
    """

    def __init__(self, values, bounds):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 2:
            raise ShapeMismatchError(f"grid values must be (nx, ny, nz), got {values.shape}")
        super().__init__(bounds)
        self.values = values
        self.resolution = values.shape
        axes = [
            np.linspace(self.bounds[0, i], self.bounds[1, i], n)
            for i, n in enumerate(values.shape)
        ]
        self._interp = RegularGridInterpolator(axes, values, method="linear")

    @property
    def spacing(self):
        return (self.bounds[1] - self.bounds[0]) / (np.array(self.resolution) - 1)

    def _evaluate(self, points):
        clamped = np.clip(points, self.bounds[0], self.bounds[1])
        values = self._interp(clamped)
        dist = np.linalg.norm(points - clamped, axis=1)
        outside = dist > 0
        values[outside] = np.maximum(values[outside], 0.0) + dist[outside]
        return values

    @classmethod
    def bake(cls, sdf_field, bounds, resolution):
        """Samples any field on the node grid (parallel over point chunks)."""
        bounds = as_bounds(bounds)
        resolution = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
        if np.any(resolution < 2):
            raise InvalidInputError("grid resolution must be at least 2 per axis")
        nodes = grid_nodes(bounds, resolution)
        values = parallel_map(sdf_field.evaluate, nodes)
        return cls(values.reshape(tuple(resolution)), bounds)


def grid_nodes(bounds, resolution):
    """Node coordinates in C order over (nx, ny, nz) with 'ij' indexing."""
    axes = [np.linspace(bounds[0, i], bounds[1, i], int(resolution[i])) for i in range(3)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """
    Image feature levels (height, width, channels), all spanning the full
    image, plus one global feature vector appended to every sample.
    """

    levels: tuple
    global_feature: np.ndarray

    def __post_init__(self):
        levels = tuple(np.asarray(level, dtype=np.float64) for level in self.levels)
        if not levels or any(level.ndim != 3 for level in levels):
            raise ShapeMismatchError("pyramid levels must be (height, width, channels)")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(
            self,
            "global_feature",
            np.asarray(self.global_feature, dtype=np.float64).ravel(),
        )

    @property
    def image_size(self):
        height, width = self.levels[0].shape[:2]
        return width, height

    @property
    def local_width(self):
        return sum(level.shape[2] for level in self.levels)

    @property
    def width(self):
        return self.local_width + self.global_feature.size


def pyramid_levels(image, levels=3):
    """Level 0 is the image; level k is a 2^k box-filter downsample."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    out = [image]
    for _ in range(1, levels):
        out.append(downscale_local_mean(out[-1], (2, 2, 1)))
    return tuple(out)


def channel_means(levels):
    return levels[-1].mean(axis=(0, 1))


def sample_levels(levels, image_size, pixels):
    """Bilinear samples of every level at full-image pixel coordinates."""
    pixels = np.asarray(pixels, dtype=np.float64)
    single = pixels.ndim == 1
    pixels = np.atleast_2d(pixels)
    if not np.all(np.isfinite(pixels)):
        raise InvalidInputError("pixel coordinates must be finite")
    width, height = image_size
    u = np.clip(pixels[:, 0], 0.0, width - 1)
    v = np.clip(pixels[:, 1], 0.0, height - 1)
    columns = []
    for level in levels:
        level_h, level_w, channels = level.shape
        sx = (level_w - 1) / (width - 1) if width > 1 else 0.0
        sy = (level_h - 1) / (height - 1) if height > 1 else 0.0
        coords = np.stack([v * sy, u * sx])
        for c in range(channels):
            columns.append(
                map_coordinates(level[:, :, c], coords, order=1, mode="nearest")
            )
    samples = np.stack(columns, axis=1)
    return samples[0] if single else samples


def sample_pyramid(pyr, pixel):
    """Concatenation of bilinear samples from every level plus the global feature."""
    local = np.atleast_2d(sample_levels(pyr.levels, pyr.image_size, pixel))
    glob = np.broadcast_to(pyr.global_feature, (len(local), pyr.global_feature.size))
    out = np.concatenate([local, glob], axis=1)
    return out[0] if np.asarray(pixel).ndim == 1 else out
