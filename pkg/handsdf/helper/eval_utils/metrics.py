from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from handsdf import LOGGER
from handsdf.helper.ext_utils.exceptions import InvalidInputError
from handsdf.helper.hand_utils.kinematics import joint_keypoints
from handsdf.helper.sdf_utils.mesh import column_winding, sample_surface

CHAMFER_CONVENTION = "symmetric-mean-squared-mm2"
F_THRESHOLDS = (5.0, 10.0)
MM3_PER_CM3 = 1000.0


@dataclass(frozen=True)
class MetricReport:
    chamfer: float
    f5: float
    f10: float
    intersection_volume: float | None
    epe: float | None
    pred_points: int
    gt_points: int
    thresholds: tuple = F_THRESHOLDS
    voxel_size: float = 1.0
    seed: int = 0
    chamfer_convention: str = CHAMFER_CONVENTION

    def to_dict(self):
        data = asdict(self)
        data["thresholds"] = list(self.thresholds)
        return data


def _point_set(points, what):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(points):
        raise InvalidInputError(f"{what} point set is empty")
    if not np.all(np.isfinite(points)):
        raise InvalidInputError(f"{what} point set must be finite")
    return points


def nearest_sq_distances(source, target):
    """Squared distance from every source point to its nearest target point."""
    _, index = cKDTree(target).query(source, k=1)
    return ((source - target[index]) ** 2).sum(axis=1)


def chamfer_distance(a, b):
    """Mean squared nearest-neighbor distance a->b plus b->a, in mm^2."""
    a, b = _point_set(a, "first"), _point_set(b, "second")
    return float(nearest_sq_distances(a, b).mean() + nearest_sq_distances(b, a).mean())


def f_score(pred, gt, threshold):
    if not threshold > 0:
        raise InvalidInputError(f"f-score threshold must be positive, got {threshold}")
    pred, gt = _point_set(pred, "predicted"), _point_set(gt, "ground-truth")
    limit = threshold**2
    precision = float((nearest_sq_distances(pred, gt) < limit).mean())
    recall = float((nearest_sq_distances(gt, pred) < limit).mean())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def voxel_centers(lo, hi, voxel):
    """Per-axis voxel centers lo + (i + 1/2) v covering [lo, hi]."""
    counts = np.maximum(np.ceil((hi - lo) / voxel).astype(int), 0)
    return [lo[i] + (np.arange(counts[i]) + 0.5) * voxel for i in range(3)]


def intersection_volume(mesh_a, mesh_b, voxel=1.0):
    """Shared volume of two closed meshes in cm^3, voxelized over their AABB overlap."""
    if not voxel > 0:
        raise InvalidInputError(f"voxel size must be positive, got {voxel}")
    if mesh_a.is_empty or mesh_b.is_empty:
        return 0.0
    for mesh in (mesh_a, mesh_b):
        if not mesh.is_watertight:
            LOGGER.warning("Intersection volume of an open mesh is a best-effort value")
    lo = np.maximum(mesh_a.vertices.min(axis=0), mesh_b.vertices.min(axis=0))
    hi = np.minimum(mesh_a.vertices.max(axis=0), mesh_b.vertices.max(axis=0))
    if np.any(hi <= lo):
        return 0.0
    xs, ys, zs = voxel_centers(lo, hi, voxel)
    if not (len(xs) and len(ys) and len(zs)):
        return 0.0
    inside_a = np.abs(column_winding(mesh_a, xs, ys, zs)) >= 1
    inside_b = np.abs(column_winding(mesh_b, xs, ys, zs)) >= 1
    return float(np.count_nonzero(inside_a & inside_b)) * voxel**3 / MM3_PER_CM3


def end_point_error(pose_a, pose_b, model):
    """Mean keypoint distance in the wrist frame; global pose does not enter."""
    a = joint_keypoints(model, pose_a.articulation)
    b = joint_keypoints(model, pose_b.articulation)
    return float(np.linalg.norm(a - b, axis=1).mean())


def evaluate_meshes(
    pred,
    gt,
    hand=None,
    poses=None,
    model=None,
    samples=10000,
    voxel=1.0,
    seed=0,
):
    """
    Full metric suite on two meshes.

    Surfaces are compared through `samples` area-weighted points each; the
    hand-object intersection volume needs `hand`, the end-point error needs
    `poses` (predicted, reference) and the hand `model`.
    """
    if pred.is_empty or gt.is_empty:
        raise InvalidInputError("cannot evaluate an empty mesh")
    pred_points, _ = sample_surface(pred, samples, seed=seed)
    gt_points, _ = sample_surface(gt, samples, seed=seed)
    f5, f10 = (f_score(pred_points, gt_points, t) for t in F_THRESHOLDS)
    volume = None if hand is None else intersection_volume(pred, hand, voxel)
    epe = None
    if poses is not None and model is not None:
        epe = end_point_error(poses[0], poses[1], model)
    return MetricReport(
        chamfer=chamfer_distance(pred_points, gt_points),
        f5=f5,
        f10=f10,
        intersection_volume=volume,
        epe=epe,
        pred_points=len(pred_points),
        gt_points=len(gt_points),
        voxel_size=voxel,
        seed=seed,
    )
