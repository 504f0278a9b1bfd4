"""
Test-time articulation refinement against a frozen object field.

The objective sums an intersection penalty over every hand surface sample
and a contact term over samples on contact bones. Only the articulation
moves; the global hand pose stays fixed.
"""

from dataclasses import dataclass, field

import numpy as np

from handsdf import LOGGER
from handsdf.helper.ext_utils.exceptions import InvalidInputError
from handsdf.helper.sdf_utils.field import GridSdf, eval_grad

from .kinematics import (
    HandPose,
    canonical_articulation,
    hand_points_jacobian,
    hand_surface_points,
)

CONTACT_FORMS = ("as_written", "attraction")
MAX_HALVINGS = 10


@dataclass(frozen=True)
class RefineConfig:
    contact_threshold: float = 10.0
    contact_margin: float = 2.0
    steps: int = 200
    learning_rate: float = 1e-5
    hand_samples_per_bone: int = 32
    freeze_field: bool = True
    contact_form: str = "as_written"
    bake_resolution: int = 96
    gradient_step: float = 0.5

    def __post_init__(self):
        if not self.contact_threshold > self.contact_margin >= 0:
            raise InvalidInputError("contact threshold must exceed the margin, margin >= 0")
        if self.steps < 1:
            raise InvalidInputError("refinement needs at least one step")
        if not self.learning_rate > 0:
            raise InvalidInputError("refinement learning rate must be positive")
        if self.hand_samples_per_bone < 1:
            raise InvalidInputError("hand_samples_per_bone must be at least 1")
        if self.contact_form not in CONTACT_FORMS:
            raise InvalidInputError(f"unknown contact form {self.contact_form!r}")
        if self.bake_resolution < 2 or not self.gradient_step > 0:
            raise InvalidInputError("bake resolution >= 2 and a positive gradient step required")

    def to_dict(self):
        return {
            "contact_threshold": self.contact_threshold,
            "contact_margin": self.contact_margin,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "hand_samples_per_bone": self.hand_samples_per_bone,
            "freeze_field": self.freeze_field,
            "contact_form": self.contact_form,
            "bake_resolution": self.bake_resolution,
            "gradient_step": self.gradient_step,
        }


@dataclass
class RefineReport:
    initial_articulation: np.ndarray
    final_articulation: np.ndarray = None
    initial_terms: tuple = (0.0, 0.0)
    total: list = field(default_factory=list)
    intersection: list = field(default_factory=list)
    contact: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    refreshed: bool = False
    diverged: bool = False
    stalled: bool = False
    frozen: bool = False
    snapshot_queries: int = 0
    loop_queries: int = 0
    refreshed_field: object = None

    @property
    def steps(self):
        return len(self.total)

    def to_dict(self):
        return {
            "initial_articulation": np.asarray(self.initial_articulation).tolist(),
            "final_articulation": np.asarray(self.final_articulation).tolist(),
            "initial_intersection": self.initial_terms[0],
            "initial_contact": self.initial_terms[1],
            "total": self.total,
            "intersection": self.intersection,
            "contact": self.contact,
            "step_sizes": self.step_sizes,
            "accepted": self.accepted,
            "refreshed": self.refreshed,
            "diverged": self.diverged,
            "stalled": self.stalled,
            "frozen": self.frozen,
            "snapshot_queries": self.snapshot_queries,
            "loop_queries": self.loop_queries,
        }


def _values(sdf_field, points):
    if len(points) == 0:
        raise InvalidInputError("refinement point set must not be empty")
    return sdf_field.evaluate(points)


def intersection_terms(values):
    return np.maximum(-values, 0.0)


def contact_terms(values, threshold, margin, form="as_written"):
    if form == "attraction":
        return np.where(values < threshold, np.maximum(np.abs(values) - margin, 0.0), 0.0)
    return np.maximum(np.abs(np.minimum(values - threshold, 0.0)) - margin, 0.0)


def intersection_penalty(sdf_field, hand_points):
    """Sum over the hand samples of max(-f(x), 0)."""
    return float(intersection_terms(_values(sdf_field, hand_points)).sum())


def contact_loss(sdf_field, contact_points, threshold, margin, form="as_written"):
    """Sum over the contact samples of max(|min(f(x) - tau, 0)| - eps, 0)."""
    if not threshold > margin:
        raise InvalidInputError("contact threshold must exceed the margin")
    values = _values(sdf_field, contact_points)
    return float(contact_terms(values, threshold, margin, form).sum())


def _term_slopes(values, contact, cfg):
    """d(objective)/d f at every sample."""
    slope = np.where(values < 0, -1.0, 0.0)
    tau, eps = cfg.contact_threshold, cfg.contact_margin
    if cfg.contact_form == "attraction":
        pulled = (values < tau) & (np.abs(values) > eps)
        contact_slope = np.where(pulled, np.sign(values), 0.0)
    else:
        contact_slope = np.where(values < tau - eps, -1.0, 0.0)
    return slope + np.where(contact, contact_slope, 0.0)


class _Objective:
    """Objective and gradient over articulation with query bookkeeping."""

    def __init__(self, sdf_field, model, cfg, live=False):
        self.field = sdf_field
        self.model = model
        self.cfg = cfg
        self.live = live
        bone_ids = np.repeat(np.arange(model.bone_count), cfg.hand_samples_per_bone)
        self.contact = model.contact_labels[bone_ids]
        self.queries = 0

    def field_at(self, articulation):
        # unfrozen conditioned fields follow the articulation being optimized
        return self.field.with_articulation(articulation) if self.live else self.field

    def terms(self, articulation):
        points, _ = hand_surface_points(self.model, articulation, self.cfg.hand_samples_per_bone)
        self.queries += len(points)
        values = self.field_at(articulation).evaluate(points)
        inter = float(intersection_terms(values).sum())
        contact = float(
            contact_terms(
                values[self.contact],
                self.cfg.contact_threshold,
                self.cfg.contact_margin,
                self.cfg.contact_form,
            ).sum()
        )
        return inter, contact, points, values

    def gradient(self, articulation, points, values):
        slopes = _term_slopes(values, self.contact, self.cfg)
        active = slopes != 0
        if not active.any():
            return np.zeros_like(articulation)
        self.queries += 6 * int(active.sum())
        grads = eval_grad(self.field_at(articulation), points[active], self.cfg.gradient_step)
        jac = hand_points_jacobian(self.model, articulation, self.cfg.hand_samples_per_bone)
        return np.einsum("n,na,nai->i", slopes[active], grads, jac[active])


def objective_gradient(sdf_field, model, articulation, cfg):
    """(loss, d loss / d articulation) of the refinement objective on a fixed field."""
    objective = _Objective(sdf_field, model, cfg)
    theta = np.asarray(articulation, dtype=np.float64)
    inter, contact, points, values = objective.terms(theta)
    return inter + contact, objective.gradient(theta, points, values)


def freeze(sdf_field, cfg):
    """Grid snapshot of an articulation-conditioned field; other fields are already fixed."""
    if cfg.freeze_field and hasattr(sdf_field, "with_articulation"):
        LOGGER.info(f"Baking field snapshot at {cfg.bake_resolution}^3")
        return GridSdf.bake(sdf_field, sdf_field.bounds, cfg.bake_resolution), True
    return sdf_field, False


def refine_pose(sdf_field, model, pose, cfg):
    """
    Gradient descent with backtracking line search over the articulation.

    Each step starts from twice the last accepted step size (the configured
    learning rate at first) and halves up to ten times until the loss does
    not increase. A step with no acceptable size leaves the pose unchanged
    and ends the loop early with `stalled` set. An articulation-conditioned
    field is refreshed once at the final pose.

    Returns:
        (refined HandPose, RefineReport)
    """
    snapshot, frozen = freeze(sdf_field, cfg)
    before = snapshot.query_count
    live = not frozen and hasattr(sdf_field, "with_articulation")
    objective = _Objective(snapshot, model, cfg, live)
    theta = pose.articulation.copy()
    report = RefineReport(initial_articulation=theta.copy(), frozen=frozen)

    inter, contact, points, values = objective.terms(theta)
    loss = inter + contact
    report.initial_terms = (inter, contact)
    best = theta.copy()
    step = cfg.learning_rate
    for _ in range(cfg.steps):
        if not np.isfinite(loss):
            report.diverged = True
            break
        grad = objective.gradient(theta, points, values)
        if not np.all(np.isfinite(grad)):
            report.diverged = True
            break
        accepted = not grad.any()
        trial_step = 0.0 if accepted else 2.0 * step
        if not accepted:
            for _ in range(MAX_HALVINGS + 1):
                trial = canonical_articulation(theta - trial_step * grad)
                t_inter, t_contact, t_points, t_values = objective.terms(trial)
                if t_inter + t_contact <= loss:
                    theta, points, values = trial, t_points, t_values
                    inter, contact, loss = t_inter, t_contact, t_inter + t_contact
                    step = trial_step
                    accepted = True
                    break
                trial_step *= 0.5
        report.total.append(loss)
        report.intersection.append(inter)
        report.contact.append(contact)
        report.step_sizes.append(trial_step if accepted else 0.0)
        report.accepted.append(bool(accepted))
        if np.isfinite(loss):
            best = theta.copy()
        if not accepted:
            # same theta and gradient next step would repeat the same search
            report.stalled = True
            break

    if report.stalled:
        LOGGER.info(f"Refinement stalled after {report.steps} steps: no descent step found")
    if report.diverged:
        LOGGER.warning(f"Refinement diverged after {report.steps} steps; keeping best pose")
    refined = pose.with_articulation(best)
    report.final_articulation = best
    report.snapshot_queries = snapshot.query_count - before
    report.loop_queries = objective.queries
    if hasattr(sdf_field, "with_articulation"):
        report.refreshed_field = sdf_field.with_articulation(best)
        report.refreshed = True
    else:
        report.refreshed_field = sdf_field
    return refined, report


def penetration_by_bone(sdf_field, model, pose: HandPose, cfg):
    """Per-bone count of samples inside the field, for diagnostics."""
    points, bone_ids = hand_surface_points(model, pose.articulation, cfg.hand_samples_per_bone)
    inside = sdf_field.evaluate(points) < 0
    return np.bincount(bone_ids[inside], minlength=model.bone_count)
