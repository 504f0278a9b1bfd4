import numpy as np
import pytest

from handsdf.helper.eval_utils.metrics import end_point_error
from handsdf.helper.ext_utils.exceptions import InvalidInputError
from handsdf.helper.hand_utils import refine as refine_module
from handsdf.helper.hand_utils.kinematics import HandPose, hand_sdf, hand_surface_points
from handsdf.helper.hand_utils.refine import (
    RefineConfig,
    contact_loss,
    contact_terms,
    intersection_penalty,
    intersection_terms,
    objective_gradient,
    penetration_by_bone,
    refine_pose,
)
from handsdf.helper.scene_utils.data import scene_conditioning
from handsdf.helper.sdf_utils.encoding import EncoderConfig
from handsdf.helper.sdf_utils.field import AnalyticSdf, GridSdf, SdfField, Sphere
from handsdf.helper.sdf_utils.neural import NeuralSdf, init_decoder


class NanField(SdfField):
    def _evaluate(self, points):
        return np.full(len(points), np.nan)


def test_intersection_terms():
    np.testing.assert_array_equal(intersection_terms(np.array([-3.0, 0.0, 2.0])), [3.0, 0.0, 0.0])


@pytest.mark.parametrize(
    ("form", "values", "expected"),
    [
        ("as_written", [5.0, 20.0, -3.0, 8.0, 10.0], [3.0, 0.0, 11.0, 0.0, 0.0]),
        ("attraction", [5.0, 1.0, -3.0, 20.0, -1.5], [3.0, 0.0, 1.0, 0.0, 0.0]),
    ],
)
def test_contact_terms(form, values, expected):
    np.testing.assert_allclose(contact_terms(np.array(values), 10.0, 2.0, form), expected)


def test_sums_over_samples(sphere_field):
    inside = np.array([[0.0, 0.0, 0.0], [45.0, 0.0, 0.0], [70.0, 0.0, 0.0]])
    assert intersection_penalty(sphere_field, inside) == pytest.approx(55.0)
    # values -50, -5, 20
    assert contact_loss(sphere_field, inside, 10.0, 2.0) == pytest.approx(58.0 + 13.0)
    with pytest.raises(InvalidInputError):
        contact_loss(sphere_field, inside, 2.0, 2.0)
    with pytest.raises(InvalidInputError):
        intersection_penalty(sphere_field, np.zeros((0, 3)))


@pytest.mark.parametrize(
    "bad",
    [
        {"contact_threshold": 1.0, "contact_margin": 2.0},
        {"contact_margin": -1.0},
        {"steps": 0},
        {"learning_rate": 0.0},
        {"hand_samples_per_bone": 0},
        {"contact_form": "repulsion"},
        {"bake_resolution": 1},
        {"gradient_step": 0.0},
    ],
)
def test_config_validation(bad):
    with pytest.raises(InvalidInputError):
        RefineConfig(**bad)


@pytest.mark.parametrize("form", ["as_written", "attraction"])
def test_objective_gradient_matches_finite_differences(penetration_case, hand, form):
    field, pose, _ = penetration_case
    cfg = RefineConfig(hand_samples_per_bone=8, contact_form=form, gradient_step=0.01)
    theta = pose.articulation + np.random.default_rng(5).normal(0.0, 0.02, 45)
    loss, grad = objective_gradient(field, hand, theta, cfg)
    assert loss > 0
    step = 1e-6
    numeric = np.array(
        [
            (
                objective_gradient(field, hand, theta + step * e, cfg)[0]
                - objective_gradient(field, hand, theta - step * e, cfg)[0]
            )
            / (2 * step)
            for e in np.eye(45)
        ]
    )
    np.testing.assert_allclose(grad, numeric, rtol=1e-3, atol=1e-3 * np.abs(numeric).max())


def test_refinement_pulls_the_finger_out(penetration_case, hand):
    field, pose, _ = penetration_case
    cfg = RefineConfig(steps=40, hand_samples_per_bone=16)
    before = penetration_by_bone(field, hand, pose, cfg)
    assert len(before) == hand.bone_count
    assert before.sum() > 0
    refined, report = refine_pose(field, hand, pose, cfg)

    assert report.steps == 40 or report.stalled
    assert report.total[-1] < sum(report.initial_terms)
    assert report.intersection[-1] < report.initial_terms[0]
    assert all(b <= a for a, b in zip(report.total, report.total[1:], strict=False))
    assert penetration_by_bone(field, hand, refined, cfg).sum() < before.sum()
    np.testing.assert_array_equal(refined.global_rotation, pose.global_rotation)
    np.testing.assert_array_equal(refined.global_translation, pose.global_translation)
    np.testing.assert_array_equal(report.final_articulation, refined.articulation)
    assert not report.frozen
    assert not report.refreshed
    assert report.refreshed_field is field
    assert set(report.to_dict()) >= {"total", "intersection", "contact", "step_sizes"}


def test_default_refinement_resolves_a_fingertip_penetration(hand):
    # the flat hand touches the sphere with its index tip (capsule radius 7,
    # ending at x = 172); flexing the distal index joint sinks the tip ~5 mm
    center = np.array([[172.0, 24.0, -22.0]])
    field = AnalyticSdf(Sphere(center[0], 15.0))
    truth = HandPose.zero()
    theta = np.zeros(45)
    theta[16] = 0.255
    start = truth.with_articulation(theta)

    def depth(pose):
        return 15.0 - hand_sdf(hand, pose.articulation).evaluate(center)[0]

    assert depth(truth) == pytest.approx(0.0, abs=1e-9)
    assert depth(start) == pytest.approx(5.0, abs=0.1)

    refined, report = refine_pose(field, hand, start, RefineConfig())
    penalty, contact = report.initial_terms
    assert penalty > 0
    assert report.intersection[-1] <= 0.2 * penalty
    assert report.contact[-1] <= contact
    drift = end_point_error(refined, truth, hand) - end_point_error(start, truth, hand)
    assert drift <= 1.0


def test_refinement_stops_when_no_step_descends(penetration_case, hand, monkeypatch):
    field, pose, _ = penetration_case
    uphill = refine_module.eval_grad
    monkeypatch.setattr(refine_module, "eval_grad", lambda f, p, h: -uphill(f, p, h))
    refined, report = refine_pose(field, hand, pose, RefineConfig(steps=20,
                                                                   hand_samples_per_bone=8))
    assert report.stalled
    assert report.steps == 1
    assert report.accepted == [False]
    assert report.step_sizes == [0.0]
    assert report.total == [sum(report.initial_terms)]
    np.testing.assert_array_equal(refined.articulation, pose.articulation)
    assert report.to_dict()["stalled"] is True


def test_refinement_without_contact_is_a_no_op(hand):
    field = AnalyticSdf(Sphere(np.array([0.0, 0.0, -500.0]), 10.0))
    pose = HandPose.zero()
    refined, report = refine_pose(field, hand, pose, RefineConfig(steps=5))
    np.testing.assert_array_equal(refined.articulation, pose.articulation)
    assert report.accepted == [True] * 5
    assert report.step_sizes == [0.0] * 5
    assert report.total == [0.0] * 5


def test_refinement_stops_on_nan(hand):
    field = NanField(np.array([[-100.0] * 3, [100.0] * 3]))
    pose = HandPose.zero()
    refined, report = refine_pose(field, hand, pose, RefineConfig(steps=5))
    assert report.diverged
    assert report.steps == 0
    np.testing.assert_array_equal(refined.articulation, pose.articulation)


@pytest.fixture
def neural_field(small_scene):
    decoder = init_decoder(2, EncoderConfig(2), hidden_width=8, output_scale=10.0, seed=1,
                           dtype=np.float64)
    return NeuralSdf(decoder, scene_conditioning(small_scene, 3), small_scene.bounds)


def test_frozen_snapshot(neural_field, hand):
    cfg = RefineConfig(steps=3, hand_samples_per_bone=4, bake_resolution=8)
    refined, report = refine_pose(neural_field, hand, HandPose.zero(), cfg)
    assert report.frozen
    assert report.loop_queries > 0
    assert report.snapshot_queries == report.loop_queries
    assert report.refreshed
    assert isinstance(report.refreshed_field, NeuralSdf)
    np.testing.assert_array_equal(report.refreshed_field.context.articulation,
                                  refined.articulation)


def test_live_field_follows_the_articulation(neural_field, hand):
    cfg = RefineConfig(steps=2, hand_samples_per_bone=4, freeze_field=False)
    _, report = refine_pose(neural_field, hand, HandPose.zero(), cfg)
    assert not report.frozen
    assert report.snapshot_queries == 0
    assert report.loop_queries > 0


def test_grid_snapshot_tracks_the_analytic_field(penetration_case, hand):
    field, pose, _ = penetration_case
    bounds = np.array([[120.0, -30.0, -60.0], [220.0, 80.0, 30.0]])
    grid = GridSdf.bake(field, bounds, (51, 56, 46))
    points, _ = hand_surface_points(hand, pose.articulation, 8)
    near = np.all((points > bounds[0] + 5) & (points < bounds[1] - 5), axis=1)
    np.testing.assert_allclose(grid.evaluate(points[near]), field.evaluate(points[near]),
                               atol=0.5)
