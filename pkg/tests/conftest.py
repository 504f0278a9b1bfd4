import numpy as np
import pytest

from handsdf.core.config_manager import Config
from handsdf.helper.hand_utils.camera import Intrinsics, WeakPerspective, weak_to_full
from handsdf.helper.hand_utils.kinematics import (
    HandPose,
    default_hand,
    global_transform,
    hand_sdf,
)
from handsdf.helper.hand_utils.refine import RefineConfig
from handsdf.helper.scene_utils.data import SceneSpec, render_scene
from handsdf.helper.sdf_utils.field import AnalyticSdf, Sphere


@pytest.fixture(autouse=True)
def reset_config():
    yield
    Config.reset()


@pytest.fixture(scope="session")
def hand():
    return default_hand()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sphere_field():
    return AnalyticSdf(Sphere(np.zeros(3), 50.0))


def build_scene(primitive, image_size=16, focal=40.0, articulation=None):
    model = default_hand()
    pose = HandPose(np.zeros(45) if articulation is None else articulation)
    intrinsics = Intrinsics.centered(focal, (image_size, image_size))
    rig = weak_to_full(WeakPerspective(focal / 550.0, (0.0, 0.0)), intrinsics)
    obj = AnalyticSdf(primitive)
    image = render_scene(obj, hand_sdf(model, pose.articulation), rig, global_transform(pose))
    return SceneSpec(
        primitive.kind,
        obj,
        primitive.to_mesh(),
        model,
        pose,
        rig,
        image,
        np.array([[-150.0] * 3, [150.0] * 3]),
        "flat",
    )


@pytest.fixture
def scene_factory():
    return build_scene


@pytest.fixture
def small_scene():
    """Sphere under the palm of a flat hand, 16 x 16 render."""
    return build_scene(Sphere(np.array([60.0, 0.0, -40.0]), 25.0))


@pytest.fixture
def penetration_case(hand):
    """
    Flat hand whose index fingertip sinks 5 mm into a 15 mm sphere.

    The tip capsule (radius 7) ends at (172, 24, 0); the sphere sits right
    under it.
    """
    field = AnalyticSdf(Sphere(np.array([172.0, 24.0, -17.0]), 15.0))
    return field, HandPose.zero(), RefineConfig()
