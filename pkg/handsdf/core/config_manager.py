import json
import os
from importlib import import_module
from typing import Any

import numpy as np

from handsdf import LOGGER
from handsdf.helper.ext_utils.exceptions import FormatError, InvalidInputError
from handsdf.helper.hand_utils.camera import Intrinsics
from handsdf.helper.hand_utils.refine import CONTACT_FORMS, RefineConfig
from handsdf.helper.sdf_utils.encoding import CONDITIONING_MODES, EncoderConfig
from handsdf.helper.sdf_utils.field import PRIMITIVE_KINDS
from handsdf.helper.sdf_utils.neural import ACTIVATIONS, TrainConfig

PARAM_DTYPES = ("float32", "float64")
DEFAULT_CHECKPOINT = "model.nsdf"


class Config:
    # paths and process
    DATASET_DIR: str = "dataset"
    CHECKPOINT: str = ""
    OUTPUT_DIR: str = "output"
    SEED: int = 0
    THREADS: int = 0
    LOG_FILE: str = ""
    LOG_TIMEZONE: str = "UTC"

    # dataset generation
    SCENE_COUNT: int = 20
    SCENE_KINDS: str = "sphere box capsule"
    SAMPLES_PER_SCENE: int = 4096
    SURFACE_BAND: float = 10.0
    NEAR_SURFACE_RATIO: float = 0.95
    UNIFORM_BOUND: float = 150.0
    GRASP_JITTER: float = 0.05
    IMAGE_SIZE: int = 224
    FOCAL: float = 480.0

    # training
    LEARNING_RATE: float = 1e-4
    EIKONAL_COEFFICIENT: float = 0.1
    BATCH_SIZE: int = 64
    EIKONAL_STEP: float = 1.0
    ITERATIONS: int = 5000
    CHECKPOINT_EVERY: int = 500
    TRUNCATION: float = 0.0
    HIDDEN_WIDTH: int = 64
    ACTIVATION: str = "softplus"
    SOFTPLUS_BETA: float = 100.0
    OUTPUT_SCALE: float = 100.0
    PARAM_DTYPE: str = "float32"
    CONDITIONING: str = "articulation"

    # encoding
    NUM_FREQUENCIES: int = 6
    INCLUDE_INPUT: bool = True
    INPUT_SCALE: float = 0.01
    PYRAMID_LEVELS: int = 3
    GLOBAL_FEATURE_WIDTH: int = 16

    # refinement
    CONTACT_THRESHOLD: float = 10.0
    CONTACT_MARGIN: float = 2.0
    CONTACT_FORM: str = "as_written"
    REFINE_STEPS: int = 200
    REFINE_LR: float = 1e-5
    HAND_SAMPLES_PER_BONE: int = 32
    FREEZE_FIELD: bool = True
    BAKE_RESOLUTION: int = 96
    GRADIENT_STEP: float = 0.5

    # extraction and evaluation
    EXTRACTION_RESOLUTION: int = 64
    METRIC_SAMPLES: int = 10000
    VOXEL_SIZE: float = 1.0
    TEST_JITTER: float = 0.0

    @classmethod
    def _convert(cls, key, value):
        expected_type = type(getattr(cls, key))
        if value is None:
            return None

        if isinstance(value, expected_type) and not (
            expected_type is int and isinstance(value, bool)
        ):
            return value

        if expected_type is bool:
            return str(value).strip().lower() in {"true", "1", "yes"}

        try:
            return expected_type(value)
        except (ValueError, TypeError) as exc:
            raise TypeError(
                f"Invalid type for {key}: expected {expected_type}, got {type(value)}"
            ) from exc

    @classmethod
    def _normalize_value(cls, key: str, value: Any) -> Any:
        if isinstance(value, str):
            value = value.strip()

        choices = {
            "CONDITIONING": CONDITIONING_MODES,
            "ACTIVATION": ACTIVATIONS,
            "CONTACT_FORM": CONTACT_FORMS,
            "PARAM_DTYPE": PARAM_DTYPES,
        }
        if key in choices:
            value = value.lower()
            if value not in choices[key]:
                raise InvalidInputError(f"{key} must be one of {', '.join(choices[key])}")

        if key == "SCENE_KINDS":
            kinds = value.replace(",", " ").lower().split()
            unknown = [k for k in kinds if k not in PRIMITIVE_KINDS]
            if unknown or not kinds:
                raise InvalidInputError(f"unknown scene kinds {unknown or value!r}")
            return " ".join(kinds)

        return value

    @classmethod
    def get(cls, key: str) -> Any:
        return getattr(cls, key, None)

    @classmethod
    def set(cls, key: str, value: Any):
        if not hasattr(cls, key):
            raise KeyError(f"{key} is not a valid configuration key.")
        converted = cls._convert(key, value)
        normalized = cls._normalize_value(key, converted)
        setattr(cls, key, normalized)

    @classmethod
    def get_all(cls) -> dict:
        return {key: getattr(cls, key) for key in sorted(cls.__annotations__)}

    @classmethod
    def reset(cls):
        for key, value in DEFAULTS.items():
            setattr(cls, key, value)

    @classmethod
    def load(cls):
        try:
            settings = import_module("config")
        except ModuleNotFoundError:
            LOGGER.debug("No config.py module found.")
            return

        for attr in dir(settings):
            if not cls._is_valid_config_attr(settings, attr):
                continue

            value = getattr(settings, attr)
            if value is None:
                continue

            try:
                cls.set(attr, value)
            except Exception as e:
                LOGGER.warning(f"Skipping config '{attr}' due to error: {e}")

    @classmethod
    def load_dict(cls, config_dict: dict[str, Any]):
        for key, value in config_dict.items():
            try:
                cls.set(key, value)
            except Exception as e:
                LOGGER.warning(f"Skipping config '{key}' due to error: {e}")

    @classmethod
    def load_json(cls, path: str):
        """Applies a JSON pipeline config (a flat object of key: value)."""
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid json ({e})") from e
        if not isinstance(data, dict):
            raise FormatError(f"{path}: config must be a json object")
        cls.load_dict({key.upper(): value for key, value in data.items()})

    @classmethod
    def _is_valid_config_attr(cls, module, attr: str) -> bool:
        return (
            not attr.startswith("__")
            and not callable(getattr(module, attr))
            and attr in cls.__annotations__
        )

    @classmethod
    def checkpoint_path(cls) -> str:
        """CHECKPOINT as given, or model.nsdf inside OUTPUT_DIR when unset."""
        return cls.CHECKPOINT or os.path.join(cls.OUTPUT_DIR, DEFAULT_CHECKPOINT)

    @classmethod
    def scene_kinds(cls) -> list[str]:
        return cls.SCENE_KINDS.split()

    @classmethod
    def param_dtype(cls):
        return np.dtype(cls.PARAM_DTYPE).type

    @classmethod
    def bounds(cls) -> np.ndarray:
        return np.array([[-cls.UNIFORM_BOUND] * 3, [cls.UNIFORM_BOUND] * 3])

    @classmethod
    def intrinsics(cls) -> Intrinsics:
        return Intrinsics.centered(cls.FOCAL, (cls.IMAGE_SIZE, cls.IMAGE_SIZE))

    @classmethod
    def encoder_config(cls) -> EncoderConfig:
        return EncoderConfig(cls.NUM_FREQUENCIES, cls.INCLUDE_INPUT, cls.INPUT_SCALE)

    @classmethod
    def train_config(cls) -> TrainConfig:
        return TrainConfig(
            learning_rate=cls.LEARNING_RATE,
            eikonal_coefficient=cls.EIKONAL_COEFFICIENT,
            batch_size=cls.BATCH_SIZE,
            eikonal_step=cls.EIKONAL_STEP,
            iterations=cls.ITERATIONS,
            seed=cls.SEED,
            truncation=cls.TRUNCATION,
        )

    @classmethod
    def refine_config(cls) -> RefineConfig:
        return RefineConfig(
            contact_threshold=cls.CONTACT_THRESHOLD,
            contact_margin=cls.CONTACT_MARGIN,
            steps=cls.REFINE_STEPS,
            learning_rate=cls.REFINE_LR,
            hand_samples_per_bone=cls.HAND_SAMPLES_PER_BONE,
            freeze_field=cls.FREEZE_FIELD,
            contact_form=cls.CONTACT_FORM,
            bake_resolution=cls.BAKE_RESOLUTION,
            gradient_step=cls.GRADIENT_STEP,
        )


DEFAULTS = Config.get_all()


class SystemEnv:
    @classmethod
    def load(cls):
        for key in Config.__annotations__:
            env_value = os.getenv(key)
            if env_value is not None:
                try:
                    Config.set(key, env_value)
                except Exception as e:
                    LOGGER.warning(f"Env override failed for '{key}': {e}")
