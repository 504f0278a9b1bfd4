from dataclasses import dataclass

import numpy as np

from handsdf.helper.ext_utils.exceptions import InvalidInputError
from handsdf.helper.hand_utils.kinematics import (
    ARTICULATION_SIZE,
    forward_kinematics,
    wrist_to_joint_coords,
)

CONDITIONING_MODES = ("articulation", "pose_param", "none")


@dataclass(frozen=True)
class EncoderConfig:
    num_frequencies: int = 6
    include_input: bool = True
    input_scale: float = 0.01

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise InvalidInputError("num_frequencies must be at least 1")
        if not (np.isfinite(self.input_scale) and self.input_scale > 0):
            raise InvalidInputError("input_scale must be positive")

    @property
    def width_per_scalar(self):
        return 2 * self.num_frequencies + int(self.include_input)

    @property
    def frequencies(self):
        return np.pi * 2.0 ** np.arange(self.num_frequencies)

    def to_dict(self):
        return {
            "num_frequencies": self.num_frequencies,
            "include_input": self.include_input,
            "input_scale": self.input_scale,
        }


def positional_encode(cfg, v):
    """
    Sinusoidal encoding of every scalar, concatenated in input order.

    Each scalar u becomes [u, sin(2^0 pi u), cos(2^0 pi u), ...,
    sin(2^(L-1) pi u), cos(2^(L-1) pi u)], without the leading u when
    include_input is off. Batches (N, n) encode row by row.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("positional encoding input must be finite")
    arg = v[..., None] * cfg.frequencies
    parts = np.stack([np.sin(arg), np.cos(arg)], axis=-1).reshape(*v.shape, -1)
    if cfg.include_input:
        parts = np.concatenate([v[..., None], parts], axis=-1)
    return parts.reshape(*v.shape[:-1], -1)


def positional_encode_derivative(cfg, v):
    """Elementwise d encode / d u, same layout as positional_encode."""
    v = np.asarray(v, dtype=np.float64)
    freqs = cfg.frequencies
    arg = v[..., None] * freqs
    parts = np.stack([freqs * np.cos(arg), -freqs * np.sin(arg)], axis=-1)
    parts = parts.reshape(*v.shape, -1)
    if cfg.include_input:
        parts = np.concatenate([np.ones((*v.shape, 1)), parts], axis=-1)
    return parts


def articulation_embed(model, articulation, x, cfg):
    coords = wrist_to_joint_coords(model, articulation, x)
    return positional_encode(cfg, coords * cfg.input_scale)


def articulation_embed_jacobian(model, articulation, x, cfg):
    """d articulation_embed / d x: (W, 3), or (N, W, 3) for a batch."""
    x = np.asarray(x, dtype=np.float64)
    frames = forward_kinematics(model, articulation)
    # d coords / d x stacks R_k^T for the 15 joints
    dcoords = np.transpose(frames.rotations[1:], (0, 2, 1)).reshape(ARTICULATION_SIZE, 3)
    coords = wrist_to_joint_coords(model, articulation, x).reshape(-1, ARTICULATION_SIZE)
    denc = positional_encode_derivative(cfg, coords * cfg.input_scale) * cfg.input_scale
    jac = denc[:, :, :, None] * dcoords[None, :, None, :]
    jac = jac.reshape(len(coords), -1, 3)
    return jac[0] if x.ndim == 1 else jac


def pose_param_embed(articulation, x):
    """Query point concatenated with the raw articulation, 48 wide."""
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(articulation, dtype=np.float64).reshape(-1)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(theta))):
        raise InvalidInputError("pose parameter embedding input must be finite")
    pts = x.reshape(-1, 3)
    out = np.concatenate([pts, np.broadcast_to(theta, (len(pts), theta.size))], axis=1)
    return out[0] if x.ndim == 1 else out


def conditioning_width(mode, cfg):
    if mode == "articulation":
        return ARTICULATION_SIZE * cfg.width_per_scalar
    if mode == "pose_param":
        return 3 + ARTICULATION_SIZE
    if mode == "none":
        return 0
    raise InvalidInputError(f"unknown conditioning {mode!r}")


def conditioning_features(mode, model, articulation, points, cfg):
    """(N, conditioning_width) articulation features for a batch of points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if mode == "articulation":
        return articulation_embed(model, articulation, points, cfg)
    if mode == "pose_param":
        return pose_param_embed(articulation, points * cfg.input_scale)
    if mode == "none":
        return np.zeros((len(points), 0))
    raise InvalidInputError(f"unknown conditioning {mode!r}")
