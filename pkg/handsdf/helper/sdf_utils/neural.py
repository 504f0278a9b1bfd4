"""
Trainable SDF decoder: an affine stack with one input skip connection,
hand-written reverse mode (parameter and input gradients), Adam, and the
L1 + eikonal training step.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from handsdf.helper.ext_utils.exceptions import (
    CheckpointMismatchError,
    InvalidInputError,
    ShapeMismatchError,
    StaleCacheError,
    TrainingDivergedError,
)
from handsdf.helper.ext_utils.task_utils import parallel_map
from handsdf.helper.hand_utils.camera import project_points

from .encoding import EncoderConfig, conditioning_features, conditioning_width
from .field import FeaturePyramid, SdfField, channel_means, sample_pyramid

DECODER_DEPTH = 8
SKIP_LAYER = 4
ACTIVATIONS = ("softplus", "relu")


@dataclass(frozen=True, eq=False)
class Mlp:
    """
    Affine layers with weights shaped (out, in). The network input is
    concatenated after the activations entering `skip_layer`; the last layer
    is linear with one output, multiplied by `output_scale`.
    """

    weights: tuple
    biases: tuple
    skip_layer: int | None = SKIP_LAYER
    activation: str = "softplus"
    softplus_beta: float = 100.0
    output_scale: float = 1.0

    def __post_init__(self):
        weights = tuple(np.asarray(w) for w in self.weights)
        biases = tuple(np.asarray(b) for b in self.biases)
        if not weights or len(weights) != len(biases):
            raise ShapeMismatchError("an mlp needs matching weight and bias lists")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        skip = self.skip_layer
        if skip is not None and not 0 < skip < len(weights):
            raise ShapeMismatchError(f"skip layer {skip} outside 1..{len(weights) - 1}")
        input_width = weights[0].shape[1]
        width = input_width
        for i, (w, b) in enumerate(zip(weights, biases, strict=True)):
            expected = width + (input_width if i == skip else 0)
            if w.ndim != 2 or w.shape[1] != expected or b.shape != (w.shape[0],):
                raise ShapeMismatchError(f"layer {i} has shape {w.shape}, expected in={expected}")
            width = w.shape[0]
        if width != 1:
            raise ShapeMismatchError("the last layer must have a single output")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def depth(self):
        return len(self.weights)

    @property
    def input_width(self):
        return self.weights[0].shape[1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def shapes(self):
        return [list(w.shape) for w in self.weights]

    @property
    def param_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases, strict=True))

    def is_finite(self):
        return all(np.all(np.isfinite(p)) for p in (*self.weights, *self.biases))

    def flat_params(self):
        return np.concatenate(
            [np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases, strict=True)]
        )

    def with_params(self, flat):
        flat = np.asarray(flat)
        if flat.size != self.param_count:
            raise ShapeMismatchError(f"{flat.size} parameters for an mlp of {self.param_count}")
        weights, biases, at = [], [], 0
        for w, b in zip(self.weights, self.biases, strict=True):
            weights.append(flat[at : at + w.size].reshape(w.shape).astype(w.dtype))
            at += w.size
            biases.append(flat[at : at + b.size].astype(b.dtype))
            at += b.size
        return replace(self, weights=tuple(weights), biases=tuple(biases))


def init_mlp(
    input_width,
    hidden_width=64,
    depth=DECODER_DEPTH,
    skip_layer=SKIP_LAYER,
    activation="softplus",
    softplus_beta=100.0,
    output_scale=1.0,
    seed=0,
    dtype=np.float32,
    rng=None,
):
    """Uniform +-sqrt(1 / fan_in) weights and biases from a seeded stream."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    outs = [hidden_width] * (depth - 1) + [1]
    weights, biases, width = [], [], input_width
    for i, out in enumerate(outs):
        fan_in = width + (input_width if i == skip_layer else 0)
        bound = np.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, (out, fan_in)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, out).astype(dtype))
        width = out
    return Mlp(tuple(weights), tuple(biases), skip_layer, activation, softplus_beta, output_scale)


def _activate(mlp, z):
    if mlp.activation == "relu":
        return np.maximum(z, 0.0)
    beta = mlp.softplus_beta
    return np.logaddexp(0.0, beta * z) / beta


def _activate_grad(mlp, z):
    if mlp.activation == "relu":
        return (z > 0).astype(np.float64)
    return expit(mlp.softplus_beta * z)


@dataclass(frozen=True, eq=False)
class MlpCache:
    owner: Mlp
    inputs: np.ndarray
    layer_inputs: tuple
    pre_activations: tuple
    single: bool


def mlp_forward(mlp, inputs):
    """
    Returns:
        The scaled output (scalar for one input row, (N,) for a batch) and
        the activation cache for mlp_backward.
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    if rows.shape[1] != mlp.input_width:
        raise ShapeMismatchError(f"input width {rows.shape[1]}, network expects {mlp.input_width}")
    layer_inputs, pre = [], []
    h = rows
    last = mlp.depth - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases, strict=True)):
        if i == mlp.skip_layer:
            h = np.concatenate([h, rows], axis=1)
        layer_inputs.append(h)
        z = h @ w.T.astype(np.float64) + b.astype(np.float64)
        pre.append(z)
        h = z if i == last else _activate(mlp, z)
    out = mlp.output_scale * h[:, 0]
    cache = MlpCache(mlp, rows, tuple(layer_inputs), tuple(pre), single)
    return (float(out[0]) if single else out), cache


def mlp_backward(mlp, cache, upstream):
    """
    Reverse pass for d(sum_n upstream_n * out_n).

    Returns:
        (weight grads, bias grads) summed over rows and the input gradient
        shaped like the forward input.
    """
    if cache.owner is not mlp:
        raise StaleCacheError("activation cache belongs to a different network")
    count = len(cache.inputs)
    up = np.asarray(upstream, dtype=np.float64)
    if up.size not in (1, count):
        raise ShapeMismatchError(f"{up.size} upstream values for {count} rows")
    g = np.broadcast_to(up.reshape(-1), (count,))[:, None] * mlp.output_scale
    weight_grads = [None] * mlp.depth
    bias_grads = [None] * mlp.depth
    input_grad = np.zeros_like(cache.inputs)
    for i in reversed(range(mlp.depth)):
        weight_grads[i] = g.T @ cache.layer_inputs[i]
        bias_grads[i] = g.sum(axis=0)
        g_in = g @ mlp.weights[i].astype(np.float64)
        if i == mlp.skip_layer:
            split = g_in.shape[1] - mlp.input_width
            input_grad += g_in[:, split:]
            g_in = g_in[:, :split]
        if i == 0:
            input_grad += g_in
        else:
            g = g_in * _activate_grad(mlp, cache.pre_activations[i - 1])
    grads = (tuple(weight_grads), tuple(bias_grads))
    return grads, (input_grad[0] if cache.single else input_grad)


def flatten_grads(grads):
    weights, biases = grads
    return np.concatenate(
        [np.concatenate([w.ravel(), b]) for w, b in zip(weights, biases, strict=True)]
    )


@dataclass(frozen=True, eq=False)
class AdamState:
    learning_rate: float
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.first_moment.shape != self.second_moment.shape:
            raise ShapeMismatchError("adam moments must share one shape")

    @classmethod
    def zeros(cls, size, learning_rate, dtype=np.float32, **kwargs):
        return cls(learning_rate, np.zeros(size, dtype=dtype), np.zeros(size, dtype=dtype), **kwargs)

    def hyper_parameters(self):
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
        }


def adam_step(state, params, grads):
    """
    One bias-corrected Adam update.

    Arithmetic runs in float64; parameters and moments are stored back in
    their own dtype so a checkpointed state resumes exactly.
    """
    params = np.asarray(params)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ShapeMismatchError(
            f"adam shapes differ: params {params.shape}, grads {grads.shape},"
            f" moments {state.first_moment.shape}"
        )
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.first_moment.astype(np.float64) + (1.0 - b1) * grads
    v = b2 * state.second_moment.astype(np.float64) + (1.0 - b2) * grads**2
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new_params = (params.astype(np.float64) - update).astype(params.dtype)
    moment_dtype = state.first_moment.dtype
    new_state = replace(
        state,
        first_moment=m.astype(moment_dtype),
        second_moment=v.astype(moment_dtype),
        step=step,
    )
    return new_params, new_state


@dataclass(frozen=True, eq=False)
class SdfDecoder:
    """
    Mlp plus the learned projection P (G x C) turning averaged coarsest-level
    channels into the global feature.

    Input layout: [x * input_scale | pyramid samples | P m | articulation features].
    """

    mlp: Mlp
    projection: np.ndarray
    encoder: EncoderConfig
    conditioning: str = "articulation"
    pyramid_levels: int = 3
    seed: int = 0

    @property
    def global_width(self):
        return self.projection.shape[0]

    @property
    def channels(self):
        return self.projection.shape[1]

    @property
    def local_width(self):
        return self.channels * self.pyramid_levels

    @property
    def global_slice(self):
        start = 3 + self.local_width
        return slice(start, start + self.global_width)

    def flat_params(self):
        return np.concatenate([self.mlp.flat_params(), self.projection.ravel()])

    def with_params(self, flat):
        split = self.mlp.param_count
        if np.size(flat) != split + self.projection.size:
            raise ShapeMismatchError(f"{np.size(flat)} parameters for this decoder")
        projection = np.asarray(flat[split:]).reshape(self.projection.shape)
        return replace(
            self,
            mlp=self.mlp.with_params(flat[:split]),
            projection=projection.astype(self.projection.dtype),
        )

    def is_finite(self):
        return self.mlp.is_finite() and bool(np.all(np.isfinite(self.projection)))


def init_decoder(
    channels,
    encoder,
    conditioning="articulation",
    pyramid_levels=3,
    global_width=16,
    hidden_width=64,
    activation="softplus",
    softplus_beta=100.0,
    output_scale=100.0,
    seed=0,
    dtype=np.float32,
):
    rng = np.random.default_rng(seed)
    input_width = (
        3
        + channels * pyramid_levels
        + global_width
        + conditioning_width(conditioning, encoder)
    )
    mlp = init_mlp(
        input_width,
        hidden_width=hidden_width,
        activation=activation,
        softplus_beta=softplus_beta,
        output_scale=output_scale,
        dtype=dtype,
        rng=rng,
    )
    bound = np.sqrt(1.0 / channels)
    projection = rng.uniform(-bound, bound, (global_width, channels)).astype(dtype)
    return SdfDecoder(mlp, projection, encoder, conditioning, pyramid_levels, seed)


@dataclass(frozen=True, eq=False)
class SceneConditioning:
    """Everything about one scene that turns query points into decoder rows."""

    model: object
    articulation: np.ndarray
    levels: tuple
    rig: object
    global_pose: object

    @property
    def channel_means(self):
        return channel_means(self.levels)

    def with_articulation(self, articulation):
        return replace(self, articulation=np.asarray(articulation, dtype=np.float64))

    def pyramid(self, decoder):
        glob = decoder.projection.astype(np.float64) @ self.channel_means
        return FeaturePyramid(self.levels, glob)

    def decoder_inputs(self, decoder, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.levels) != decoder.pyramid_levels:
            raise CheckpointMismatchError(
                f"scene has {len(self.levels)} pyramid levels, decoder {decoder.pyramid_levels}"
            )
        pixels = project_points(self.rig, self.global_pose, points)
        features = sample_pyramid(self.pyramid(decoder), pixels).reshape(len(points), -1)
        psi = conditioning_features(
            decoder.conditioning, self.model, self.articulation, points, decoder.encoder
        )
        rows = np.concatenate([points * decoder.encoder.input_scale, features, psi], axis=1)
        if rows.shape[1] != decoder.mlp.input_width:
            raise CheckpointMismatchError(
                f"scene yields {rows.shape[1]} decoder inputs, checkpoint expects"
                f" {decoder.mlp.input_width}"
            )
        return rows

    def projection_grad(self, decoder, input_grad):
        g = input_grad[:, decoder.global_slice].sum(axis=0)
        return np.outer(g, self.channel_means)


class NeuralSdf(SdfField):
    """Decoder conditioned on one scene; evaluation is read-only and row-wise."""

    def __init__(self, decoder, context, bounds, chunk_size=4096):
        super().__init__(bounds)
        self.decoder = decoder
        self.context = context
        self.chunk_size = chunk_size

    def _decode(self, points):
        out, _ = mlp_forward(self.decoder.mlp, self.context.decoder_inputs(self.decoder, points))
        return out

    def _evaluate(self, points):
        return parallel_map(self._decode, points, chunk_size=self.chunk_size)

    def with_articulation(self, articulation):
        return NeuralSdf(
            self.decoder,
            self.context.with_articulation(articulation),
            self.bounds,
            self.chunk_size,
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    eikonal_coefficient: float = 0.1
    batch_size: int = 64
    eikonal_step: float = 1.0
    iterations: int = 5000
    seed: int = 0
    truncation: float = 0.0

    def __post_init__(self):
        if self.eikonal_coefficient < 0:
            raise InvalidInputError("eikonal coefficient must be non-negative")
        if self.batch_size < 1:
            raise InvalidInputError("batch size must be at least 1")
        if not self.eikonal_step > 0:
            raise InvalidInputError("eikonal step must be positive")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning rate must be positive")


@dataclass(frozen=True, eq=False)
class TrainSample:
    point: np.ndarray
    target: float
    context: object


@dataclass(frozen=True)
class LossReport:
    total: float
    data: float
    eikonal: float


_STENCIL = np.concatenate([np.eye(3), -np.eye(3)])


def loss_terms(s, target, stencil_values, cfg):
    """
    Data and eikonal terms of the objective, with their slopes.

    Args:
        s: (N,) predicted distances.
        target: (N,) ground-truth distances.
        stencil_values: (N, 6) field values at x + h e_i then x - h e_i, or
            None to leave the eikonal term out.
        cfg: TrainConfig.

    Returns:
        (LossReport, d loss / d s, d loss / d stencil values)
    """
    count = len(s)
    delta = cfg.truncation
    if delta > 0:
        residual = np.clip(s, -delta, delta) - np.clip(target, -delta, delta)
        ds = (np.abs(s) < delta).astype(np.float64)
    else:
        residual = s - target
        ds = np.ones(count)
    data = float(np.mean(np.abs(residual)))
    d_s = np.sign(residual) * ds / count

    eikonal = 0.0
    d_stencil = np.zeros((count, 6))
    lam, h = cfg.eikonal_coefficient, cfg.eikonal_step
    if stencil_values is not None and lam > 0:
        grad = (stencil_values[:, :3] - stencil_values[:, 3:]) / (2.0 * h)
        norm = np.linalg.norm(grad, axis=1)
        err = norm - 1.0
        eikonal = float(lam * np.mean(err**2))
        safe = np.where(norm > 0, norm, 1.0)
        d_grad = (lam / count) * 2.0 * (err / safe)[:, None] * grad
        d_grad[norm == 0] = 0.0
        d_stencil = np.concatenate([d_grad, -d_grad], axis=1) / (2.0 * h)
    return LossReport(data + eikonal, data, eikonal), d_s, d_stencil


def field_loss(sdf_field, points, targets, cfg):
    """The training objective of any field on labeled points, without a step."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if not len(points) or len(points) != len(targets):
        raise InvalidInputError(f"{len(points)} points for {len(targets)} targets")
    stencil = None
    if cfg.eikonal_coefficient > 0:
        shifted = points[:, None, :] + cfg.eikonal_step * _STENCIL[None, :, :]
        stencil = sdf_field.evaluate(shifted.reshape(-1, 3)).reshape(-1, 6)
    report, _, _ = loss_terms(sdf_field.evaluate(points), targets, stencil, cfg)
    return report


def train_step(decoder, adam, batch, cfg):
    """
    One Adam step on mean |s - s_hat| + lambda (|grad s| - 1)^2.

    grad s is the central-difference stencil at x +- h e_i, each stencil point
    re-assembled through its scene's conditioning, so the eikonal term is
    differentiated through six extra forward rows per sample.
    """
    if not batch:
        raise InvalidInputError("training batch is empty")
    count = len(batch)
    lam, h = cfg.eikonal_coefficient, cfg.eikonal_step
    with_stencil = lam > 0

    groups = {}
    for n, sample in enumerate(batch):
        groups.setdefault(id(sample.context), (sample.context, []))[1].append(n)

    rows, owners, spans = [], [], []
    at = 0
    for context, members in groups.values():
        pts = np.stack([np.asarray(batch[n].point, dtype=np.float64) for n in members])
        if with_stencil:
            stencil = (pts[:, None, :] + h * _STENCIL[None, :, :]).reshape(-1, 3)
            pts = np.concatenate([pts, stencil])
        rows.append(context.decoder_inputs(decoder, pts))
        owners.append(context)
        spans.append((at, members))
        at += len(pts)
    inputs = np.concatenate(rows)
    out, cache = mlp_forward(decoder.mlp, inputs)

    s = np.empty(count)
    stencil_values = np.empty((count, 6))
    for start, members in spans:
        k = len(members)
        s[members] = out[start : start + k]
        if with_stencil:
            stencil_values[members] = out[start + k : start + 7 * k].reshape(k, 6)

    target = np.array([float(sample.target) for sample in batch])
    report, d_s, d_stencil = loss_terms(
        s, target, stencil_values if with_stencil else None, cfg
    )
    if not np.isfinite(report.total):
        raise TrainingDivergedError(f"non-finite loss at adam step {adam.step}")

    upstream = np.empty(len(inputs))
    for start, members in spans:
        k = len(members)
        upstream[start : start + k] = d_s[members]
        if with_stencil:
            upstream[start + k : start + 7 * k] = d_stencil[members].ravel()

    grads, input_grad = mlp_backward(decoder.mlp, cache, upstream)
    projection_grad = np.zeros(decoder.projection.shape)
    for context, (start, members) in zip(owners, spans, strict=True):
        k = len(members) * (7 if with_stencil else 1)
        projection_grad += context.projection_grad(decoder, input_grad[start : start + k])

    flat_grads = np.concatenate([flatten_grads(grads), projection_grad.ravel()])
    params, new_adam = adam_step(adam, decoder.flat_params(), flat_grads)
    if not np.all(np.isfinite(params)):
        raise TrainingDivergedError(f"non-finite parameters after adam step {new_adam.step}")
    return decoder.with_params(params), new_adam, report


def draw_batch(seed, iteration, sample_count, batch_size):
    """Batch indices derived from (seed, iteration) alone, so runs resume exactly."""
    rng = np.random.default_rng([seed, iteration])
    if sample_count >= batch_size:
        return rng.choice(sample_count, size=batch_size, replace=False)
    return rng.integers(0, sample_count, size=batch_size)


def train_iterations(decoder, adam, samples, cfg, start=0, stop=None):
    """Yields (iteration, decoder, adam, report) after every step."""
    stop = cfg.iterations if stop is None else stop
    for iteration in range(start, stop):
        picks = draw_batch(cfg.seed, iteration, len(samples), cfg.batch_size)
        decoder, adam, report = train_step(decoder, adam, [samples[i] for i in picks], cfg)
        yield iteration + 1, decoder, adam, report


def decoder_header(decoder, adam, train_cfg, iteration):
    mlp = decoder.mlp
    return {
        "widths": mlp.shapes,
        "activation": mlp.activation,
        "softplus_beta": mlp.softplus_beta,
        "output_scale": mlp.output_scale,
        "skip_layer": mlp.skip_layer,
        "encoder": decoder.encoder.to_dict(),
        "conditioning": decoder.conditioning,
        "pyramid": {"levels": decoder.pyramid_levels, "channels": decoder.channels},
        "projection_shape": list(decoder.projection.shape),
        "param_dtype": np.dtype(mlp.dtype).name,
        "seed": decoder.seed,
        "iteration": iteration,
        "adam": adam.hyper_parameters(),
        "train": {
            "learning_rate": train_cfg.learning_rate,
            "eikonal_coefficient": train_cfg.eikonal_coefficient,
            "batch_size": train_cfg.batch_size,
            "eikonal_step": train_cfg.eikonal_step,
            "seed": train_cfg.seed,
            "truncation": train_cfg.truncation,
        },
    }


def decoder_from_header(header, params):
    """Rebuilds the decoder described by a checkpoint header from flat parameters."""
    try:
        widths = header["widths"]
        skip = header["skip_layer"]
        dtype = np.dtype(header["param_dtype"])
        weights = tuple(np.zeros(shape, dtype=dtype) for shape in widths)
        biases = tuple(np.zeros(shape[0], dtype=dtype) for shape in widths)
        template = Mlp(
            weights,
            biases,
            skip,
            header["activation"],
            header["softplus_beta"],
            header["output_scale"],
        )
        projection = np.zeros(header["projection_shape"], dtype=dtype)
        decoder = SdfDecoder(
            template,
            projection,
            EncoderConfig(**header["encoder"]),
            header["conditioning"],
            header["pyramid"]["levels"],
            header["seed"],
        )
    except (KeyError, TypeError) as e:
        raise CheckpointMismatchError(f"malformed checkpoint header: {e}") from e
    return decoder.with_params(np.asarray(params).astype(dtype))


def adam_from_header(header, first_moment, second_moment, dtype=np.float32):
    """Optimizer state of a checkpoint; moments keep the stored precision."""
    try:
        hyper = header["adam"]
        return AdamState(
            hyper["learning_rate"],
            np.asarray(first_moment).astype(dtype),
            np.asarray(second_moment).astype(dtype),
            hyper["step"],
            hyper["beta1"],
            hyper["beta2"],
            hyper["eps"],
        )
    except (KeyError, TypeError) as e:
        raise CheckpointMismatchError(f"malformed optimizer header: {e}") from e
