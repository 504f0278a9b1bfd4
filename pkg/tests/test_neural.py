import numpy as np
import pytest

from handsdf.helper.ext_utils.exceptions import (
    CheckpointMismatchError,
    InvalidInputError,
    ShapeMismatchError,
    StaleCacheError,
)
from handsdf.helper.scene_utils.data import scene_conditioning
from handsdf.core.config_manager import Config
from handsdf.helper.sdf_utils.encoding import EncoderConfig
from handsdf.helper.sdf_utils.neural import (
    AdamState,
    Mlp,
    NeuralSdf,
    TrainConfig,
    TrainSample,
    adam_from_header,
    adam_step,
    decoder_from_header,
    decoder_header,
    draw_batch,
    field_loss,
    flatten_grads,
    init_decoder,
    init_mlp,
    loss_terms,
    mlp_backward,
    mlp_forward,
    train_iterations,
    train_step,
)

ENCODER = EncoderConfig(2)


def small_mlp(activation="softplus", seed=0):
    return init_mlp(
        5, hidden_width=6, depth=4, skip_layer=2, activation=activation,
        softplus_beta=10.0, output_scale=3.0, seed=seed, dtype=np.float64,
    )


def small_decoder(conditioning="articulation", dtype=np.float64, seed=0):
    return init_decoder(
        2, ENCODER, conditioning=conditioning, hidden_width=8, output_scale=10.0,
        seed=seed, dtype=dtype,
    )


@pytest.fixture
def context(small_scene):
    return scene_conditioning(small_scene, 3)


@pytest.fixture
def samples(context, rng):
    points = rng.uniform(-40.0, 40.0, (12, 3)) + np.array([60.0, 0.0, -40.0])
    targets = np.linalg.norm(points - np.array([60.0, 0.0, -40.0]), axis=1) - 25.0
    return [TrainSample(p, float(t), context) for p, t in zip(points, targets, strict=True)]


def test_default_shapes():
    mlp = init_mlp(10)
    assert mlp.depth == 8
    assert mlp.shapes[0] == [64, 10]
    assert mlp.shapes[4] == [64, 74]
    assert mlp.shapes[-1] == [1, 64]
    assert mlp.dtype == np.float32


def test_init_is_seeded():
    a, b = init_mlp(7, seed=3), init_mlp(7, seed=3)
    np.testing.assert_array_equal(a.flat_params(), b.flat_params())
    assert not np.array_equal(a.flat_params(), init_mlp(7, seed=4).flat_params())


def test_shape_validation():
    mlp = small_mlp()
    with pytest.raises(ShapeMismatchError):
        Mlp(mlp.weights[:-1], mlp.biases[:-1], skip_layer=2)
    with pytest.raises(ShapeMismatchError):
        Mlp(mlp.weights, mlp.biases, skip_layer=1)
    with pytest.raises(InvalidInputError):
        Mlp(mlp.weights, mlp.biases, skip_layer=2, activation="tanh")
    with pytest.raises(ShapeMismatchError):
        mlp_forward(mlp, np.zeros(4))


def test_single_row_matches_batch(rng):
    mlp = small_mlp()
    x = rng.normal(size=(3, 5))
    batch, _ = mlp_forward(mlp, x)
    for row, value in zip(x, batch, strict=True):
        single, _ = mlp_forward(mlp, row)
        assert isinstance(single, float)
        assert single == pytest.approx(value)


def test_params_round_trip(rng):
    mlp = small_mlp()
    flat = rng.normal(size=mlp.param_count)
    np.testing.assert_array_equal(mlp.with_params(flat).flat_params(), flat)
    with pytest.raises(ShapeMismatchError):
        mlp.with_params(flat[:-1])


@pytest.mark.parametrize("activation", ["softplus", "relu"])
def test_backward_matches_finite_differences(activation, rng):
    mlp = small_mlp(activation, seed=5)
    x = rng.normal(size=(4, 5))
    upstream = rng.normal(size=4)
    _, cache = mlp_forward(mlp, x)
    grads, input_grad = mlp_backward(mlp, cache, upstream)
    flat = mlp.flat_params()
    analytic = flatten_grads(grads)

    def objective(params, inputs=x):
        out, _ = mlp_forward(mlp.with_params(params), inputs)
        return float(upstream @ out)

    step = 1e-6
    for k in rng.choice(flat.size, 25, replace=False):
        e = np.zeros_like(flat)
        e[k] = step
        numeric = (objective(flat + e) - objective(flat - e)) / (2 * step)
        assert analytic[k] == pytest.approx(numeric, rel=1e-4, abs=1e-6)

    for n in range(4):
        for i in range(5):
            e = np.zeros_like(x)
            e[n, i] = step
            numeric = (objective(flat, x + e) - objective(flat, x - e)) / (2 * step)
            assert input_grad[n, i] == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_stale_cache(rng):
    mlp = small_mlp()
    _, cache = mlp_forward(mlp, rng.normal(size=(2, 5)))
    with pytest.raises(StaleCacheError):
        mlp_backward(small_mlp(seed=1), cache, np.ones(2))
    with pytest.raises(ShapeMismatchError):
        mlp_backward(mlp, cache, np.ones(3))


def test_adam_first_step_moves_by_learning_rate():
    state = AdamState.zeros(3, 0.01, dtype=np.float64)
    params, state = adam_step(state, np.zeros(3), np.array([2.0, -0.5, 0.0]))
    np.testing.assert_allclose(params, [-0.01, 0.01, 0.0], rtol=1e-6)
    assert state.step == 1
    np.testing.assert_allclose(state.first_moment, [0.2, -0.05, 0.0])
    with pytest.raises(ShapeMismatchError):
        adam_step(state, np.zeros(2), np.zeros(2))


def test_adam_keeps_storage_dtype():
    state = AdamState.zeros(4, 1e-3)
    params, state = adam_step(state, np.ones(4, dtype=np.float32), np.ones(4))
    assert params.dtype == np.float32
    assert state.first_moment.dtype == np.float32


def test_train_config_validation():
    for bad in ({"batch_size": 0}, {"eikonal_step": 0.0}, {"learning_rate": 0.0},
                {"eikonal_coefficient": -1.0}):
        with pytest.raises(InvalidInputError):
            TrainConfig(**bad)


def test_decoder_input_layout(context, rng):
    decoder = small_decoder()
    assert decoder.global_slice == slice(3 + 6, 3 + 6 + 16)
    pts = rng.uniform(-30.0, 30.0, (5, 3))
    rows = context.decoder_inputs(decoder, pts)
    assert rows.shape == (5, decoder.mlp.input_width)
    np.testing.assert_allclose(rows[:, :3], pts * ENCODER.input_scale)
    glob = decoder.projection @ context.channel_means
    np.testing.assert_allclose(rows[:, decoder.global_slice], np.tile(glob, (5, 1)))


def test_decoder_level_mismatch(small_scene):
    context = scene_conditioning(small_scene, 2)
    with pytest.raises(CheckpointMismatchError):
        context.decoder_inputs(small_decoder(), np.zeros((1, 3)))


def test_neural_field_reads_the_decoder(context, rng):
    decoder = small_decoder()
    field = NeuralSdf(decoder, context, np.array([[-100.0] * 3, [100.0] * 3]), chunk_size=3)
    pts = rng.uniform(-50.0, 50.0, (7, 3))
    expected, _ = mlp_forward(decoder.mlp, context.decoder_inputs(decoder, pts))
    np.testing.assert_allclose(field.evaluate(pts), expected)


@pytest.mark.parametrize(("conditioning", "changes"), [("articulation", True), ("none", False)])
def test_articulation_swap(context, rng, conditioning, changes):
    decoder = small_decoder(conditioning)
    field = NeuralSdf(decoder, context, np.array([[-100.0] * 3, [100.0] * 3]))
    pts = rng.uniform(-50.0, 50.0, (6, 3))
    moved = field.with_articulation(np.full(45, 0.3))
    assert (not np.allclose(field.evaluate(pts), moved.evaluate(pts))) == changes
    np.testing.assert_array_equal(field.context.articulation, np.zeros(45))


def _loss(decoder, batch, cfg):
    adam = AdamState.zeros(decoder.flat_params().size, cfg.learning_rate, dtype=np.float64)
    return train_step(decoder, adam, batch, cfg)[2].total


def test_train_step_descends_along_the_gradient(samples, rng):
    decoder = small_decoder()
    cfg = TrainConfig(learning_rate=1e-3, eikonal_coefficient=0.1, batch_size=12)
    flat = decoder.flat_params()
    adam = AdamState.zeros(flat.size, cfg.learning_rate, dtype=np.float64)
    updated, _, _ = train_step(decoder, adam, samples, cfg)
    delta = updated.flat_params() - flat

    step = 1e-6
    picks = np.concatenate(
        [rng.choice(decoder.mlp.param_count, 20, replace=False),
         decoder.mlp.param_count + np.arange(decoder.projection.size)[:10]]
    )
    checked = 0
    for k in picks:
        e = np.zeros_like(flat)
        e[k] = step
        numeric = (
            _loss(decoder.with_params(flat + e), samples, cfg)
            - _loss(decoder.with_params(flat - e), samples, cfg)
        ) / (2 * step)
        if abs(numeric) > 1e-4:
            assert np.sign(delta[k]) == -np.sign(numeric)
            assert abs(delta[k]) == pytest.approx(cfg.learning_rate, rel=1e-3)
            checked += 1
    assert checked > 5


def test_loss_report_parts(samples):
    decoder = small_decoder()
    cfg = TrainConfig(eikonal_coefficient=0.0, batch_size=12)
    adam = AdamState.zeros(decoder.flat_params().size, cfg.learning_rate, dtype=np.float64)
    _, _, report = train_step(decoder, adam, samples, cfg)
    assert report.eikonal == 0.0
    assert report.total == report.data
    field_values, _ = mlp_forward(
        decoder.mlp,
        samples[0].context.decoder_inputs(decoder, np.stack([s.point for s in samples])),
    )
    targets = np.array([s.target for s in samples])
    assert report.data == pytest.approx(np.mean(np.abs(field_values - targets)))
    with pytest.raises(InvalidInputError):
        train_step(decoder, adam, [], cfg)


def test_training_lowers_the_loss(samples):
    decoder = small_decoder()
    cfg = TrainConfig(learning_rate=1e-3, batch_size=12, iterations=60)
    adam = AdamState.zeros(decoder.flat_params().size, cfg.learning_rate, dtype=np.float64)
    reports = [step[3] for step in train_iterations(decoder, adam, samples, cfg)]
    assert len(reports) == 60
    assert np.mean([r.total for r in reports[-5:]]) < reports[0].total


def test_draw_batch():
    np.testing.assert_array_equal(draw_batch(3, 7, 100, 10), draw_batch(3, 7, 100, 10))
    assert len(set(draw_batch(3, 7, 100, 10))) == 10
    small = draw_batch(3, 7, 4, 10)
    assert len(small) == 10 and small.max() < 4


def test_resumed_training_is_identical(samples):
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, iterations=6)
    decoder = small_decoder()
    adam = AdamState.zeros(decoder.flat_params().size, cfg.learning_rate, dtype=np.float64)
    *_, (_, straight, _, _) = train_iterations(decoder, adam, samples, cfg)
    *_, (done, half, half_adam, _) = train_iterations(decoder, adam, samples, cfg, 0, 3)
    assert done == 3
    *_, (_, resumed, _, _) = train_iterations(half, half_adam, samples, cfg, 3)
    np.testing.assert_array_equal(resumed.flat_params(), straight.flat_params())


def test_checkpoint_header_round_trip(rng):
    decoder = small_decoder(dtype=np.float32, seed=2)
    cfg = TrainConfig()
    size = decoder.flat_params().size
    adam = AdamState(1e-4, rng.normal(size=size).astype(np.float32),
                     rng.uniform(size=size).astype(np.float32), step=12)
    header = decoder_header(decoder, adam, cfg, 12)
    assert header["pyramid"] == {"levels": 3, "channels": 2}
    restored = decoder_from_header(header, decoder.flat_params())
    np.testing.assert_array_equal(restored.flat_params(), decoder.flat_params())
    assert restored.mlp.dtype == np.float32
    assert restored.encoder == decoder.encoder
    back = adam_from_header(header, adam.first_moment, adam.second_moment)
    assert back.step == 12
    np.testing.assert_array_equal(back.second_moment, adam.second_moment)


def test_malformed_header():
    decoder = small_decoder()
    header = decoder_header(decoder, AdamState.zeros(1, 1e-4), TrainConfig(), 0)
    del header["widths"]
    with pytest.raises(CheckpointMismatchError):
        decoder_from_header(header, decoder.flat_params())
    with pytest.raises(CheckpointMismatchError):
        adam_from_header({}, np.zeros(1), np.zeros(1))


def test_zero_network_outputs_zero(rng):
    for activation in ("softplus", "relu"):
        mlp = small_mlp(activation)
        silent = mlp.with_params(np.zeros(mlp.param_count))
        out, _ = mlp_forward(silent, rng.normal(size=(6, 5)))
        np.testing.assert_array_equal(out, np.zeros(6))


def test_single_identity_row():
    mlp = Mlp((np.array([[1.0, 0.0, 0.0]]),), (np.zeros(1),), skip_layer=None)
    assert mlp_forward(mlp, np.array([1.0, 0.0, 0.0]))[0] == 1.0
    assert mlp_forward(mlp, np.array([-2.5, 7.0, 3.0]))[0] == -2.5


def test_adam_constant_gradient_moves_by_the_learning_rate():
    state = AdamState.zeros(3, 0.01, dtype=np.float64)
    grads = np.array([2.0, -0.5, 1e-3])
    params = np.zeros(3)
    for _ in range(100):
        before = params
        params, state = adam_step(state, params, grads)
    np.testing.assert_allclose(before - params, 0.01 * np.sign(grads), rtol=1e-4)
    np.testing.assert_allclose(params, -np.sign(grads), rtol=1e-4)


def test_adam_without_momentum_normalizes_the_gradient():
    state = AdamState.zeros(3, 0.1, dtype=np.float64, beta1=0.0, beta2=0.0)
    params = np.ones(3)
    for grads in (np.array([4.0, -1.0, 0.0]), np.array([-3.0, 2.0, 1e-8])):
        expected = params - 0.1 * grads / (np.abs(grads) + 1e-8)
        params, state = adam_step(state, params, grads)
        np.testing.assert_allclose(params, expected, rtol=1e-12)
    # eps is as large as the last gradient
    assert params[2] == pytest.approx(0.95)


def test_linear_fit_reaches_a_small_loss(rng):
    x = rng.normal(size=(16, 3))
    y = x @ np.array([2.0, -1.0, 0.5]) + 0.25
    mlp = Mlp((rng.uniform(-0.5, 0.5, (1, 3)),), (np.zeros(1),), skip_layer=None)
    adam = AdamState.zeros(mlp.param_count, 0.05, dtype=np.float64)
    for _ in range(1000):
        out, cache = mlp_forward(mlp, x)
        grads, _ = mlp_backward(mlp, cache, 2.0 * (out - y) / len(x))
        params, adam = adam_step(adam, mlp.flat_params(), flatten_grads(grads))
        mlp = mlp.with_params(params)
    out, _ = mlp_forward(mlp, x)
    assert np.mean((out - y) ** 2) < 1e-6


def test_loss_terms():
    cfg = TrainConfig(eikonal_coefficient=0.5, eikonal_step=2.0)
    s, target = np.array([1.0, -2.0]), np.array([0.0, 0.0])
    # gradients (2, 0, 0) and (0, 0, 0)
    stencil = np.array([[4.0, 0.0, 0.0, -4.0, 0.0, 0.0], np.zeros(6)])
    report, d_s, d_stencil = loss_terms(s, target, stencil, cfg)
    assert report.data == pytest.approx(1.5)
    assert report.eikonal == pytest.approx(0.5 * (1.0 + 1.0) / 2)
    assert report.total == pytest.approx(report.data + report.eikonal)
    np.testing.assert_allclose(d_s, [0.5, -0.5])
    # the flat row has no direction to push along
    np.testing.assert_array_equal(d_stencil[1], np.zeros(6))
    np.testing.assert_allclose(d_stencil[0], [0.125, 0, 0, -0.125, 0, 0])
    alone, _, untouched = loss_terms(s, target, None, cfg)
    assert alone.eikonal == 0.0 and alone.total == alone.data
    np.testing.assert_array_equal(untouched, np.zeros((2, 6)))


def test_exact_field_has_no_loss(sphere_field, rng):
    directions = rng.normal(size=(300, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    points = directions * rng.uniform(40.0, 60.0, (300, 1))
    targets = sphere_field.evaluate(points)
    np.testing.assert_allclose(targets, np.linalg.norm(points, axis=1) - 50.0, atol=1e-12)
    cfg = TrainConfig()
    report = field_loss(sphere_field, points, targets, cfg)
    assert report.data == 0.0
    assert report.eikonal < 1e-6
    assert report.total == report.eikonal
    with pytest.raises(InvalidInputError):
        field_loss(sphere_field, points, targets[:-1], cfg)


def test_objective_defaults():
    cfg = TrainConfig()
    assert cfg.learning_rate == 1e-4
    assert cfg.eikonal_coefficient == 0.1
    assert Config.LEARNING_RATE == 1e-4
    assert Config.EIKONAL_COEFFICIENT == 0.1
    assert Config.train_config().learning_rate == 1e-4
