from glob import glob
from os import path as ospath
from time import time

import numpy as np
from aiofiles.os import path as aiopath

from handsdf import LOGGER
from handsdf.core.config_manager import Config
from handsdf.helper.ext_utils.exceptions import InvalidInputError, TrainingDivergedError
from handsdf.helper.ext_utils.files_utils import (
    decode_checkpoint,
    encode_checkpoint,
    ensure_dir,
    read_bytes,
    read_text,
    write_bytes,
    write_json,
    write_text,
)
from handsdf.helper.ext_utils.status_utils import (
    PipelineStatus,
    format_loss,
    get_progress_bar_string,
    get_readable_time,
)
from handsdf.helper.ext_utils.task_utils import sync_to_async
from handsdf.helper.scene_utils.data import read_scene, scene_conditioning
from handsdf.helper.sdf_utils.neural import (
    AdamState,
    NeuralSdf,
    TrainSample,
    adam_from_header,
    decoder_from_header,
    decoder_header,
    field_loss,
    init_decoder,
    train_iterations,
)

LOSS_HEADER = "iteration,total,data,eikonal\n"


async def load_dataset(directory):
    """Every scene directory in sorted order, with its samples."""
    paths = sorted(glob(ospath.join(directory, "scene_*")))
    if not paths:
        raise InvalidInputError(f"no scenes found under {directory}")
    return [await read_scene(p) for p in paths]


def build_samples(dataset, levels):
    contexts, samples = [], []
    for scene, sample_set in dataset:
        context = scene_conditioning(scene, levels)
        contexts.append(context)
        samples.extend(
            TrainSample(point, target, context)
            for point, target in zip(sample_set.points, sample_set.sdf_values, strict=True)
        )
    return contexts, samples


def new_decoder(channels):
    decoder = init_decoder(
        channels,
        Config.encoder_config(),
        conditioning=Config.CONDITIONING,
        pyramid_levels=Config.PYRAMID_LEVELS,
        global_width=Config.GLOBAL_FEATURE_WIDTH,
        hidden_width=Config.HIDDEN_WIDTH,
        activation=Config.ACTIVATION,
        softplus_beta=Config.SOFTPLUS_BETA,
        output_scale=Config.OUTPUT_SCALE,
        seed=Config.SEED,
        dtype=Config.param_dtype(),
    )
    adam = AdamState.zeros(
        decoder.flat_params().size, Config.LEARNING_RATE, dtype=Config.param_dtype()
    )
    return decoder, adam


async def load_checkpoint(path):
    header, params, first, second = decode_checkpoint(await read_bytes(path))
    decoder = decoder_from_header(header, params)
    adam = adam_from_header(header, first, second, dtype=decoder.mlp.dtype)
    return header, decoder, adam


def format_row(iteration, report):
    return f"{iteration},{report.total:.9g},{report.data:.9g},{report.eikonal:.9g}\n"


def held_in_scores(decoder, dataset, contexts, cfg):
    """Raw mean |s - s_hat| and the sample-weighted objective over every training sample."""
    errors, reports, counts = [], [], []
    for (scene, sample_set), context in zip(dataset, contexts, strict=True):
        field = NeuralSdf(decoder, context, scene.bounds)
        errors.append(np.abs(field.evaluate(sample_set.points) - sample_set.sdf_values))
        reports.append(field_loss(field, sample_set.points, sample_set.sdf_values, cfg))
        counts.append(len(sample_set))
    weights = np.asarray(counts, dtype=np.float64) / sum(counts)
    objective = {
        name: float(weights @ [getattr(r, name) for r in reports])
        for name in ("total", "data", "eikonal")
    }
    return float(np.concatenate(errors).mean()), objective


async def save_checkpoint(path, decoder, adam, cfg, iteration):
    await write_bytes(
        path,
        encode_checkpoint(
            decoder_header(decoder, adam, cfg, iteration),
            decoder.flat_params(),
            adam.first_moment,
            adam.second_moment,
        ),
    )


async def train_decoder(args):
    out = Config.OUTPUT_DIR
    checkpoint = Config.checkpoint_path()
    cfg = Config.train_config()
    await ensure_dir(out)
    dataset = await load_dataset(Config.DATASET_DIR)
    channels = dataset[0][0].image.shape[2]

    start, rows = 0, [LOSS_HEADER]
    log_path = ospath.join(out, "loss.csv")
    if args.resume and await aiopath.exists(checkpoint):
        header, decoder, adam = await load_checkpoint(checkpoint)
        start = header["iteration"]
        if await aiopath.exists(log_path):
            kept = (await read_text(log_path)).splitlines(keepends=True)[1:]
            rows += [row for row in kept if int(row.split(",", 1)[0]) <= start]
        LOGGER.info(f"Resuming from {checkpoint} at iteration {start}")
    else:
        decoder, adam = new_decoder(channels)
    contexts, samples = build_samples(dataset, decoder.pyramid_levels)
    LOGGER.info(
        f"{PipelineStatus.STATUS_TRAIN}: {len(dataset)} scenes, {len(samples)} samples,"
        f" {decoder.flat_params().size} parameters"
    )

    begin = time()
    iteration = start
    while iteration < cfg.iterations:
        stop = min(iteration + max(Config.CHECKPOINT_EVERY, 1), cfg.iterations)
        try:
            steps = await sync_to_async(
                list, train_iterations(decoder, adam, samples, cfg, iteration, stop)
            )
        except TrainingDivergedError:
            await write_text(log_path, "".join(rows))
            raise
        for done, decoder, adam, report in steps:
            rows.append(format_row(done, report))
        iteration = stop
        await save_checkpoint(checkpoint, decoder, adam, cfg, iteration)
        await write_text(log_path, "".join(rows))
        progress = get_progress_bar_string(iteration, cfg.iterations)
        LOGGER.info(
            f"{PipelineStatus.STATUS_CHECKPOINT} {progress} {format_loss(steps[-1][3])}"
        )

    if iteration == start:
        await save_checkpoint(checkpoint, decoder, adam, cfg, iteration)
    error, objective = await sync_to_async(held_in_scores, decoder, dataset, contexts, cfg)
    await write_text(log_path, "".join(rows))
    await write_json(
        ospath.join(out, "train.json"),
        {
            "checkpoint": checkpoint,
            "iterations": iteration,
            "scenes": len(dataset),
            "samples": len(samples),
            "mean_abs_error": error,
            "held_in_loss": objective,
        },
    )
    await write_json(ospath.join(out, "config.json"), Config.get_all())
    LOGGER.info(
        f"Trained to iteration {iteration} in {get_readable_time(time() - begin)};"
        f" mean |s - s_hat| {error:.3f} mm"
    )
