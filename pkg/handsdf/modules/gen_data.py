from glob import glob
from os import path as ospath
from time import time

from handsdf import LOGGER
from handsdf.core.config_manager import Config
from handsdf.helper.ext_utils.exceptions import SceneGenerationError
from handsdf.helper.ext_utils.files_utils import clean_target, ensure_dir, write_json
from handsdf.helper.ext_utils.status_utils import (
    PipelineStatus,
    get_progress_bar_string,
    get_readable_time,
)
from handsdf.helper.ext_utils.task_utils import sync_to_async
from handsdf.helper.scene_utils.data import (
    generate_grasp_scene,
    sample_counts,
    sample_points,
    scene_dir,
    write_scene,
)


def _build_scene(index, kind):
    seed = [Config.SEED, index]
    scene = generate_grasp_scene(
        kind,
        seed,
        jitter=Config.GRASP_JITTER,
        intrinsics=Config.intrinsics(),
        bound=Config.UNIFORM_BOUND,
    )
    samples = sample_points(
        scene,
        Config.SAMPLES_PER_SCENE,
        Config.SURFACE_BAND,
        scene.bounds,
        [Config.SEED, index, 1],
        Config.NEAR_SURFACE_RATIO,
    )
    return scene, samples


async def gen_dataset(_):
    out = Config.OUTPUT_DIR
    kinds = Config.scene_kinds()
    count = Config.SCENE_COUNT
    await ensure_dir(out)
    # train reads every scene_* folder, so leftovers from a larger run must go
    for stale in sorted(glob(ospath.join(out, "scene_*"))):
        await clean_target(stale)
    start = time()
    near, uniform = sample_counts(Config.SAMPLES_PER_SCENE, Config.NEAR_SURFACE_RATIO)
    scenes, failures = [], []
    for index in range(count):
        kind = kinds[index % len(kinds)]
        # scenes run one at a time; each one fans out over the pool itself
        try:
            scene, samples = await sync_to_async(_build_scene, index, kind)
        except SceneGenerationError as e:
            LOGGER.error(f"Scene {index} ({kind}) failed: {e}")
            failures.append({"index": index, "kind": kind, "error": str(e)})
            continue
        directory = scene_dir(out, index)
        await write_scene(directory, scene, samples)
        scenes.append(
            {
                "index": index,
                "directory": ospath.basename(directory),
                "kind": kind,
                "grasp": scene.grasp,
                "samples": len(samples),
            }
        )
        LOGGER.info(
            f"{PipelineStatus.STATUS_GENERATE} {get_progress_bar_string(index + 1, count)}"
            f" scene {index} {kind}/{scene.grasp}"
        )

    await write_json(
        ospath.join(out, "manifest.json"),
        {
            "count": count,
            "kinds": kinds,
            "seed": Config.SEED,
            "near_samples": near,
            "uniform_samples": uniform,
            "uniform_bounds": Config.bounds().tolist(),
            "uniform_region": "wrist box within the camera frustum",
            "scenes": scenes,
            "failures": failures,
        },
    )
    await write_json(ospath.join(out, "config.json"), Config.get_all())
    LOGGER.info(f"Generated {len(scenes)} scenes in {get_readable_time(time() - start)}")
    if failures:
        raise SceneGenerationError(f"{len(failures)} of {count} scenes failed")
