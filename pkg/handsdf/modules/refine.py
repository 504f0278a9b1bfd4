from os import path as ospath

from handsdf import LOGGER
from handsdf.core.config_manager import Config
from handsdf.helper.ext_utils.files_utils import ensure_dir, write_bytes, write_json
from handsdf.helper.ext_utils.status_utils import PipelineStatus
from handsdf.helper.ext_utils.task_utils import sync_to_async
from handsdf.helper.eval_utils.metrics import end_point_error
from handsdf.helper.hand_utils.kinematics import hand_mesh
from handsdf.helper.hand_utils.refine import penetration_by_bone, refine_pose
from handsdf.helper.scene_utils.data import read_scene, scene_conditioning
from handsdf.helper.sdf_utils.mesh import export_mesh
from handsdf.helper.sdf_utils.neural import NeuralSdf

from .reconstruct import evaluation_pose
from .train import load_checkpoint


async def refine_scene(args):
    out = Config.OUTPUT_DIR
    await ensure_dir(out)
    scene, _ = await read_scene(args.scene)
    pose = evaluation_pose(scene)
    if args.checkpoint_path:
        _, decoder, _ = await load_checkpoint(args.checkpoint_path)
        context = scene_conditioning(scene, decoder.pyramid_levels, pose.articulation)
        field = NeuralSdf(decoder, context, scene.bounds)
        source = "decoder"
    else:
        field = scene.obj
        source = "analytic"
    cfg = Config.refine_config()
    LOGGER.info(f"{PipelineStatus.STATUS_REFINE}: {args.scene} against the {source} field")

    refined, report = await sync_to_async(refine_pose, field, scene.model, pose, cfg)
    inside = penetration_by_bone(scene.obj, scene.model, refined, cfg)
    summary = {
        "scene": args.scene,
        "field": source,
        "config": cfg.to_dict(),
        "epe_before": end_point_error(pose, scene.pose, scene.model),
        "epe_after": end_point_error(refined, scene.pose, scene.model),
        "penetrating_samples_by_bone": inside.tolist(),
        "pose": refined.to_array().tolist(),
        **report.to_dict(),
    }
    await write_json(ospath.join(out, "refine.json"), summary)
    await write_bytes(
        ospath.join(out, "hand_refined.obj"),
        export_mesh(hand_mesh(scene.model, refined.articulation), "obj"),
    )
    await write_json(ospath.join(out, "config.json"), Config.get_all())
    if report.intersection and report.initial_terms[0] > 0:
        reduction = 1.0 - report.intersection[-1] / report.initial_terms[0]
        LOGGER.info(f"Intersection penalty reduced by {100 * reduction:.1f}%")
    LOGGER.info(f"Refined over {report.steps} steps")
