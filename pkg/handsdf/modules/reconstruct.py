from os import path as ospath

from handsdf import LOGGER
from handsdf.core.config_manager import Config
from handsdf.helper.ext_utils.exceptions import EmptyReconstructionError
from handsdf.helper.ext_utils.files_utils import encode_grid, ensure_dir, write_bytes, write_json
from handsdf.helper.ext_utils.status_utils import PipelineStatus
from handsdf.helper.ext_utils.task_utils import sync_to_async
from handsdf.helper.hand_utils.kinematics import pose_jitter
from handsdf.helper.scene_utils.data import read_scene, scene_conditioning
from handsdf.helper.sdf_utils.field import GridSdf
from handsdf.helper.sdf_utils.mesh import export_mesh, marching_cubes, transform_mesh
from handsdf.helper.sdf_utils.neural import NeuralSdf

from .train import load_checkpoint

JITTER_STREAM = 2


def evaluation_pose(scene):
    """Scene pose with the configured test-time articulation jitter."""
    return pose_jitter(scene.pose, Config.TEST_JITTER, [Config.SEED, JITTER_STREAM])


def extract(field, bounds, resolution):
    grid = GridSdf.bake(field, bounds, resolution)
    return grid, marching_cubes(grid, bounds, resolution)


async def reconstruct_scene(args):
    out = Config.OUTPUT_DIR
    await ensure_dir(out)
    _, decoder, _ = await load_checkpoint(Config.checkpoint_path())
    scene, _ = await read_scene(args.scene)
    pose = evaluation_pose(scene)
    context = scene_conditioning(scene, decoder.pyramid_levels, pose.articulation)
    field = NeuralSdf(decoder, context, scene.bounds)
    resolution = Config.EXTRACTION_RESOLUTION
    LOGGER.info(f"{PipelineStatus.STATUS_EXTRACT}: {args.scene} at {resolution}^3")
    grid, mesh = await sync_to_async(extract, field, scene.bounds, resolution)
    if args.frame == "camera":
        transform = scene.global_pose
        mesh = transform_mesh(
            mesh, transform.rotation, transform.translation + scene.camera.depth_offset
        )

    await write_bytes(ospath.join(out, "mesh.obj"), export_mesh(mesh, "obj"))
    await write_bytes(ospath.join(out, "grid.gsdf"), encode_grid(grid.values, grid.bounds))
    await write_json(
        ospath.join(out, "reconstruct.json"),
        {
            "scene": args.scene,
            "frame": args.frame,
            "resolution": resolution,
            "vertices": len(mesh.vertices),
            "triangles": len(mesh.triangles),
            "articulation": pose.articulation.tolist(),
        },
    )
    await write_json(ospath.join(out, "config.json"), Config.get_all())
    if mesh.is_empty:
        raise EmptyReconstructionError("decoded field has no zero crossing in the scene bounds")
    LOGGER.info(f"Extracted {len(mesh.triangles)} triangles")
