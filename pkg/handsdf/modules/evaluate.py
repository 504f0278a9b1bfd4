from os import path as ospath

from handsdf import LOGGER
from handsdf.core.config_manager import Config
from handsdf.helper.eval_utils.metrics import evaluate_meshes
from handsdf.helper.ext_utils.exceptions import FormatError
from handsdf.helper.ext_utils.files_utils import ensure_dir, read_bytes, write_json
from handsdf.helper.ext_utils.status_utils import PipelineStatus
from handsdf.helper.ext_utils.task_utils import sync_to_async
from handsdf.helper.sdf_utils.mesh import MESH_FORMATS, import_mesh


def mesh_format(path):
    fmt = ospath.splitext(path)[1].lstrip(".").lower()
    if fmt not in MESH_FORMATS:
        raise FormatError(f"{path}: unsupported mesh format {fmt!r}")
    return fmt


async def load_mesh(path):
    return import_mesh(await read_bytes(path), mesh_format(path))


async def evaluate_mesh(args):
    out = Config.OUTPUT_DIR
    await ensure_dir(out)
    pred = await load_mesh(args.pred)
    gt = await load_mesh(args.gt)
    hand = await load_mesh(args.hand) if args.hand else None
    LOGGER.info(f"{PipelineStatus.STATUS_EVALUATE}: {args.pred} against {args.gt}")
    report = await sync_to_async(
        evaluate_meshes,
        pred,
        gt,
        hand=hand,
        samples=Config.METRIC_SAMPLES,
        voxel=Config.VOXEL_SIZE,
        seed=Config.SEED,
    )
    await write_json(ospath.join(out, "metrics.json"), report.to_dict())
    await write_json(ospath.join(out, "config.json"), Config.get_all())
    LOGGER.info(
        f"chamfer {report.chamfer:.3f} mm^2 | F@5 {report.f5:.3f} | F@10 {report.f10:.3f}"
    )
