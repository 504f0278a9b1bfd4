from os import path as ospath

from handsdf import LOGGER
from handsdf.core.config_manager import Config
from handsdf.helper.ext_utils.files_utils import ensure_dir, write_bytes, write_json
from handsdf.helper.ext_utils.status_utils import PipelineStatus
from handsdf.helper.sdf_utils.mesh import export_mesh

from .evaluate import load_mesh


async def export_mesh_file(args):
    out = Config.OUTPUT_DIR
    await ensure_dir(out)
    mesh = await load_mesh(args.mesh)
    stem = ospath.splitext(ospath.basename(args.mesh))[0]
    target = ospath.join(out, f"{stem}.{args.mesh_format}")
    await write_bytes(target, export_mesh(mesh, args.mesh_format))
    await write_json(ospath.join(out, "config.json"), Config.get_all())
    LOGGER.info(f"{PipelineStatus.STATUS_EXPORT}: {args.mesh} -> {target}")
