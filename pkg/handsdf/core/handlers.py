from handsdf.helper.sdf_utils.mesh import MESH_FORMATS
from handsdf.modules import (
    evaluate_mesh,
    export_mesh_file,
    gen_dataset,
    reconstruct_scene,
    refine_scene,
    train_decoder,
)

from .commands import PipelineCommands

# upper-case destinations are configuration keys, applied over every other source
GLOBAL_ARGS = (
    (("--config",), {"dest": "config_file", "help": "JSON pipeline config"}),
    (("--seed",), {"dest": "SEED", "type": int, "help": "root seed"}),
    (("--threads",), {"dest": "THREADS", "type": int, "help": "worker threads, 0 = cpu count"}),
    (("--out",), {"dest": "OUTPUT_DIR", "help": "output directory"}),
)


def add_handlers(parser):
    command_args = {
        "gen_data": (
            gen_dataset,
            PipelineCommands.GenDataCommand,
            "Generate a synthetic grasp dataset",
            (
                (("--count",), {"dest": "SCENE_COUNT", "type": int}),
                (("--kinds",), {"dest": "SCENE_KINDS", "help": "e.g. 'sphere box'"}),
            ),
        ),
        "train": (
            train_decoder,
            PipelineCommands.TrainCommand,
            "Train the SDF decoder on a dataset",
            (
                (("--dataset",), {"dest": "DATASET_DIR"}),
                (("--checkpoint",), {"dest": "CHECKPOINT"}),
                (("--iterations",), {"dest": "ITERATIONS", "type": int}),
                (("--resume",), {"action": "store_true"}),
            ),
        ),
        "reconstruct": (
            reconstruct_scene,
            PipelineCommands.ReconstructCommand,
            "Extract the object surface of one scene",
            (
                (("--checkpoint",), {"dest": "CHECKPOINT"}),
                (("--scene",), {"required": True}),
                (("--resolution",), {"dest": "EXTRACTION_RESOLUTION", "type": int}),
                (("--frame",), {"choices": ("wrist", "camera"), "default": "wrist"}),
                (("--jitter",), {"dest": "TEST_JITTER", "type": float}),
            ),
        ),
        "refine": (
            refine_scene,
            PipelineCommands.RefineCommand,
            "Refine the hand articulation against the object field",
            (
                (("--scene",), {"required": True}),
                (("--checkpoint",), {"dest": "checkpoint_path"}),
                (("--jitter",), {"dest": "TEST_JITTER", "type": float}),
            ),
        ),
        "evaluate": (
            evaluate_mesh,
            PipelineCommands.EvalCommand,
            "Score a predicted mesh against the ground truth",
            (
                (("--pred",), {"required": True}),
                (("--gt",), {"required": True}),
                (("--hand",), {}),
            ),
        ),
        "export": (
            export_mesh_file,
            PipelineCommands.ExportCommand,
            "Convert a mesh between OBJ and PLY",
            (
                (("--mesh",), {"required": True}),
                (("--format",), {"dest": "mesh_format", "choices": MESH_FORMATS, "required": True}),
            ),
        ),
    }

    subparsers = parser.add_subparsers(dest="command", required=True)
    for handler, name, description, args in command_args.values():
        sub = subparsers.add_parser(name, help=description, description=description)
        for flags, kwargs in GLOBAL_ARGS + args:
            sub.add_argument(*flags, **kwargs)
        sub.set_defaults(handler=handler)
    return subparsers
