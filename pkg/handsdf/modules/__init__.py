from .evaluate import evaluate_mesh
from .export import export_mesh_file
from .gen_data import gen_dataset
from .reconstruct import reconstruct_scene
from .refine import refine_scene
from .train import train_decoder

__all__ = [
    "evaluate_mesh",
    "export_mesh_file",
    "gen_dataset",
    "reconstruct_scene",
    "refine_scene",
    "train_decoder",
]
