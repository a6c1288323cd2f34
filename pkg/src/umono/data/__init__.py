from .checkpoint import load_checkpoint, read_container, save_checkpoint, write_container
from .dataset import (
    RgbdSample,
    batch_arrays,
    export_depth_visual,
    load_dataset,
    read_manifest,
    write_manifest,
)
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

__all__ = [
    "RgbdSample",
    "batch_arrays",
    "export_depth_visual",
    "load_checkpoint",
    "load_dataset",
    "read_container",
    "read_manifest",
    "read_pgm",
    "read_ppm",
    "save_checkpoint",
    "write_container",
    "write_manifest",
    "write_pgm",
    "write_ppm",
]
