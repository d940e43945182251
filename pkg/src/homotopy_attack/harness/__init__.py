"""Batch evaluation, image I/O and command line tooling."""

from .batch import BatchSummary, load_images, load_or_train_model, read_reports, run_batch, summarize, task_name
from .config import ConfigError, RunConfig, parse_sparsity
from .imaging import (
    ImageFormatError,
    build_tile_partition,
    position_map,
    read_image,
    read_png,
    render_position_map,
    write_png,
)

__all__ = [
    "BatchSummary",
    "ConfigError",
    "ImageFormatError",
    "RunConfig",
    "build_tile_partition",
    "load_images",
    "load_or_train_model",
    "parse_sparsity",
    "position_map",
    "read_image",
    "read_png",
    "read_reports",
    "render_position_map",
    "run_batch",
    "summarize",
    "task_name",
    "write_png",
]
