"""Progressive amodal completion of occluded objects with diffusion inpainting backends."""

from .core import BBox, PipelineConfig, QuerySpec
from .pipeline import CompletionBundle, run_pipeline

__version__ = "0.1.0"

__all__ = ["BBox", "CompletionBundle", "PipelineConfig", "QuerySpec", "run_pipeline"]
