from .config import AppConfig, load_config, save_config
from .corrections import CorrectionsSet, read_corrections, write_corrections
from .engine import JobError, JobSpec, run_job
from .geometry import AnchorChain, PoseCorrection, apply_correction, interpolate_correction
from .latent_map import LatentMap, LatentMapConfig, build_map
from .normal_blocks import NoiseConfig, NormalBlock
from .pipeline import IterationPlan, PipelineParams, StripAdjustment, preprocess_job, run_schedule
from .segmentation import SegmentationConfig, estimate_normals, segment
from .strip import ScanStrip, read_strip, write_strip
from .trajectory_solver import SingularChainError, assemble, solve

__all__ = [
    "AppConfig",
    "load_config",
    "save_config",
    "CorrectionsSet",
    "read_corrections",
    "write_corrections",
    "JobError",
    "JobSpec",
    "run_job",
    "AnchorChain",
    "PoseCorrection",
    "apply_correction",
    "interpolate_correction",
    "LatentMap",
    "LatentMapConfig",
    "build_map",
    "NoiseConfig",
    "NormalBlock",
    "IterationPlan",
    "PipelineParams",
    "StripAdjustment",
    "preprocess_job",
    "run_schedule",
    "SegmentationConfig",
    "estimate_normals",
    "segment",
    "ScanStrip",
    "read_strip",
    "write_strip",
    "SingularChainError",
    "assemble",
    "solve",
]
