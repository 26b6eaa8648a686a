"""Zero-shot panoptic segmentation on synthetic frozen-backbone queries.

Stage 1 aligns projected vision queries with category embeddings, stage 2
trains a conditional VAE that generates queries from embeddings, and stage 3
finetunes the projector on real seen plus generated unseen queries.
"""
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .datagen import DatasetSpec, SyntheticDataset, generate_dataset, load_dataset, save_dataset
from .metrics import MetricsReport, harmonic
from .pipeline import PipelineResult, evaluate, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DatasetSpec", "MetricsReport", "PipelineResult", "RunConfig", "SyntheticDataset",
    "apply_overrides", "evaluate", "generate_dataset", "harmonic", "load_config", "load_dataset",
    "run_pipeline", "save_dataset",
]
