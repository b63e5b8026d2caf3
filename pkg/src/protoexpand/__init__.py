"""Prototype-guided diffusion for expanding small labelled datasets.

Everything runs on numpy: a tape autodiff, a small conditional diffusion
model, hierarchical prototypes, the guided sampler, and alignment and
downstream metrics. ``protoexpand.cli`` binds them into reproducible runs.
"""

from .config import ConfigError, RunConfig
from .datasets import DataFormatError, Dataset, mixture_dataset, shift_scenario
from .diffusion import Denoiser, DenoiserTraining, build_schedule, ddim_step, q_sample, predict_x0, train_denoiser
from .evaluation import MetricReport, downstream_eval, frechet_distance, mmd2
from .guidance import GuidanceConfig, apply_transform, energy, guide_step, guided_update, init_transform
from .pipeline import ExpansionModels, ExpansionResult, SamplerConfig, expand_dataset
from .prototypes import (
    ClassifierTraining,
    FeatureExtractor,
    PrototypeSet,
    ProvenanceError,
    agglomerative_cluster,
    build_prototypes,
    train_extractor,
)

__version__ = "0.1.0"

__all__ = [
    "ClassifierTraining", "ConfigError", "DataFormatError", "Dataset", "Denoiser", "DenoiserTraining",
    "ExpansionModels", "ExpansionResult", "FeatureExtractor", "GuidanceConfig", "MetricReport",
    "PrototypeSet", "ProvenanceError", "RunConfig", "SamplerConfig", "agglomerative_cluster",
    "apply_transform", "build_prototypes", "build_schedule", "ddim_step", "downstream_eval", "energy",
    "expand_dataset", "frechet_distance", "guide_step", "guided_update", "init_transform", "mixture_dataset",
    "mmd2", "predict_x0", "q_sample", "shift_scenario", "train_denoiser", "train_extractor",
]
