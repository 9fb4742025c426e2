"""Congestion level prediction with a mixture of adaptive graph learners and
confidence-weighted trend and periodic experts."""

from .baselines import CurrentTimeBaseline, HistoricalAverageBaseline
from .data import CorruptionSpec, FeatureTensor, TrafficDataset, TrafficNetwork, load_dataset, save_dataset
from .estimator import CPMoEClassifier
from .metrics import MetricReport, evaluate
from .model import VARIANTS, CPMoE, ModelConfig
from .synthetic import ScenarioConfig, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "CPMoE",
    "CPMoEClassifier",
    "CorruptionSpec",
    "CurrentTimeBaseline",
    "FeatureTensor",
    "HistoricalAverageBaseline",
    "MetricReport",
    "ModelConfig",
    "ScenarioConfig",
    "TrafficDataset",
    "TrafficNetwork",
    "VARIANTS",
    "evaluate",
    "generate_synthetic",
    "load_dataset",
    "save_dataset",
]
