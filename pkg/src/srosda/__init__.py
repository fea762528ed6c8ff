"""Open-set domain adaptation with semantic attribute recovery.

Pipeline: progressive seen/unseen separation of the unlabeled target domain,
structure-preserving partial alignment, graph-based attribute propagation,
and joint visual-semantic classification, operating on precomputed feature
vectors at desk scale.
"""

from .dataio import (SourceDataset, SynthSpec, TargetDataset, TargetEval,
                     default_synth_spec, synth_generate)
from .evaluation import MetricsReport, compute_report, harmonic_mean
from .model import ModelParams, init_params
from .separation import PseudoState, run_progressive_separation
from .trainer import TrainConfig, train

__all__ = [
    "SourceDataset", "TargetDataset", "TargetEval", "SynthSpec",
    "default_synth_spec", "synth_generate", "MetricsReport", "compute_report",
    "harmonic_mean", "ModelParams", "init_params", "PseudoState",
    "run_progressive_separation", "TrainConfig", "train",
]

__version__ = "0.1.0"
