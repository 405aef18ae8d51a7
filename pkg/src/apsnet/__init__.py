"""Seed classification with frequency-domain size priors and a four-head progressive decoder."""
from .dataset import (
    DatasetManifest, SynthConfig, build_manifest, class_histogram, load_batch, long_tail_config, read_manifest,
    size_only_config, synth_generate,
)
from .evaluation import MetricsReport, confusion, metrics, per_class_report
from .explainability import EmbeddingTable, Heatmap, export_features, grad_cam, project_2d
from .losses import ContrastiveConfig, LossBreakdown, composite, cross_entropy, pair_masks, supervised_contrastive
from .model import APSNet, BackboneSpec, HeadOutputs, ModelConfig, build_model, fuse_predictions
from .prior import PRIOR_KINDS, PriorMap, corpus_entropy_report, fft_split, make_prior, shannon_entropy
from .training import TrainConfig, TrainingRun, four_stage_step, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
