"""Online domain-incremental learning by adapting batch-norm statistics.

A frozen classifier learns each new domain by re-estimating only the running
mean/variance of its batch-norm layers from a handful of unlabeled samples,
using an adaptive momentum schedule, and keeps one set of statistics per
domain. Baseline protocols (base, feature extraction, fine-tuning, disjoint,
joint), a synthetic location-shift benchmark and the usual average accuracy /
average forgetting metrics are included.
"""

from .adaptation import (
    AdaptationConfig,
    DomainStatsRegistry,
    MomentumSchedule,
    adapt_domain,
    infer_with_task,
    momentum_sequence,
    predict_with_task,
    recompute_bn_statistics,
)
from .batchnorm import BNSnapshot, BNState, bn_forward_eval, bn_forward_train, bn_restore, bn_snapshot
from .data import DomainSpec, default_stream_specs, gen_synthetic_domain, load_feature_dir, select_adaptation_samples
from .metrics import AccuracyMatrix, accuracy, average_accuracy, average_forgetting
from .nn import Model, ModelConfig, reference_config
from .strategies import EvalReport, Experiment, Strategy, TrainConfig

__version__ = "0.1.0"
