"""Cross-modal few-shot learning with a generative transfer model.

A variational model disentangles a class-intrinsic latent concept from an
in-modality disturbance, trains on abundant single-modality features, and
adapts to novel multi-modal classes while keeping the generator frozen.
Everything runs on numpy with hand-written gradients; see the README for
the training pipeline and the command-line interface.
"""

from .data import (
    DatasetSplit,
    Episode,
    FeatureRecord,
    SynthConfig,
    load_features,
    sample_episode,
    save_features,
    split_base_novel,
    synth_generate,
)
from .evaluate import EvalResult, aggregate_episodes, top1_accuracy
from .model import (
    GtlModel,
    GtlParams,
    LatentSample,
    ModelDims,
    ce_loss,
    elbo_loss,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .rng import derive_rng, make_rng
from .train import (
    PhaseReport,
    TrainConfig,
    adapt_phase2,
    evaluate_protocol,
    predict,
    run_episode,
    train_phase1,
)

__all__ = [
    "DatasetSplit",
    "Episode",
    "EvalResult",
    "FeatureRecord",
    "GtlModel",
    "GtlParams",
    "LatentSample",
    "ModelDims",
    "PhaseReport",
    "SynthConfig",
    "TrainConfig",
    "adapt_phase2",
    "aggregate_episodes",
    "ce_loss",
    "derive_rng",
    "elbo_loss",
    "evaluate_protocol",
    "init_params",
    "load_checkpoint",
    "load_features",
    "make_rng",
    "predict",
    "run_episode",
    "sample_episode",
    "save_checkpoint",
    "save_features",
    "split_base_novel",
    "synth_generate",
    "top1_accuracy",
    "train_phase1",
]

__version__ = "0.1.0"
