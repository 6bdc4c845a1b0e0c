"""Two-phase training, adaptation, and inference.

Phase 1 fits the representation (encoder, disturbance estimator,
aggregator, generator) on single-modality base features by minimizing
the reconstruction+KL objective, then trains the classifier on frozen
posterior-mean features. Phase 2 adapts to a novel multi-modal support
set with the generator frozen, re-initializes the classifier for the
novel label set, and trains it the same way.

Training modes:
    full    the procedure above.
    gtl_ft  phase 2 also fine-tunes the generator.
    gtl_t   phase 2 trains every module from scratch on the support set
            (phase-1 parameters are not used).
    no_zm   disturbance latent removed; generator decodes [z_c; zeros].
    no_z    no latent variables: both phases train only the classifier,
            reading the raw feature vectors.

Given the same seed and inputs, every function here is bit-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    FeatureRecord,
    episode_records,
    labels_of,
    modalities_of,
    sample_episode,
    stack_features,
)
from .evaluate import EvalResult, top1_accuracy
from .model import (
    GROUP_AGGREGATOR,
    GROUP_CLASSIFIER,
    GROUP_DISTURBANCE,
    GROUP_ENCODER,
    GROUP_GENERATOR,
    GtlModel,
    GtlParams,
    ModelDims,
    init_params,
    reinit_classifier,
)
from .nn import AdamState, adam_step
from .rng import derive_rng

MODES = ("full", "gtl_t", "gtl_ft", "no_z", "no_zm")

STAGE_REPR = "representation"
STAGE_CLS = "classifier"


@dataclass
class TrainConfig:
    epochs: int = 60
    lr_repr: float = 1e-3
    lr_cls: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 30
    weight_decay: float = 1e-4
    kl_weight: float = 1.0
    batch_size: int = 128
    seed: int = 0
    mode: str = "full"
    dropout: float = 0.5
    dims: ModelDims = field(default_factory=ModelDims)

    def validate(self) -> None:
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.lr_repr <= 0 or self.lr_cls <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")

    @property
    def ablation(self) -> str:
        return self.mode if self.mode in ("no_z", "no_zm") else "full"

    def lr_at(self, base_lr: float, epoch: int) -> float:
        """Schedule of the learning rate for a 1-based epoch index."""
        return base_lr * (self.lr_decay_factor if epoch > self.lr_decay_epoch else 1.0)


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    loss_total: float
    lr: float
    loss_recon: float | None = None
    loss_kl: float | None = None
    loss_ce: float | None = None

    def to_json_dict(self) -> dict:
        out = {"stage": self.stage, "epoch": self.epoch,
               "loss_total": self.loss_total}
        if self.loss_ce is None:
            out["loss_recon"] = self.loss_recon
            out["loss_kl"] = self.loss_kl
        else:
            out["loss_ce"] = self.loss_ce
        out["lr"] = self.lr
        return out


@dataclass
class PhaseReport:
    records: list[EpochRecord]
    wall_clock: float
    checksum: str

    def stage_records(self, stage: str) -> list[EpochRecord]:
        return [r for r in self.records if r.stage == stage]

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(r.to_json_dict(), sort_keys=True) + "\n" for r in self.records
        )


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; a trailing single-sample batch is folded
    into its predecessor so train-mode batchnorm always sees >= 2 rows
    (when the data allows)."""
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _adam_states(params: GtlParams, group_names, lr: float,
                 weight_decay: float) -> dict[str, AdamState]:
    return {
        name: AdamState.for_group(params.group(name), lr=lr,
                                  weight_decay=weight_decay)
        for name in group_names
        if not params.group(name).frozen
    }


def _run_stage(model: GtlModel, x: np.ndarray, cfg: TrainConfig, rng,
               stage: str, base_lr: float, losses, labels=None,
               mode: str = "train", group_names=()) -> list[EpochRecord]:
    """One training stage: ``cfg.epochs`` epochs of minibatch Adam over
    the requested loss terms, stepping only the named unfrozen groups."""
    params = model.params
    states = _adam_states(params, group_names, base_lr, cfg.weight_decay)
    records = []
    n = x.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(base_lr, epoch)
        for state in states.values():
            state.lr = lr
        sums: dict[str, float] = {}
        total_sum = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            params.zero_grads()
            total, parts = model.loss_and_grads(
                x[idx],
                labels=None if labels is None else labels[idx],
                losses=losses,
                kl_weight=cfg.kl_weight,
                mode=mode,
                rng=rng,
                bn_eval=len(idx) < 2,
            )
            for name, state in states.items():
                adam_step(params.group(name), state)
            w = len(idx)
            total_sum += total * w
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value * w
        if not np.isfinite(total_sum):
            raise FloatingPointError(
                f"non-finite {stage} loss at epoch {epoch}"
            )
        rec = EpochRecord(stage=stage, epoch=epoch, loss_total=total_sum / n, lr=lr)
        if "recon" in sums:
            rec.loss_recon = sums["recon"] / n
            rec.loss_kl = sums["kl"] / n
        if "ce" in sums:
            rec.loss_ce = sums["ce"] / n
        records.append(rec)
    return records


def _label_index(records: list[FeatureRecord]):
    labels = labels_of(records)
    classes = sorted(set(labels.tolist()))
    lookup = {y: i for i, y in enumerate(classes)}
    return classes, np.array([lookup[y] for y in labels.tolist()])


def _check_feature_dim(x: np.ndarray, dims: ModelDims) -> None:
    if x.shape[1] != dims.Dx:
        raise ValueError(
            f"feature dim {x.shape[1]} does not match model Dx={dims.Dx}"
        )


def _apply_phase2_freezes(params: GtlParams, mode: str) -> None:
    if mode in ("full", "no_zm"):
        params.group(GROUP_GENERATOR).frozen = True
    if mode == "no_zm":
        params.group(GROUP_DISTURBANCE).frozen = True
        params.group(GROUP_AGGREGATOR).frozen = True


def train_phase1(base_records: list[FeatureRecord], cfg: TrainConfig,
                 rng: np.random.Generator):
    """Base training: representation on the reconstruction objective, then
    the classifier on frozen features. Returns (params, report)."""
    cfg.validate()
    start = time.perf_counter()
    if not base_records:
        raise ValueError("phase 1 needs a non-empty base set")
    modalities = set(modalities_of(base_records).tolist())
    if len(modalities) > 1:
        raise ValueError(
            f"base data must be unimodal, found modalities {sorted(modalities)}"
        )
    x = stack_features(base_records)
    dims = replace(cfg.dims)
    _check_feature_dim(x, dims)
    classes, y = _label_index(base_records)
    dims.C = len(classes)

    params = init_params(dims, rng, ablation=cfg.ablation)
    params.class_labels = classes
    params.base_labels = classes
    if cfg.mode == "no_zm":
        params.group(GROUP_DISTURBANCE).frozen = True
        params.group(GROUP_AGGREGATOR).frozen = True
    model = GtlModel(params, dropout_rate=cfg.dropout)

    records = []
    if cfg.mode == "no_z":
        # no latent machinery: the classifier probes the features directly
        records += _run_stage(model, x, cfg, rng, STAGE_CLS, cfg.lr_cls,
                              losses=("ce",), labels=y, mode="eval",
                              group_names=(GROUP_CLASSIFIER,))
    else:
        records += _run_stage(model, x, cfg, rng, STAGE_REPR, cfg.lr_repr,
                              losses=("elbo",),
                              group_names=(GROUP_ENCODER, GROUP_DISTURBANCE,
                                           GROUP_AGGREGATOR, GROUP_GENERATOR))
        # classifier probes the frozen representation (posterior means)
        records += _run_stage(model, x, cfg, rng, STAGE_CLS, cfg.lr_cls,
                              losses=("ce",), labels=y, mode="eval",
                              group_names=(GROUP_CLASSIFIER,))

    report = PhaseReport(records=records, wall_clock=time.perf_counter() - start,
                         checksum=params.checksum())
    return params, report


def adapt_phase2(params: GtlParams | None, support_records: list[FeatureRecord],
                 cfg: TrainConfig, rng: np.random.Generator):
    """Adapt to a novel support set. Returns (adapted_params, report).

    ``params`` is the phase-1 result; mode gtl_t ignores it and trains
    from scratch. The generator stays bitwise frozen in modes full and
    no_zm; support labels must be disjoint from the recorded base labels.
    """
    cfg.validate()
    start = time.perf_counter()
    if not support_records:
        raise ValueError("phase 2 needs a non-empty support set")
    x = stack_features(support_records)
    classes, y = _label_index(support_records)

    if cfg.mode == "gtl_t":
        dims = replace(cfg.dims, C=len(classes))
        _check_feature_dim(x, dims)
        adapted = init_params(dims, rng, ablation="full")
    else:
        if params is None:
            raise ValueError(f"mode {cfg.mode!r} adapts phase-1 parameters; none given")
        if params.ablation != cfg.ablation:
            raise ValueError(
                f"checkpoint ablation {params.ablation!r} does not match "
                f"mode {cfg.mode!r}"
            )
        _check_feature_dim(x, params.dims)
        overlap = set(classes) & set(params.base_labels)
        if overlap:
            raise ValueError(
                f"support classes overlap the base label set: {sorted(overlap)}"
            )
        adapted = params.copy()
        _apply_phase2_freezes(adapted, cfg.mode)

    model = GtlModel(adapted, dropout_rate=cfg.dropout)
    records = []
    if cfg.mode != "no_z":
        records += _run_stage(model, x, cfg, rng, STAGE_REPR, cfg.lr_repr,
                              losses=("elbo",),
                              group_names=(GROUP_ENCODER, GROUP_DISTURBANCE,
                                           GROUP_AGGREGATOR, GROUP_GENERATOR))
    reinit_classifier(adapted, classes, rng)
    records += _run_stage(model, x, cfg, rng, STAGE_CLS, cfg.lr_cls,
                          losses=("ce",), labels=y, mode="eval",
                          group_names=(GROUP_CLASSIFIER,))

    report = PhaseReport(records=records, wall_clock=time.perf_counter() - start,
                         checksum=adapted.checksum())
    return adapted, report


def predict(params: GtlParams, queries) -> np.ndarray:
    """Deterministic labels for query features (records or a matrix):
    posterior-mean concept -> classifier -> argmax, mapped back to
    dataset label ids."""
    if not params.class_labels:
        raise ValueError("parameters carry no classifier label set")
    if isinstance(queries, np.ndarray):
        x = queries.astype(np.float64)
    else:
        x = stack_features(queries)
    _check_feature_dim(x, params.dims)
    model = GtlModel(params, dropout_rate=0.0)
    _, _, logits = model.forward_full(x, "eval")
    label_array = np.array(params.class_labels)
    return label_array[np.argmax(logits, axis=1)]


def run_episode(params: GtlParams | None, novel_records: list[FeatureRecord],
                protocol: str, k: int, cfg: TrainConfig,
                rng: np.random.Generator, n_way: int = 5):
    """Sample one episode, adapt on its support, score its queries.
    Returns (EvalResult, episode, adapted_params)."""
    episode = sample_episode(novel_records, protocol, k, rng, n_way=n_way)
    support, query = episode_records(novel_records, episode)
    adapted, _ = adapt_phase2(params, support, cfg, rng)
    preds = predict(adapted, query)
    result = top1_accuracy(preds, labels_of(query), modalities_of(query))
    return result, episode, adapted


def evaluate_protocol(params: GtlParams | None,
                      novel_records: list[FeatureRecord], protocol: str, k: int,
                      cfg: TrainConfig, n_episodes: int,
                      n_way: int = 5, stream_base: int = 1) -> list[EvalResult]:
    """Adapt/predict over ``n_episodes`` independently-seeded episodes.

    Episode i uses the stream derived from (cfg.seed, stream_base + i),
    so results are order-independent and reproducible.
    """
    results = []
    for i in range(n_episodes):
        rng = derive_rng(cfg.seed, stream_base + i)
        result, _, _ = run_episode(params, novel_records, protocol, k, cfg,
                                   rng, n_way=n_way)
        results.append(result)
    return results
