import json

import numpy as np
import pytest

from conftest import quick_dims, quick_train_cfg
from gtl.data import (
    FeatureRecord,
    episode_records,
    labels_of,
    modalities_of,
    sample_episode,
    synth_generate,
)
from gtl.model import GROUP_CLASSIFIER, GROUP_GENERATOR
from gtl.rng import derive_rng
from gtl.train import (
    EpochRecord,
    PhaseReport,
    TrainConfig,
    adapt_phase2,
    evaluate_protocol,
    predict,
    run_episode,
    train_phase1,
)


def sample_support(split, k=5, seed=0, stream=1):
    episode = sample_episode(split.novel, "all_way", k, derive_rng(seed, stream))
    return episode_records(split.novel, episode)


# ---------------------------------------------------------------------------
# phase 1
# ---------------------------------------------------------------------------

def test_phase1_loss_decreases(quick_phase1):
    _, report, _ = quick_phase1
    repr_curve = report.stage_records("representation")
    assert repr_curve[-1].loss_total < repr_curve[0].loss_total
    assert all(r.loss_kl >= 0.0 for r in repr_curve)


def test_phase1_curve_lengths(quick_phase1):
    _, report, cfg = quick_phase1
    assert len(report.stage_records("representation")) == cfg.epochs
    assert len(report.stage_records("classifier")) == cfg.epochs


def test_phase1_lr_schedule(quick_split):
    split, _ = quick_split
    cfg = quick_train_cfg(epochs=32)  # decay after epoch 30 by default
    _, report = train_phase1(split.base, cfg, derive_rng(0, 0))
    repr_curve = report.stage_records("representation")
    assert repr_curve[29].epoch == 30 and repr_curve[29].lr == pytest.approx(1e-3)
    assert repr_curve[30].epoch == 31 and repr_curve[30].lr == pytest.approx(1e-4)
    cls_curve = report.stage_records("classifier")
    assert cls_curve[0].lr == pytest.approx(cfg.lr_cls)
    assert cls_curve[31].lr == pytest.approx(cfg.lr_cls * 0.1)


def test_phase1_deterministic(quick_split, quick_phase1):
    split, _ = quick_split
    _, report_first, cfg = quick_phase1
    params, report = train_phase1(split.base, cfg, derive_rng(0, 0))
    assert report.checksum == report_first.checksum
    assert params.checksum() == report_first.checksum


def test_phase1_rejects_multimodal_base(quick_split):
    split, _ = quick_split
    with pytest.raises(ValueError, match="unimodal"):
        train_phase1(split.novel, quick_train_cfg(), derive_rng(0, 0))


def test_phase1_rejects_dim_mismatch(quick_split):
    split, _ = quick_split
    cfg = quick_train_cfg(dims=quick_dims(Dx=63))
    with pytest.raises(ValueError, match="Dx=63"):
        train_phase1(split.base, cfg, derive_rng(0, 0))


def test_phase1_records_base_labels(quick_phase1):
    params, _, _ = quick_phase1
    assert params.base_labels == list(range(6))
    assert params.class_labels == list(range(6))


def test_phase1_no_z_trains_classifier_only(quick_split):
    split, _ = quick_split
    cfg = quick_train_cfg(mode="no_z")
    params, report = train_phase1(split.base, cfg, derive_rng(0, 0))
    assert report.stage_records("representation") == []
    assert len(report.stage_records("classifier")) == cfg.epochs
    # classifier reads raw features
    assert params.group(GROUP_CLASSIFIER).weights["hidden_w"].shape[0] == 64


def test_phase1_report_jsonl_fields(quick_phase1):
    _, report, _ = quick_phase1
    lines = report.to_jsonl().splitlines()
    first = json.loads(lines[0])
    assert set(first) == {"stage", "epoch", "loss_total", "loss_recon",
                          "loss_kl", "lr"}
    last = json.loads(lines[-1])
    assert set(last) == {"stage", "epoch", "loss_total", "loss_ce", "lr"}


# ---------------------------------------------------------------------------
# phase 2
# ---------------------------------------------------------------------------

def test_phase2_generator_frozen_bitwise(quick_split, quick_phase1):
    split, _ = quick_split
    params, _, cfg = quick_phase1
    before = params.group_checksum(GROUP_GENERATOR)
    support, _ = sample_support(split)
    adapted, _ = adapt_phase2(params, support, cfg, derive_rng(0, 1))
    assert adapted.group_checksum(GROUP_GENERATOR) == before
    assert adapted.group(GROUP_GENERATOR).frozen
    # the input params are untouched too
    assert params.group_checksum(GROUP_GENERATOR) == before
    assert not params.group(GROUP_GENERATOR).frozen


def test_phase2_gtl_ft_updates_generator(quick_split, quick_phase1):
    split, _ = quick_split
    params, _, _ = quick_phase1
    before = params.group_checksum(GROUP_GENERATOR)
    support, _ = sample_support(split)
    cfg = quick_train_cfg(mode="gtl_ft")
    adapted, _ = adapt_phase2(params, support, cfg, derive_rng(0, 1))
    assert adapted.group_checksum(GROUP_GENERATOR) != before


def test_phase2_gtl_t_ignores_phase1(quick_split, quick_phase1):
    split, _ = quick_split
    params, _, _ = quick_phase1
    support, _ = sample_support(split)
    cfg = quick_train_cfg(mode="gtl_t")
    from_none, _ = adapt_phase2(None, support, cfg, derive_rng(0, 1))
    from_params, _ = adapt_phase2(params, support, cfg, derive_rng(0, 1))
    assert from_none.checksum() == from_params.checksum()
    assert from_none.group_checksum(GROUP_GENERATOR) != params.group_checksum(
        GROUP_GENERATOR)


def test_phase2_rejects_base_label_overlap(quick_split, quick_phase1):
    split, _ = quick_split
    params, _, cfg = quick_phase1
    bad = split.base[:8]  # base classes served as "support"
    with pytest.raises(ValueError, match="overlap"):
        adapt_phase2(params, bad, cfg, derive_rng(0, 1))


def test_phase2_rejects_missing_params(quick_split):
    split, _ = quick_split
    support, _ = sample_support(split)
    with pytest.raises(ValueError, match="none given"):
        adapt_phase2(None, support, quick_train_cfg(), derive_rng(0, 1))


def test_phase2_rejects_ablation_mismatch(quick_split, quick_phase1):
    split, _ = quick_split
    params, _, _ = quick_phase1
    support, _ = sample_support(split)
    cfg = quick_train_cfg(mode="no_z")
    with pytest.raises(ValueError, match="ablation"):
        adapt_phase2(params, support, cfg, derive_rng(0, 1))


def test_phase2_no_zm_disturbance_untouched(quick_split):
    split, _ = quick_split
    cfg = quick_train_cfg(mode="no_zm")
    params, _ = train_phase1(split.base, cfg, derive_rng(0, 0))
    before_dist = params.group_checksum("disturbance")
    before_agg = params.group_checksum("aggregator")
    support, _ = sample_support(split)
    adapted, _ = adapt_phase2(params, support, cfg, derive_rng(0, 1))
    assert adapted.group_checksum("disturbance") == before_dist
    assert adapted.group_checksum("aggregator") == before_agg


def test_classifier_reinit_independent_of_base_classifier(quick_split,
                                                          quick_phase1):
    split, _ = quick_split
    params, _, cfg = quick_phase1
    support, _ = sample_support(split)
    adapted_a, _ = adapt_phase2(params, support, cfg, derive_rng(0, 1))

    perturbed = params.copy()
    for w in perturbed.group(GROUP_CLASSIFIER).weights.values():
        w += 123.0
    adapted_b, _ = adapt_phase2(perturbed, support, cfg, derive_rng(0, 1))
    ca = adapted_a.group(GROUP_CLASSIFIER)
    cb = adapted_b.group(GROUP_CLASSIFIER)
    for name in ca.weights:
        assert ca.weights[name].tobytes() == cb.weights[name].tobytes()


def test_phase2_single_record_support_uses_eval_stats(quick_split, quick_phase1):
    split, _ = quick_split
    params, _, cfg = quick_phase1
    one = [r for r in split.novel if r.label == 6][:1]
    adapted, report = adapt_phase2(params, one, cfg, derive_rng(0, 1))
    assert len(report.stage_records("representation")) == cfg.epochs
    assert predict(adapted, one)[0] == 6


# ---------------------------------------------------------------------------
# predict + episodes
# ---------------------------------------------------------------------------

def test_predict_single_class_support(quick_split, quick_phase1):
    split, _ = quick_split
    params, _, cfg = quick_phase1
    support = [r for r in split.novel if r.label == 7][:5]
    adapted, _ = adapt_phase2(params, support, cfg, derive_rng(0, 1))
    queries = split.novel[:20]
    assert (predict(adapted, queries) == 7).all()


def test_predict_deterministic(quick_split, quick_phase1):
    split, _ = quick_split
    params, _, cfg = quick_phase1
    support, query = sample_support(split)
    adapted, _ = adapt_phase2(params, support, cfg, derive_rng(0, 1))
    np.testing.assert_array_equal(predict(adapted, query), predict(adapted, query))


def test_predict_separated_synthetic_above_090(quick_split, quick_phase1):
    split, _ = quick_split
    params, _, cfg = quick_phase1
    results = evaluate_protocol(params, split.novel, "all_way", 5, cfg, 2)
    mean = sum(r.acc_mixed for r in results) / len(results)
    assert mean > 0.9


def test_predict_rejects_unlabeled_params(quick_split, quick_phase1):
    split, _ = quick_split
    params, _, _ = quick_phase1
    bare = params.copy()
    bare.class_labels = []
    with pytest.raises(ValueError, match="label"):
        predict(bare, split.novel[:2])


def test_run_episode_reproducible(quick_split, quick_phase1):
    split, _ = quick_split
    params, _, cfg = quick_phase1
    r1, ep1, _ = run_episode(params, split.novel, "n_way", 1, cfg,
                             derive_rng(0, 5), n_way=3)
    r2, ep2, _ = run_episode(params, split.novel, "n_way", 1, cfg,
                             derive_rng(0, 5), n_way=3)
    assert ep1.support_ids == ep2.support_ids
    assert r1.acc_mixed == r2.acc_mixed
    assert ep1.way == 3 and ep1.shots == 1


def test_evaluate_protocol_stream_isolation(quick_split, quick_phase1):
    split, _ = quick_split
    params, _, cfg = quick_phase1
    both = evaluate_protocol(params, split.novel, "n_way", 1, cfg, 2, n_way=3)
    second_only = evaluate_protocol(params, split.novel, "n_way", 1, cfg, 1,
                                    n_way=3, stream_base=2)
    assert both[1].correct_by_modality == second_only[0].correct_by_modality


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError, match="mode"):
        TrainConfig(mode="bogus").validate()
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValueError, match="rates"):
        TrainConfig(lr_repr=0.0).validate()


def test_epoch_record_json_shape():
    rec = EpochRecord(stage="representation", epoch=3, loss_total=1.5, lr=1e-3,
                      loss_recon=1.0, loss_kl=0.5)
    assert rec.to_json_dict() == {"stage": "representation", "epoch": 3,
                                  "loss_total": 1.5, "loss_recon": 1.0,
                                  "loss_kl": 0.5, "lr": 1e-3}


def test_phase_report_jsonl_round_trip():
    rec = EpochRecord(stage="classifier", epoch=1, loss_total=2.0, lr=1e-4,
                      loss_ce=2.0)
    report = PhaseReport(records=[rec], wall_clock=0.1, checksum="ab")
    decoded = json.loads(report.to_jsonl())
    assert decoded["loss_ce"] == 2.0 and "loss_recon" not in decoded
