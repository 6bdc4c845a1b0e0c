"""Command-line interface.

Commands:
    synth       write synthetic base/novel feature files + true latents
    train-base  phase-1 training on a base feature file
    adapt       phase-2 adaptation on one sampled episode
    eval        episode evaluation (adapt + predict + score, aggregated)
    sweep-d     repeat train/adapt/eval across latent-domain counts
    gradcheck   finite-difference check of the full model's gradients

Global flags: --config PATH, --seed U64, --out DIR. Exit codes: 0 on
success, 1 when a check fails, 2 on usage or validation errors.

Every command is deterministic given (config, seed): rerunning writes
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import (
    FeatureFormatError,
    FeatureRecord,
    episode_records,
    load_features,
    sample_episode,
    save_features,
    stack_features,
    synth_generate,
    train_val_test_split,
)
from .evaluate import aggregate_episodes, results_csv, results_json, summary_row
from .model import (
    GtlModel,
    ModelDims,
    ce_loss,
    elbo_loss,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .nn import gradient_check
from .rng import derive_rng, make_rng
from .train import adapt_phase2, evaluate_protocol, run_episode, train_phase1

# stream ids reserved per stage so commands draw independent randomness
STREAM_TRAIN = 0
STREAM_EPISODE_BASE = 1


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_label_names(records: list[FeatureRecord], path: Path) -> None:
    names = {str(r.label): f"class_{r.label}" for r in records}
    path.write_text(json.dumps(names, indent=2, sort_keys=True) + "\n")


def cmd_synth(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    split, truth = synth_generate(cfg.synth)
    save_features(split.base, out / "base.gtlf")
    save_features(split.novel, out / "novel.gtlf")
    _write_label_names(split.base, out / "base.gtlf.labels.json")
    _write_label_names(split.novel, out / "novel.gtlf.labels.json")

    def latent_records(records):
        return [
            FeatureRecord(
                id=r.id,
                feature=np.concatenate([truth.z_c[r.id], truth.z_m[r.id]])
                .astype(np.float32),
                label=r.label,
                modality=r.modality,
            )
            for r in records
        ]

    save_features(latent_records(split.base), out / "latents_base.gtlf")
    save_features(latent_records(split.novel), out / "latents_novel.gtlf")
    manifest = {"synth": asdict(cfg.synth),
                "records": {"base": len(split.base), "novel": len(split.novel)}}
    (out / "synth_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"synth: wrote {len(split.base)} base and {len(split.novel)} novel "
          f"records to {out}")
    return 0


def _load_base(cfg: RunConfig):
    path = cfg.base_features or str(Path(cfg.out_dir) / "base.gtlf")
    records = load_features(path)
    fractions = cfg.base_split_fractions()
    if fractions is not None:
        records, _, _ = train_val_test_split(records, make_rng(cfg.seed), fractions)
    return records


def _load_novel(cfg: RunConfig):
    path = cfg.novel_features or str(Path(cfg.out_dir) / "novel.gtlf")
    return load_features(path)


def cmd_train_base(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    records = _load_base(cfg)
    params, report = train_phase1(records, cfg.train, derive_rng(cfg.seed, STREAM_TRAIN))
    save_checkpoint(params, out / "phase1.gtlp")
    (out / "phase1_report.jsonl").write_text(report.to_jsonl())
    print(f"train-base: {len(records)} records, checksum {report.checksum[:16]}, "
          f"wrote {out / 'phase1.gtlp'}")
    return 0


def _load_params_for_mode(cfg: RunConfig):
    if cfg.train.mode == "gtl_t":
        return None
    path = cfg.checkpoint or str(Path(cfg.out_dir) / "phase1.gtlp")
    return load_checkpoint(path)


def cmd_adapt(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    params = _load_params_for_mode(cfg)
    novel = _load_novel(cfg)
    rng = derive_rng(cfg.seed, STREAM_EPISODE_BASE)
    episode = sample_episode(novel, cfg.protocol, cfg.k, rng, n_way=cfg.n_way)
    support, _ = episode_records(novel, episode)
    adapted, report = adapt_phase2(params, support, cfg.train, rng)
    save_checkpoint(adapted, out / "adapted.gtlp")
    (out / "phase2_report.jsonl").write_text(report.to_jsonl())
    (out / "episode.json").write_text(json.dumps(
        {"way": episode.way, "shots": episode.shots,
         "support_ids": episode.support_ids, "query_ids": episode.query_ids},
        sort_keys=True) + "\n")
    print(f"adapt: mode {cfg.train.mode}, {episode.way}-way {episode.shots}-shot, "
          f"wrote {out / 'adapted.gtlp'}")
    return 0


def _dump_latents(cfg: RunConfig, params, novel, out: Path) -> None:
    model = GtlModel(params, dropout_rate=0.0)
    x = stack_features(novel)
    sample = model.encode(x, "eval")
    u_hat, _ = model.estimate_disturbance(sample.hidden)
    mu_c = sample.mu[:, : params.dims.Nc]
    for name, values in (("mu_c", mu_c), ("u_hat", u_hat)):
        records = [
            FeatureRecord(id=r.id, feature=values[i].astype(np.float32),
                          label=r.label, modality=r.modality)
            for i, r in enumerate(novel)
        ]
        save_features(records, out / f"latents_{name}.gtlf")


def cmd_eval(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    params = _load_params_for_mode(cfg)
    novel = _load_novel(cfg)
    results = evaluate_protocol(params, novel, cfg.protocol, cfg.k, cfg.train,
                                cfg.episodes, n_way=cfg.n_way,
                                stream_base=STREAM_EPISODE_BASE)
    summary = aggregate_episodes(results)
    setting = f"{cfg.protocol}-{cfg.train.mode}"
    rows = [summary_row(setting, cfg.k, summary)]
    (out / "metrics.csv").write_text(results_csv(rows))
    (out / "metrics.json").write_text(results_json(rows))
    if cfg.dump_latents:
        # one extra adapted model on the first episode stream for the dumps
        _, _, adapted = run_episode(params, novel, cfg.protocol, cfg.k, cfg.train,
                                    derive_rng(cfg.seed, STREAM_EPISODE_BASE),
                                    n_way=cfg.n_way)
        _dump_latents(cfg, adapted, novel, out)
    print(f"eval: {setting} k={cfg.k} episodes={summary.episode_count} "
          f"acc={summary.mean:.4f} ci95={summary.ci95:.4f}")
    return 0


def cmd_sweep_d(cfg: RunConfig, d_list: list[int]) -> int:
    if not d_list:
        raise ValueError("sweep-d needs a non-empty d list")
    out = _out_dir(cfg)
    base = _load_base(cfg)
    novel = _load_novel(cfg)
    rows = []
    for d in d_list:
        dims = replace(cfg.dims, d=d)
        train_cfg = replace(cfg.train, dims=dims)
        params = None
        if cfg.train.mode != "gtl_t":
            params, _ = train_phase1(base, train_cfg,
                                     derive_rng(cfg.seed, STREAM_TRAIN))
        for protocol in ("all_way", "n_way"):
            results = evaluate_protocol(params, novel, protocol, cfg.k, train_cfg,
                                        cfg.episodes, n_way=cfg.n_way,
                                        stream_base=STREAM_EPISODE_BASE)
            summary = aggregate_episodes(results)
            rows.append(summary_row(f"d={d}-{protocol}", cfg.k, summary))
    (out / "sweep_d.csv").write_text(results_csv(rows))
    print(f"sweep-d: wrote {len(rows)} rows to {out / 'sweep_d.csv'}")
    return 0


GRADCHECK_DIMS = ModelDims(Dx=32, Nc=8, Nm=4, H=16, d=4, C=5)


def cmd_gradcheck(cfg: RunConfig, tol: float, step: float, batch: int,
                  freeze_generator: bool, dims: ModelDims | None = None) -> int:
    dims = replace(dims if dims is not None else GRADCHECK_DIMS)
    if dims.C <= 0:
        dims.C = 5
    rng = make_rng(cfg.seed)
    params = init_params(dims, rng, ablation="full")
    if freeze_generator:
        params.group("generator").frozen = True
    model = GtlModel(params, dropout_rate=0.0)  # check runs without dropout
    x = rng.normal(size=(batch, dims.Dx))
    labels = rng.integers(0, dims.C, size=batch)
    fixed_eps = rng.standard_normal((batch, dims.latent))

    def closure(compute_grads):
        if compute_grads:
            params.zero_grads()
            total, _ = model.loss_and_grads(x, labels=labels,
                                            losses=("elbo", "ce"),
                                            mode="train", fixed_eps=fixed_eps)
            return total
        state = model._forward(x, "train", fixed_eps=fixed_eps)
        loss, _ = elbo_loss(x, state.sample, state.x_hat)
        return loss + ce_loss(state.logits, labels)

    report = gradient_check(closure, params.groups.values(), tol=tol, step=step,
                            max_entries_per_tensor=8, rng=make_rng(cfg.seed + 1))
    print(report.summary())
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gtl",
        description="Cross-modal few-shot learning with a generative "
                    "transfer model.")
    parser.add_argument("--config", metavar="PATH", help="INI config file")
    parser.add_argument("--seed", type=int, help="run seed (default 0)")
    parser.add_argument("--out", metavar="DIR", help="output directory")

    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate synthetic feature files")

    p_train = sub.add_parser("train-base", help="phase-1 base training")
    p_adapt = sub.add_parser("adapt", help="phase-2 adaptation on one episode")
    p_eval = sub.add_parser("eval", help="episode evaluation")
    for p in (p_train, p_adapt, p_eval):
        p.add_argument("--mode", choices=("full", "gtl_t", "gtl_ft", "no_z",
                                          "no_zm"))
    for p in (p_adapt, p_eval):
        p.add_argument("--protocol", choices=("all-way", "5-way"))
        p.add_argument("--k", type=int)
        p.add_argument("--checkpoint", metavar="PATH")
        p.add_argument("--novel", metavar="PATH")
    p_train.add_argument("--base", metavar="PATH")
    p_train.add_argument("--base-split", metavar="F,F,F",
                         help="train/val/test carve of the base set; "
                              "phase 1 uses the train part")
    p_eval.add_argument("--episodes", type=int)
    p_eval.add_argument("--dump-latents", action="store_true", default=None)

    p_sweep = sub.add_parser("sweep-d", help="sweep the latent-domain count")
    p_sweep.add_argument("--d-list", required=True,
                         help="comma-separated counts, e.g. 1,4,16")
    p_sweep.add_argument("--episodes", type=int)
    p_sweep.add_argument("--k", type=int)

    p_check = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_check.add_argument("--tol", type=float, default=1e-4)
    p_check.add_argument("--step", type=float, default=1e-5)
    p_check.add_argument("--batch", type=int, default=8)
    p_check.add_argument("--freeze-generator", action="store_true")
    p_check.add_argument("--full-dims", action="store_true",
                         help="check at the configured dims instead of the "
                              "scaled-down defaults")
    return parser


def _collect_overrides(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.out is not None:
        overrides["run.out_dir"] = args.out
    mapping = {
        "mode": "train.mode",
        "protocol": "run.protocol",
        "k": "run.k",
        "episodes": "run.episodes",
        "checkpoint": "run.checkpoint",
        "novel": "run.novel_features",
        "base": "run.base_features",
        "base_split": "run.base_split",
        "dump_latents": "run.dump_latents",
    }
    for attr, dotted in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[dotted] = str(value)
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _collect_overrides(args))
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train-base":
            return cmd_train_base(cfg)
        if args.command == "adapt":
            return cmd_adapt(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "sweep-d":
            d_list = [int(v) for v in args.d_list.split(",") if v.strip()]
            return cmd_sweep_d(cfg, d_list)
        if args.command == "gradcheck":
            dims = cfg.dims if args.full_dims else None
            return cmd_gradcheck(cfg, tol=args.tol, step=args.step,
                                 batch=args.batch,
                                 freeze_generator=args.freeze_generator,
                                 dims=dims)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, ValueError, OSError, FeatureFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
