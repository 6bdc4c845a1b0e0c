"""Cross-modal transfer on the synthetic oracle benchmark.

Walks the full pipeline once per training mode and prints an
ablation-style table: the complete model against the variant without the
disturbance latent (no_zm), the plain feature probe (no_z), and training
from scratch on the support set alone (gtl_t).

Run from the repository root:  python3 demos/transfer_benchmark.py
"""

import time

import numpy as np

from gtl.config import load_config
from gtl.data import synth_generate
from gtl.evaluate import aggregate_episodes
from gtl.rng import derive_rng
from gtl.train import evaluate_protocol, train_phase1

SEEDS = (0, 1, 2)  # the acceptance suite runs 5 seeds; 3 keeps this quick
MODES = ("full", "no_zm", "no_z", "gtl_t")

start = time.time()
rows = []
for mode in MODES:
    accs, m0, m1 = [], [], []
    for seed in SEEDS:
        cfg = load_config("configs/benchmark.ini",
                          {"run.seed": str(seed), "train.mode": mode})
        split, _ = synth_generate(cfg.synth)

        # phase 1: representation + classifier on the unimodal base set
        # (gtl_t skips it and learns everything from the support set)
        params = None
        if mode != "gtl_t":
            params, _ = train_phase1(split.base, cfg.train, derive_rng(seed, 0))

        # phase 2 + inference over independently seeded episodes
        results = evaluate_protocol(params, split.novel, cfg.protocol, cfg.k,
                                    cfg.train, cfg.episodes)
        summary = aggregate_episodes(results)
        accs.append(summary.mean)
        m0.append(summary.per_modality_mean[0])
        m1.append(summary.per_modality_mean[1])
    rows.append((mode, np.mean(accs), np.mean(m0), np.mean(m1)))

print(f"\nall-way-5-shot accuracy, mean over {len(SEEDS)} seeds "
      f"({time.time() - start:.0f}s)\n")
print(f"{'mode':8s} {'mixed':>7s} {'mod 0':>7s} {'mod 1':>7s}")
for mode, acc, a0, a1 in rows:
    print(f"{mode:8s} {acc:7.3f} {a0:7.3f} {a1:7.3f}")

by_mode = {r[0]: r[1] for r in rows}
print("\nordering: full >= no_zm >= no_z :",
      by_mode["full"] >= by_mode["no_zm"] >= by_mode["no_z"])
print("ordering: full >= gtl_t         :", by_mode["full"] >= by_mode["gtl_t"])
