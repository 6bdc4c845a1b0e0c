"""Support/query episode sampling under both evaluation protocols.

Shows what one episode looks like, then hammers the sampler to exhibit
its invariants: support/query disjointness, exactly k support records
per class, full label coverage, and uniform class selection in the
5-way protocol.

Run from the repository root:  python3 demos/episode_sampling.py
"""

from collections import Counter

from scipy import stats

from gtl.data import SynthConfig, episode_records, sample_episode, synth_generate
from gtl.rng import derive_rng

split, _ = synth_generate(SynthConfig(seed=0))
novel = split.novel
classes = sorted({r.label for r in novel})
print(f"novel corpus: {len(novel)} records, {len(classes)} classes, "
      f"{len({r.modality for r in novel})} modalities")

episode = sample_episode(novel, "all_way", k=5, rng=derive_rng(0, 1))
support, query = episode_records(novel, episode)
print(f"\nall-way-5-shot episode: way={episode.way} "
      f"support={len(support)} query={len(query)}")
by_modality = Counter(r.modality for r in support)
print(f"support modality mix: {dict(by_modality)} "
      "(drawn uniformly per class, no modality quota)")

episode5 = sample_episode(novel, "n_way", k=1, rng=derive_rng(0, 2), n_way=5)
print(f"5-way-1-shot episode: way={episode5.way} "
      f"support={len(episode5.support_ids)} query={len(episode5.query_ids)}")

# invariant sweep
n_episodes = 2000
selection = Counter()
violations = 0
for i in range(n_episodes):
    protocol = "n_way" if i % 2 else "all_way"
    k = 1 if i % 4 < 2 else 5
    ep = sample_episode(novel, protocol, k, derive_rng(0, 10 + i), n_way=5)
    s_records, q_records = episode_records(novel, ep)
    s_labels = [r.label for r in s_records]
    per_class = Counter(s_labels)
    if set(ep.support_ids) & set(ep.query_ids):
        violations += 1
    if any(c != k for c in per_class.values()):
        violations += 1
    if not {r.label for r in q_records} <= set(s_labels):
        violations += 1
    if protocol == "n_way":
        selection.update(per_class.keys())

print(f"\n{n_episodes} sampled episodes: {violations} invariant violations")
counts = [selection[y] for y in classes]
chi2, p = stats.chisquare(counts)
print(f"5-way class-selection counts: {counts}")
print(f"uniformity chi-square: p = {p:.3f} (not rejected at alpha 0.01: {p > 0.01})")
