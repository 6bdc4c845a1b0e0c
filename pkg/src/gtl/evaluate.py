"""Top-1 accuracy, per-modality breakdowns, and episode aggregation.

The mixed accuracy is micro-averaged (total correct / total queries), so
it is always the query-count-weighted combination of the per-modality
accuracies. Modalities with no queries are omitted from the map rather
than reported as zero.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field


@dataclass
class EvalResult:
    """Scored predictions of one episode, kept as raw counts."""

    correct_by_modality: dict[int, int]
    total_by_modality: dict[int, int]
    episode_count: int = 1

    @property
    def n_queries(self) -> int:
        return sum(self.total_by_modality.values())

    @property
    def acc_mixed(self) -> float:
        return sum(self.correct_by_modality.values()) / self.n_queries

    @property
    def acc_per_modality(self) -> dict[int, float]:
        return {
            m: self.correct_by_modality[m] / n
            for m, n in sorted(self.total_by_modality.items())
        }


@dataclass
class EpisodeSummary:
    """Mean/std/normal-approximation 95% CI of acc_mixed over episodes,
    plus per-modality means over the episodes that contain the modality."""

    mean: float
    std: float
    ci95: float
    episode_count: int
    per_modality_mean: dict[int, float] = field(default_factory=dict)


def top1_accuracy(preds, labels, modalities) -> EvalResult:
    """Score one episode's predictions; inputs are equal-length sequences."""
    preds = list(preds)
    labels = list(labels)
    modalities = list(modalities)
    if not len(preds) == len(labels) == len(modalities):
        raise ValueError(
            f"length mismatch: preds={len(preds)} labels={len(labels)} "
            f"modalities={len(modalities)}"
        )
    correct: dict[int, int] = {}
    total: dict[int, int] = {}
    for p, y, m in zip(preds, labels, modalities):
        m = int(m)
        total[m] = total.get(m, 0) + 1
        correct[m] = correct.get(m, 0) + int(p == y)
    return EvalResult(correct_by_modality=correct, total_by_modality=total)


def aggregate_episodes(results: list[EvalResult]) -> EpisodeSummary:
    """Arithmetic mean over episodes with a normal-approximation CI."""
    if not results:
        raise ValueError("aggregate_episodes needs at least one result")
    accs = [r.acc_mixed for r in results]
    n = len(accs)
    mean = sum(accs) / n
    std = math.sqrt(sum((a - mean) ** 2 for a in accs) / (n - 1)) if n > 1 else 0.0
    ci95 = 1.96 * std / math.sqrt(n)
    modalities = sorted({m for r in results for m in r.total_by_modality})
    per_modality = {}
    for m in modalities:
        vals = [r.acc_per_modality[m] for r in results if m in r.total_by_modality]
        per_modality[m] = sum(vals) / len(vals)
    return EpisodeSummary(mean=mean, std=std, ci95=ci95, episode_count=n,
                          per_modality_mean=per_modality)


# ---------------------------------------------------------------------------
# result emission
# ---------------------------------------------------------------------------

def results_csv(rows: list[dict]) -> str:
    """Render metric rows (setting, k, acc_mixed, acc_m<i>..., std, ci95)
    as CSV text with a stable column order and fixed float format."""
    modalities = sorted({m for row in rows for m in row.get("per_modality", {})})
    header = ["setting", "k", "acc_mixed"] + [f"acc_m{m}" for m in modalities]
    header += ["std", "ci95"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        out = [row["setting"], row["k"], f"{row['acc_mixed']:.6f}"]
        for m in modalities:
            v = row.get("per_modality", {}).get(m)
            out.append("" if v is None else f"{v:.6f}")
        out.append(f"{row['std']:.6f}")
        out.append(f"{row['ci95']:.6f}")
        writer.writerow(out)
    return buf.getvalue()


def summary_row(setting: str, k: int, summary: EpisodeSummary) -> dict:
    return {
        "setting": setting,
        "k": k,
        "acc_mixed": summary.mean,
        "per_modality": dict(summary.per_modality_mean),
        "std": summary.std,
        "ci95": summary.ci95,
        "episode_count": summary.episode_count,
    }


def results_json(rows: list[dict]) -> str:
    serializable = []
    for row in rows:
        out = dict(row)
        out["per_modality"] = {str(m): v for m, v in row.get("per_modality", {}).items()}
        serializable.append(out)
    return json.dumps(serializable, indent=2, sort_keys=True) + "\n"
