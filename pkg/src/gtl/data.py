"""Feature ingestion, base/novel splits, episode sampling, and the
synthetic generative-process oracle.

Feature file format (GTLF, little-endian, bit-exact round trip):

    magic    4 bytes  "GTLF"
    version  u32      1
    count    u32      number of records
    dim      u32      feature width
    records  count x [label u32][modality u8][f32 x dim]

An optional JSON sidecar (same path + ".labels.json") may map label ids
to names; it is ignored by everything in this module.

Records keep their features as float32 exactly as stored; training code
upcasts to float64 when it stacks them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import make_rng

GTLF_MAGIC = b"GTLF"
GTLF_VERSION = 1


class FeatureFormatError(ValueError):
    """Malformed feature file; the message carries the byte offset."""


@dataclass
class FeatureRecord:
    id: int
    feature: np.ndarray  # float32, shape (dim,)
    label: int
    modality: int


@dataclass
class DatasetSplit:
    """Base records are single-modality; base and novel label sets must be
    disjoint."""

    base: list[FeatureRecord]
    novel: list[FeatureRecord]

    def __post_init__(self):
        overlap = self.base_labels & self.novel_labels
        if overlap:
            raise ValueError(f"base and novel label sets overlap: {sorted(overlap)}")

    @property
    def base_labels(self) -> set[int]:
        return {r.label for r in self.base}

    @property
    def novel_labels(self) -> set[int]:
        return {r.label for r in self.novel}


@dataclass
class Episode:
    """Support/query realization of one evaluation episode."""

    way: int
    shots: int
    support_ids: list[int]
    query_ids: list[int]


@dataclass
class SynthConfig:
    """Knobs of the synthetic generative process used as a ground-truth
    oracle. Latents are drawn as z_c ~ N(mu_class, I), z_m ~ N(nu_mod, I)
    and mixed through a fixed random tanh network into features. The two
    gain knobs weight the z_c and z_m columns of the first mixing layer;
    a disturbance gain above the concept gain yields the fine-grained
    regime where modality variation dominates the class signal."""

    n_base_classes: int = 20
    n_novel_classes: int = 10
    n_modalities: int = 2
    samples_per_class_per_modality: int = 20
    nc: int = 8
    nm: int = 8
    dx: int = 256
    class_separation: float = 5.0
    modality_offset: float = 8.0
    concept_gain: float = 1.0
    disturbance_gain: float = 1.5
    mixing_depth: int = 2
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_base_classes", "n_novel_classes", "n_modalities",
                     "samples_per_class_per_modality", "nc", "nm", "dx",
                     "mixing_depth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"SynthConfig.{name} must be positive")
        if self.class_separation < 0 or self.modality_offset < 0:
            raise ValueError("scales must be nonnegative")
        if self.concept_gain <= 0 or self.disturbance_gain <= 0:
            raise ValueError("gains must be positive")


@dataclass
class GroundTruthLatents:
    """True latents of every generated record, indexed by record id."""

    class_means: np.ndarray       # (n_classes, nc)
    modality_offsets: np.ndarray  # (n_modalities, nm)
    z_c: np.ndarray               # (n_records, nc)
    z_m: np.ndarray               # (n_records, nm)


# ---------------------------------------------------------------------------
# codec
# ---------------------------------------------------------------------------

def save_features(records: list[FeatureRecord], path) -> None:
    if records:
        dim = records[0].feature.shape[0]
        for r in records:
            if r.feature.shape != (dim,):
                raise ValueError(
                    f"record {r.id}: feature shape {r.feature.shape} != ({dim},)"
                )
    else:
        dim = 0
    with open(path, "wb") as f:
        f.write(GTLF_MAGIC)
        f.write(struct.pack("<III", GTLF_VERSION, len(records), dim))
        for r in records:
            f.write(struct.pack("<IB", r.label, r.modality))
            f.write(np.ascontiguousarray(r.feature, dtype="<f4").tobytes())


def load_features(path) -> list[FeatureRecord]:
    with open(path, "rb") as f:
        data = f.read()

    def need(pos, n):
        if pos + n > len(data):
            raise FeatureFormatError(
                f"truncated feature file: needed {n} bytes at offset {pos}, "
                f"file has {len(data)}"
            )

    need(0, 4)
    if data[:4] != GTLF_MAGIC:
        raise FeatureFormatError("bad magic at offset 0: not a GTLF file")
    need(4, 12)
    version, count, dim = struct.unpack_from("<III", data, 4)
    if version != GTLF_VERSION:
        raise FeatureFormatError(f"unsupported version {version} at offset 4")
    pos = 16
    rec_bytes = 5 + 4 * dim
    records = []
    for i in range(count):
        need(pos, rec_bytes)
        label, modality = struct.unpack_from("<IB", data, pos)
        feature = np.frombuffer(data, dtype="<f4", count=dim, offset=pos + 5).copy()
        if not np.isfinite(feature).all():
            raise FeatureFormatError(f"non-finite feature in record {i} at offset {pos}")
        records.append(FeatureRecord(id=i, feature=feature, label=label,
                                     modality=modality))
        pos += rec_bytes
    if pos != len(data):
        raise FeatureFormatError(
            f"{len(data) - pos} trailing bytes at offset {pos}"
        )
    return records


def stack_features(records: list[FeatureRecord]) -> np.ndarray:
    """(N, dim) float64 design matrix in record order."""
    return np.stack([r.feature for r in records]).astype(np.float64)


def labels_of(records: list[FeatureRecord]) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


def modalities_of(records: list[FeatureRecord]) -> np.ndarray:
    return np.array([r.modality for r in records], dtype=np.int64)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_base_novel(records: list[FeatureRecord],
                     base_labels: set[int]) -> DatasetSplit:
    """Partition records into the base (modality 0 only) and novel sides."""
    observed = {r.label for r in records}
    unknown = set(base_labels) - observed
    if unknown:
        raise ValueError(f"base labels not present in data: {sorted(unknown)}")
    base, novel = [], []
    for r in records:
        if r.label in base_labels:
            if r.modality != 0:
                raise ValueError(
                    f"record {r.id}: base class {r.label} has modality "
                    f"{r.modality}, base data must be modality 0"
                )
            base.append(r)
        else:
            novel.append(r)
    return DatasetSplit(base=base, novel=novel)


def train_val_test_split(records: list[FeatureRecord], rng: np.random.Generator,
                         fractions=(0.6, 0.2, 0.2)):
    """Shuffled split into train/val/test with the given proportions."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be 3 values summing to 1, got {fractions}")
    order = rng.permutation(len(records))
    n_train = round(fractions[0] * len(records))
    n_val = round(fractions[1] * len(records))
    pick = lambda idx: [records[i] for i in idx]
    return (pick(order[:n_train]),
            pick(order[n_train:n_train + n_val]),
            pick(order[n_train + n_val:]))


def _by_class(records: list[FeatureRecord]) -> dict[int, list[int]]:
    """label -> positions (record-list indices), labels and positions sorted."""
    classes: dict[int, list[int]] = {}
    for pos, r in enumerate(records):
        classes.setdefault(r.label, []).append(pos)
    return {y: classes[y] for y in sorted(classes)}


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

ALL_WAY = "all_way"
N_WAY = "n_way"


def sample_episode(novel: list[FeatureRecord], protocol: str, k: int,
                   rng: np.random.Generator, n_way: int = 5) -> Episode:
    """Draw one support/query episode from the novel records.

    ``protocol`` is "all_way" (every novel class) or "n_way" (``n_way``
    classes sampled uniformly without replacement). Each selected class
    contributes exactly k support records, drawn uniformly across its
    records regardless of modality; every remaining record of the
    selected classes becomes a query.
    """
    if protocol not in (ALL_WAY, N_WAY):
        raise ValueError(f"unknown protocol {protocol!r}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    classes = _by_class(novel)
    if protocol == N_WAY:
        if n_way > len(classes):
            raise ValueError(
                f"n_way={n_way} exceeds the {len(classes)} novel classes"
            )
        names = sorted(classes)
        chosen = sorted(rng.choice(len(names), size=n_way, replace=False).tolist())
        selected = {names[i]: classes[names[i]] for i in chosen}
    else:
        selected = classes

    support, query = [], []
    for y, positions in selected.items():
        if len(positions) < k + 1:
            raise ValueError(
                f"class {y} has {len(positions)} records, needs at least "
                f"{k + 1} for {k}-shot support plus a query"
            )
        order = rng.permutation(len(positions))
        support.extend(positions[i] for i in order[:k])
        query.extend(positions[i] for i in order[k:])
    return Episode(
        way=len(selected),
        shots=k,
        support_ids=sorted(novel[i].id for i in support),
        query_ids=sorted(novel[i].id for i in query),
    )


def episode_records(novel: list[FeatureRecord], episode: Episode):
    """(support_records, query_records) resolved from the stored ids."""
    by_id = {r.id: r for r in novel}
    return ([by_id[i] for i in episode.support_ids],
            [by_id[i] for i in episode.query_ids])


# ---------------------------------------------------------------------------
# synthetic oracle
# ---------------------------------------------------------------------------

@dataclass
class _MixingNet:
    """Fixed random smooth mixing x = g(z): dense -> tanh stages followed
    by a final dense, hidden width 4*dx. The first layer scales its z_c
    columns by concept_gain and its z_m columns by disturbance_gain."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def create(cls, cfg: "SynthConfig", rng: np.random.Generator):
        n_in = cfg.nc + cfg.nm
        widths = [n_in] + [4 * cfg.dx] * (cfg.mixing_depth - 1) + [cfg.dx]
        weights, biases = [], []
        last = len(widths) - 2
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            # 0.4 keeps tanh in its responsive range for z at the
            # class-separation scale; the output layer re-expands the
            # compressed activations to a feature scale of a few units
            gain = 8.0 if i == last else 0.4
            w = rng.normal(0.0, gain / np.sqrt(a), size=(a, b))
            if i == 0:
                w[: cfg.nc] *= cfg.concept_gain
                w[cfg.nc:] *= cfg.disturbance_gain
            weights.append(w)
            biases.append(rng.normal(0.0, 0.1, size=b))
        return cls(weights, biases)

    def apply(self, z: np.ndarray) -> np.ndarray:
        out = z
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out = out @ w + b
            if i < len(self.weights) - 1:
                out = np.tanh(out)
        return out


def synth_generate(cfg: SynthConfig):
    """Generate a (DatasetSplit, GroundTruthLatents) pair.

    The first ``n_base_classes`` classes form the base split (modality 0
    only); the remaining ``n_novel_classes`` appear in every modality.
    Identical seeds reproduce identical bytes.
    """
    cfg.validate()
    rng = make_rng(cfg.seed)
    n_classes = cfg.n_base_classes + cfg.n_novel_classes
    class_means = cfg.class_separation * rng.standard_normal((n_classes, cfg.nc))
    modality_offsets = cfg.modality_offset * rng.standard_normal(
        (cfg.n_modalities, cfg.nm))
    mixer = _MixingNet.create(cfg, rng)

    records: list[FeatureRecord] = []
    z_c_all, z_m_all = [], []

    def emit(label: int, modality: int):
        n = cfg.samples_per_class_per_modality
        z_c = class_means[label] + rng.standard_normal((n, cfg.nc))
        z_m = modality_offsets[modality] + rng.standard_normal((n, cfg.nm))
        x = mixer.apply(np.hstack([z_c, z_m])).astype(np.float32)
        for row in range(n):
            records.append(FeatureRecord(id=len(records), feature=x[row],
                                         label=label, modality=modality))
        z_c_all.append(z_c)
        z_m_all.append(z_m)

    for label in range(cfg.n_base_classes):
        emit(label, modality=0)
    for label in range(cfg.n_base_classes, n_classes):
        for modality in range(cfg.n_modalities):
            emit(label, modality)

    split = DatasetSplit(
        base=records[: cfg.n_base_classes * cfg.samples_per_class_per_modality],
        novel=records[cfg.n_base_classes * cfg.samples_per_class_per_modality:],
    )
    truth = GroundTruthLatents(
        class_means=class_means,
        modality_offsets=modality_offsets,
        z_c=np.vstack(z_c_all),
        z_m=np.vstack(z_m_all),
    )
    return split, truth
