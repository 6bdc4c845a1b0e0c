import pytest

from gtl.data import SynthConfig, synth_generate
from gtl.model import ModelDims
from gtl.rng import derive_rng
from gtl.train import TrainConfig, train_phase1


def quick_synth(seed=0, **overrides):
    base = dict(n_base_classes=6, n_novel_classes=4, n_modalities=2,
                samples_per_class_per_modality=12, nc=4, nm=4, dx=64,
                class_separation=5.0, modality_offset=6.0,
                concept_gain=1.0, disturbance_gain=1.5, seed=seed)
    base.update(overrides)
    return SynthConfig(**base)


def quick_dims(**overrides):
    base = dict(Dx=64, Nc=8, Nm=4, d=4, H=32)
    base.update(overrides)
    return ModelDims(**base)


def quick_train_cfg(mode="full", seed=0, **overrides):
    base = dict(dims=quick_dims(), epochs=32, batch_size=32, lr_cls=1e-2,
                dropout=0.0, seed=seed, mode=mode)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def quick_split():
    split, truth = synth_generate(quick_synth())
    return split, truth


@pytest.fixture(scope="session")
def quick_phase1(quick_split):
    """Phase-1 result on the quick corpus, shared across tests that only
    read it (tests that mutate must copy)."""
    split, _ = quick_split
    cfg = quick_train_cfg()
    params, report = train_phase1(split.base, cfg, derive_rng(0, 0))
    return params, report, cfg
