import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from drm.batching import collate  # noqa: E402
from drm.featurizer import featurize, make_tables  # noqa: E402
from drm.model import DRMModel, ModelConfig  # noqa: E402
from drm.synthgraph import default_spec, generate_dataset  # noqa: E402

TINY = dict(
    num_entity_classes=6,
    num_predicates=4,
    d_v=16,
    d_s=8,
    d_u=24,
    d_model=8,
    num_heads=2,
    entity_layers=1,
    predicate_layers=1,
    triplet_layers=1,
    proj_dim=4,
)


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = default_spec(num_entity_categories=6, num_predicate_categories=4, pool_size=8,
                        samples_per_split={"train": 40, "val": 8, "test": 12})
    return generate_dataset(spec, 3)


@pytest.fixture(scope="session")
def tiny_tables():
    return make_tables(6, d_v=16, d_s=8, d_u=24, seed=1)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(**TINY)


def make_model(cfg: ModelConfig, tables, seed=0, dtype=torch.float64) -> DRMModel:
    torch.manual_seed(seed)
    model = DRMModel(cfg, torch.as_tensor(tables.semantic))
    return model.to(dtype)


def make_batch(dataset, tables, n=3, split="train", dtype=torch.float64, start=0):
    samples = [s for s in dataset.splits[split] if s.relations][start : start + n]
    items = [(s, featurize(s, tables)) for s in samples]
    return collate(items, dataset.spec.num_predicate_categories, dataset.spec.num_entity_categories, dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_experiment(**overrides):
    """Seconds-scale end-to-end configuration."""
    from drm.config import DKTConfig, ExperimentConfig
    from drm.dkt import FinetuneConfig
    from drm.training import TrainConfig

    doc = dict(
        run_id="tiny",
        seed=0,
        dataset={"pool_size": 8, "samples_per_split": {"train": 60, "val": 10, "test": 20}},
        model=ModelConfig(**TINY),
        train=TrainConfig(epochs=2, lr=0.01, batch_size=8),
        dkt=DKTConfig(threshold=1, finetune=FinetuneConfig(epochs=3)),
    )
    doc.update(overrides)
    return ExperimentConfig(**doc)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
