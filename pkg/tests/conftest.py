"""Shared fixtures.

The desk-scale training runs (40 phantoms, 60 epochs) take minutes each,
so they are built lazily and cached for the whole session; the noise
robustness test reuses the seed-42 models from the clean-accuracy test.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evidseg.backbone import TrainConfig, train
from evidseg.phantom import PhantomConfig, make_dataset


@pytest.fixture(scope="session")
def desk_data():
    """60 default phantoms: 40 train / 10 val (unused here) / 10 test."""
    cfg = PhantomConfig()
    samples = make_dataset(60, cfg, cfg.seed)
    return cfg, samples


@pytest.fixture(scope="session")
def desk_run(desk_data):
    """Memoized (head, seed) -> trained checkpoint on the 40-sample split."""
    _, samples = desk_data
    pairs = [(s.image, s.labels) for s in samples[:40]]
    cache = {}

    def get(head: str, seed: int):
        key = (head, seed)
        if key not in cache:
            cache[key] = train(pairs, TrainConfig(head=head, seed=seed))
        return cache[key]

    return get
