"""Shared fixtures: small deterministic datasets and configs."""

import numpy as np
import pytest

from capsrec.data import Dataset, Sample, SyntheticSpec, Vocabulary, generate_synthetic
from capsrec.training import TrainConfig


def micro_dataset() -> Dataset:
    """Hand-built four-sample dataset over 12 items and 3 categories."""
    items = Vocabulary()
    for i in range(12):
        items.add(f"i{i}")
    categories = Vocabulary()
    for c in range(3):
        categories.add(f"c{c}")
    users = Vocabulary()
    users.add("u0")
    users.add("u1")
    item_to_category = np.zeros(len(items), dtype=np.intp)
    for idx in range(1, len(items)):
        item_to_category[idx] = 1 + (idx - 1) % 3
    samples = [
        Sample(1, 1, [1, 4, 7], 10, 1),
        Sample(2, 2, [2, 5, 8], 11, 0),
        Sample(1, 1, [3, 6, 9], 12, 1),
        Sample(2, 2, [4, 7, 10], 2, 0),
    ]
    return Dataset("micro", users, items, categories, item_to_category,
                   samples, samples, samples)


def micro_config(**overrides) -> TrainConfig:
    """Small dimensions and one epoch so training tests stay fast."""
    base = dict(base_model="din", lam=1.0, delta=0.5, p=2,
                routing_iterations=2, k_min=2, k_max=2, num_negatives=2,
                d_orig=4, d_aux=4, max_len=8, batch_size=4, epochs=1,
                learning_rate=1e-3, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def dataset():
    return micro_dataset()


@pytest.fixture(scope="session")
def small_synthetic():
    """Session-cached synthetic dataset big enough to train on."""
    spec = SyntheticSpec(num_users=60, num_items=60, num_interests=6,
                         interests_per_user=2, seq_len=10, neg_ratio=1,
                         noise=0.1, rounds=4, seed=7)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def long_synthetic():
    """Sequences of length 50 so max_len ablation has room to truncate."""
    spec = SyntheticSpec(num_users=40, num_items=60, num_interests=6,
                         interests_per_user=2, seq_len=50, neg_ratio=1,
                         noise=0.1, rounds=4, seed=11)
    return generate_synthetic(spec)
