"""Whole-system finite-difference suite over the joint loss.

A tiny four-sample instance (embedding width 4 per segment, three
behaviours, two capsules) is trained for zero steps; the analytic batch
gradients from the two backward passes are compared entry by entry with
central differences of a pure re-evaluation of main + lambda * auxiliary
loss. Routing coefficients and sampled negatives are frozen from the
base run, matching the stop-gradient semantics of routing backward.

The auxiliary segment is checked against the sum of its two gradient
streams (the true joint-loss gradient); delta mixing is a training-time
policy applied after these gradients are formed and is validated
separately by the endpoint identities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, Sample, Vocabulary
from .gradcheck import DEFAULT_EPSILON, finite_difference_check
from .models import bce_loss, forward_logit, sigmoid
from .rng import STREAM_NEGATIVES, STREAM_ROUTING, derive_rng
from .training import (TrainConfig, aux_sample_forward, build_state, make_buffers,
                       run_aux_pass, run_main_pass)

CHECK_THRESHOLD = 1e-4


def tiny_dataset() -> Dataset:
    """Four fixed samples over 12 items, 3 categories, 2 users."""
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
    dataset = Dataset("tiny", users, items, categories, item_to_category,
                      samples, samples, samples)
    dataset.validate()
    return dataset


PROBE_SEED = 4


def tiny_config(base_model: str, seed: int = PROBE_SEED) -> TrainConfig:
    return TrainConfig(base_model=base_model, lam=1.0, delta=0.5, p=2,
                       routing_iterations=3, k_min=2, k_max=2, num_negatives=2,
                       d_orig=4, d_aux=4, max_len=8, batch_size=4,
                       optimizer="sgd", seed=seed)


def build_probe(base_model: str, seed: int = PROBE_SEED):
    """Run one batch's backward passes; return (params, grads, loss_fn).

    loss_fn re-evaluates the joint loss purely from the current parameter
    values (which the checker perturbs in place). Parameters are re-drawn
    at O(1) scale: production-scale init (embeddings at 0.05) leaves some
    analytic gradients near 1e-9, underneath the cancellation noise of a
    central difference of an O(1) loss, and those entries would fail the
    relative-error gate even though they are correct.

    The default seed is pinned to an instance verified well conditioned:
    every nonzero gradient exceeds 1e-6 (50x above the difference-noise
    floor of an O(1) loss at the default epsilon), except attention-unit
    entries that are flat by score-shift invariance (candidate-block
    columns and biases of hidden units whose ReLU state is uniform
    across a sequence). Those gradients are mathematically zero and
    their central differences read exactly zero here, because the
    uniform score shift cancels bit-exactly under max-subtraction.
    """
    dataset = tiny_dataset()
    config = tiny_config(base_model, seed)
    state, _ = build_state(config, dataset)
    probe_rng = derive_rng(seed, 97)
    for _, arr in state.param_items():
        arr[...] = probe_rng.uniform(-0.8, 0.8, size=arr.shape)
    buffers = make_buffers(state)
    batch = dataset.train
    rng_routing = derive_rng(config.seed, STREAM_ROUTING)
    rng_negatives = derive_rng(config.seed, STREAM_NEGATIVES)
    plans: dict = {}
    run_main_pass(state, batch, buffers)
    run_aux_pass(state, batch, config, buffers, rng_routing, rng_negatives, record=plans)

    grads = {
        "item_orig": buffers.item.orig_main.copy(),
        "item_aux": buffers.item.aux_from_main + buffers.item.aux_from_auxiliary,
        "cat_orig": buffers.cat.orig_main.copy(),
        "cat_aux": buffers.cat.aux_from_main + buffers.cat.aux_from_auxiliary,
        "profile": buffers.profile.main.copy(),
    }
    for name, arr in buffers.dense.items():
        grads[name] = arr.copy()
    if buffers.wide is not None:
        grads["model.wide"] = buffers.wide.main.copy()

    positives = [(i, s) for i, s in enumerate(batch) if s.label == 1]

    def loss_fn(_params) -> float:
        main = sum(bce_loss(sigmoid(forward_logit(state, s)[0]), s.label)
                   for s in batch) / len(batch)
        aux = sum(aux_sample_forward(state, s, config, None, None, plan=plans[i])[0]
                  for i, s in positives) / len(positives)
        return main + config.lam * aux

    params = dict(state.param_items())
    return params, grads, loss_fn


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < CHECK_THRESHOLD


def run_gradient_checks(epsilon: float = DEFAULT_EPSILON,
                        base_models=("din", "wide_deep"),
                        progress=None) -> list:
    """Finite-difference every parameter group of every base model."""
    results = []
    for base_model in base_models:
        params, grads, loss_fn = build_probe(base_model)
        for name in params:
            err = finite_difference_check(loss_fn, {name: params[name]},
                                          {name: grads[name]}, epsilon)
            result = CheckResult(f"{base_model}/{name}", err)
            results.append(result)
            if progress is not None:
                progress(f"{result.name}: max relative error {err:.3e} "
                         f"{'ok' if result.ok else 'FAIL'}")
    return results
