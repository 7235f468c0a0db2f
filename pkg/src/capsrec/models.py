"""CTR base models over concatenated dual embeddings.

Two small heads are provided: a DIN-style attention-pooling network and a
wide+deep pooled baseline. Both end in a ReLU MLP producing one logit;
training uses binary cross-entropy on the sigmoid. Forward passes cache
activations, backward passes are hand-derived and finite-difference
checked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .capsules import RoutingParams
from .embeddings import EmbeddingTable, GradientBuffers, ItemEncoder
from .errors import ConfigError, DomainError
from .linalg import softmax, softmax_backward
from .rng import Rng

ATTENTION_HIDDEN = 32
HEAD_HIDDEN = (64, 32)

MODEL_NAMES = ("din", "wide_deep")


class Mlp:
    """Fully-connected stack, ReLU on hidden layers, linear output."""

    def __init__(self, sizes: list[int], rng: Rng):
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    def forward(self, x: np.ndarray):
        """x is (n, d_in); returns (n, d_out) and the cache for backward."""
        inputs = [x]
        preacts = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            preacts.append(z)
            h = z if i == last else np.maximum(z, 0.0)
            if i != last:
                inputs.append(h)
        return h, (inputs, preacts)

    def backward(self, cache, d_out: np.ndarray, g_weights: list, g_biases: list) -> np.ndarray:
        inputs, preacts = cache
        d = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                d = d * (preacts[i] > 0.0)
            g_weights[i] += inputs[i].T @ d
            g_biases[i] += d.sum(axis=0)
            d = d @ self.weights[i].T
        return d


def sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def bce_loss(p: float, y: int) -> float:
    """Binary cross-entropy -[y log p + (1-y) log(1-p)], p clamped to [1e-12, 1-1e-12]."""
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def _attention_features(behaviors: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    """Per-behaviour [e_i || e_t || e_i*e_t || e_i - e_t] feature rows."""
    n = behaviors.shape[0]
    cand = np.broadcast_to(candidate, (n, candidate.shape[0]))
    return np.concatenate([behaviors, cand, behaviors * cand, behaviors - cand], axis=1)


class DinModel:
    """Attention pooling over the behaviour sequence, then an MLP head."""

    def __init__(self, d_item: int, d_profile: int, rng: Rng):
        self.d_item = d_item
        self.attention = Mlp([4 * d_item, ATTENTION_HIDDEN, 1], rng)
        self.head = Mlp([2 * d_item + d_profile, *HEAD_HIDDEN, 1], rng)

    def param_items(self):
        for i, (w, b) in enumerate(zip(self.attention.weights, self.attention.biases)):
            yield f"att.w{i}", w
            yield f"att.b{i}", b
        for i, (w, b) in enumerate(zip(self.head.weights, self.head.biases)):
            yield f"head.w{i}", w
            yield f"head.b{i}", b

    def forward(self, behaviors: np.ndarray, candidate: np.ndarray, profile: np.ndarray,
                candidate_index: int = -1):
        feats = _attention_features(behaviors, candidate)
        scores, att_cache = self.attention.forward(feats)
        alpha = softmax(scores[:, 0])
        pooled = behaviors.T @ alpha
        x = np.concatenate([pooled, candidate, profile])[None, :]
        logit, head_cache = self.head.forward(x)
        cache = (behaviors, candidate, alpha, att_cache, head_cache)
        return float(logit[0, 0]), cache

    def backward(self, cache, d_logit: float, g: dict):
        behaviors, candidate, alpha, att_cache, head_cache = cache
        d = self.d_item
        g_hw = [g[f"head.w{i}"] for i in range(len(self.head.weights))]
        g_hb = [g[f"head.b{i}"] for i in range(len(self.head.weights))]
        d_x = self.head.backward(head_cache, np.array([[d_logit]]), g_hw, g_hb)[0]
        d_pooled, d_cand, d_profile = d_x[:d], d_x[d:2 * d].copy(), d_x[2 * d:]

        d_alpha = behaviors @ d_pooled
        d_behaviors = np.outer(alpha, d_pooled)
        d_scores = softmax_backward(alpha, d_alpha)
        g_aw = [g[f"att.w{i}"] for i in range(len(self.attention.weights))]
        g_ab = [g[f"att.b{i}"] for i in range(len(self.attention.weights))]
        d_feats = self.attention.backward(att_cache, d_scores[:, None], g_aw, g_ab)

        d_behaviors += d_feats[:, :d] + d_feats[:, 2 * d:3 * d] * candidate + d_feats[:, 3 * d:]
        d_cand += (d_feats[:, d:2 * d] + d_feats[:, 2 * d:3 * d] * behaviors
                   - d_feats[:, 3 * d:]).sum(axis=0)
        return d_behaviors, d_cand, d_profile, None


class WideDeepModel:
    """Mean pooling into a deep MLP plus a per-item wide scalar on the candidate."""

    def __init__(self, d_item: int, d_profile: int, item_count: int, rng: Rng):
        self.d_item = d_item
        self.head = Mlp([2 * d_item + d_profile, *HEAD_HIDDEN, 1], rng)
        self.wide = np.zeros(item_count)

    def param_items(self):
        for i, (w, b) in enumerate(zip(self.head.weights, self.head.biases)):
            yield f"head.w{i}", w
            yield f"head.b{i}", b

    def forward(self, behaviors: np.ndarray, candidate: np.ndarray, profile: np.ndarray,
                candidate_index: int):
        pooled = behaviors.mean(axis=0)
        x = np.concatenate([pooled, candidate, profile])[None, :]
        deep, head_cache = self.head.forward(x)
        logit = float(deep[0, 0]) + float(self.wide[candidate_index])
        return logit, (behaviors.shape[0], head_cache)

    def backward(self, cache, d_logit: float, g: dict):
        n, head_cache = cache
        d = self.d_item
        g_hw = [g[f"head.w{i}"] for i in range(len(self.head.weights))]
        g_hb = [g[f"head.b{i}"] for i in range(len(self.head.weights))]
        d_x = self.head.backward(head_cache, np.array([[d_logit]]), g_hw, g_hb)[0]
        d_behaviors = np.broadcast_to(d_x[:d] / n, (n, d)).copy()
        return d_behaviors, d_x[d:2 * d].copy(), d_x[2 * d:], d_logit


def din_attention_pool(behaviors: np.ndarray, candidate: np.ndarray, unit: Mlp) -> np.ndarray:
    """Softmax-weighted sum of behaviour vectors scored by the attention unit."""
    behaviors = np.asarray(behaviors, dtype=np.float64)
    if behaviors.ndim != 2 or behaviors.shape[0] < 1:
        raise DomainError("attention pooling needs a non-empty behaviour sequence")
    scores, _ = unit.forward(_attention_features(behaviors, candidate))
    return behaviors.T @ softmax(scores[:, 0])


@dataclass
class CtrState:
    """Everything a frozen model needs to score a sample."""

    encoder: ItemEncoder
    profile_table: EmbeddingTable
    routing: RoutingParams
    model: "DinModel | WideDeepModel"
    base_model: str
    max_len: int

    def dense_param_items(self):
        yield "capsule.bilinear", self.routing.bilinear
        for name, arr in self.model.param_items():
            yield f"model.{name}", arr

    def sparse_param_items(self):
        yield "item_orig", self.encoder.item_table.orig_rows
        yield "item_aux", self.encoder.item_table.aux_rows
        yield "cat_orig", self.encoder.cat_table.orig_rows
        yield "cat_aux", self.encoder.cat_table.aux_rows
        yield "profile", self.profile_table.rows
        if isinstance(self.model, WideDeepModel):
            yield "model.wide", self.model.wide

    def param_items(self):
        yield from self.sparse_param_items()
        yield from self.dense_param_items()


def build_model(name: str, d_item: int, d_profile: int, item_count: int, rng: Rng):
    if name == "din":
        return DinModel(d_item, d_profile, rng)
    if name == "wide_deep":
        return WideDeepModel(d_item, d_profile, item_count, rng)
    raise ConfigError(f"unknown base model {name!r}, expected one of {MODEL_NAMES}")


@dataclass
class MainCache:
    ids: np.ndarray
    behaviors: np.ndarray
    candidate_vec: np.ndarray
    model_cache: tuple


def forward_logit(state: CtrState, sample) -> tuple[float, MainCache]:
    ids = np.asarray(sample.behaviors[-state.max_len:], dtype=np.intp)
    behaviors = state.encoder.embed(ids)
    candidate_vec = state.encoder.embed(np.array([sample.candidate], dtype=np.intp))[0]
    profile = state.profile_table.rows[sample.profile_index]
    logit, model_cache = state.model.forward(behaviors, candidate_vec, profile, sample.candidate)
    return logit, MainCache(ids, behaviors, candidate_vec, model_cache)


def predict_ctr(state: CtrState, sample) -> float:
    """Click probability sigmoid(logit); deterministic for frozen parameters."""
    logit, _ = forward_logit(state, sample)
    return sigmoid(logit)


def backward_main(state: CtrState, sample, cache: MainCache, d_logit: float,
                  buffers: GradientBuffers) -> None:
    """Backprop the main loss from d_logit into parameter and embedding buffers."""
    from .embeddings import scatter_encoder_main  # local to avoid import noise at module top

    d_behaviors, d_cand, d_profile, d_wide = state.model.backward(
        cache.model_cache, d_logit, buffers.dense_for("model."))
    scatter_encoder_main(state.encoder, buffers.item, buffers.cat, cache.ids, d_behaviors)
    scatter_encoder_main(state.encoder, buffers.item, buffers.cat,
                         np.array([sample.candidate], dtype=np.intp), d_cand[None, :])
    buffers.profile.add(np.array([sample.profile_index], dtype=np.intp), d_profile[None, :])
    if d_wide is not None:
        buffers.wide.add(np.array([sample.candidate], dtype=np.intp), np.array([d_wide]))
