"""Joint training loop.

Each batch runs two backward passes over shared dual-segment embeddings:
the main CTR loss (binary cross-entropy through the base model) and the
interest-capsule loss (sampled softmax through routing and label-aware
attention, positives only). The auxiliary segment's two gradient streams
are then mixed with weight delta before a single optimizer step; the
original segment sees main-loss gradients only.

Randomness is split into named sub-streams (shuffling, routing logits,
negative sampling) so that turning the auxiliary task on or off cannot
shift the draws any other consumer sees.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .capsules import (RoutingParams, UPDATE_MODES, attention_backward, attention_forward,
                       interest_loss_backward, interest_loss_forward, num_capsules,
                       routing_backward, routing_forward)
from .data import Dataset
from .embeddings import (DualEmbeddingTable, EmbeddingTable, GradientBuffers, ItemEncoder,
                         apply_single_update, apply_sparse_update, scatter_encoder_aux)
from .errors import ConfigError, NumericalError
from .evaluation import evaluate_auc
from .models import (MODEL_NAMES, CtrState, WideDeepModel, backward_main, bce_loss,
                     build_model, forward_logit, sigmoid)
from .optim import OPTIMIZER_NAMES, Optimizer
from .rng import (STREAM_INIT, STREAM_NEGATIVES, STREAM_ROUTING, STREAM_SHUFFLE, Rng,
                  derive_rng)

logger = logging.getLogger(__name__)

_TRUE_WORDS = ("1", "true", "yes", "on")
_FALSE_WORDS = ("0", "false", "no", "off")


@dataclass
class TrainConfig:
    """All knobs of one training run; config files use the same key names.

    The capsule dimension equals d_aux by construction: interest capsules
    live in the auxiliary embedding space.
    """

    base_model: str = "din"
    lam: float = 1.0
    delta: float = 0.3
    p: int = 2
    routing_iterations: int = 3
    routing_update: str = "assign"
    k_min: int = 1
    k_max: int = 8
    num_negatives: int = 4
    d_orig: int = 16
    d_aux: int = 16
    max_len: int = 20
    batch_size: int = 64
    epochs: int = 5
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    optimizer: str = "adam"
    auxiliary: bool = True

    # config-file key -> field name, where they differ ("lambda" is a
    # Python keyword)
    _ALIASES = {"lambda": "lam"}

    def validate(self) -> None:
        if self.base_model not in MODEL_NAMES:
            raise ConfigError(f"base_model must be one of {MODEL_NAMES}, got {self.base_model!r}")
        if self.optimizer not in OPTIMIZER_NAMES:
            raise ConfigError(f"optimizer must be one of {OPTIMIZER_NAMES}, got {self.optimizer!r}")
        if self.routing_update not in UPDATE_MODES:
            raise ConfigError(
                f"routing_update must be one of {UPDATE_MODES}, got {self.routing_update!r}")
        if not (self.lam >= 0.0 and math.isfinite(self.lam)):
            raise ConfigError(f"lambda must be finite and >= 0, got {self.lam}")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError(f"delta must be in [0, 1], got {self.delta}")
        if self.p < 1:
            raise ConfigError(f"attention exponent p must be >= 1, got {self.p}")
        if self.routing_iterations < 1:
            raise ConfigError(f"routing_iterations must be >= 1, got {self.routing_iterations}")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError(f"need 1 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        for name in ("num_negatives", "d_orig", "d_aux", "max_len", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not (self.learning_rate > 0.0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.eps <= 0.0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        config = cls()
        field_types = {f.name: f.type for f in fields(cls)}
        for key, raw in mapping.items():
            name = cls._ALIASES.get(key, key)
            if name not in field_types or name.startswith("_"):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(config, name, _convert(key, raw, getattr(config, name)))
        config.validate()
        return config

    def to_mapping(self) -> dict:
        out = {}
        reverse = {v: k for k, v in self._ALIASES.items()}
        for f in fields(self):
            out[reverse.get(f.name, f.name)] = getattr(self, f.name)
        return out

    def copy(self, **overrides) -> "TrainConfig":
        config = replace(self, **overrides)
        config.validate()
        return config


def _convert(key: str, raw, current):
    if isinstance(raw, type(current)):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(current, bool):
            lowered = text.lower()
            if lowered in _TRUE_WORDS:
                return True
            if lowered in _FALSE_WORDS:
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for config key {key!r}: {raw!r}") from exc


def load_train_config(path: str) -> TrainConfig:
    from .fileio import read_kv_config

    return TrainConfig.from_mapping(read_kv_config(path))


def build_state(config: TrainConfig, dataset: Dataset) -> tuple:
    """Fresh model state and optimizer, initialized from the run seed."""
    config.validate()
    rng = derive_rng(config.seed, STREAM_INIT)
    item_table = DualEmbeddingTable.initialize(len(dataset.items), config.d_orig,
                                               config.d_aux, rng)
    cat_table = DualEmbeddingTable.initialize(len(dataset.categories), config.d_orig,
                                              config.d_aux, rng)
    profile_table = EmbeddingTable.initialize(len(dataset.users), config.d_orig, rng)
    encoder = ItemEncoder(item_table, cat_table, dataset.item_to_category)

    h = config.d_aux
    limit = math.sqrt(3.0 / h)
    bilinear = rng.uniform(-limit, limit, size=(h, h))
    routing = RoutingParams(bilinear=bilinear, iterations=config.routing_iterations,
                            update_mode=config.routing_update)

    model = build_model(config.base_model, config.d_orig + config.d_aux, config.d_orig,
                        len(dataset.items), rng)
    state = CtrState(encoder=encoder, profile_table=profile_table, routing=routing,
                     model=model, base_model=config.base_model, max_len=config.max_len)
    opt = Optimizer(config.optimizer, config.learning_rate, config.beta1, config.beta2,
                    config.eps)
    return state, opt


def make_buffers(state: CtrState) -> GradientBuffers:
    wide = state.model.wide if isinstance(state.model, WideDeepModel) else None
    return GradientBuffers.for_tables(state.encoder.item_table, state.encoder.cat_table,
                                      state.profile_table, state.dense_param_items(),
                                      wide=wide)


def run_main_pass(state: CtrState, batch: list, buffers: GradientBuffers) -> float:
    """Forward and backward the CTR loss; returns the batch-mean loss."""
    total = 0.0
    scale = 1.0 / len(batch)
    for sample in batch:
        logit, cache = forward_logit(state, sample)
        prob = sigmoid(logit)
        total += bce_loss(prob, sample.label)
        backward_main(state, sample, cache, (prob - sample.label) * scale, buffers)
    return total * scale


@dataclass
class AuxPlan:
    """Frozen per-sample auxiliary randomness, for replays and probes."""

    coefficients: np.ndarray
    negatives: np.ndarray


def _draw_aux_negatives(rng: Rng, item_count: int, sample, count: int) -> np.ndarray:
    """Sampled-softmax negatives: never the positive, a behaviour, or OOV."""
    excluded = set(sample.behaviors)
    excluded.add(sample.candidate)
    out = []
    for _ in range(count):
        neg = None
        for _ in range(100):
            idx = 1 + int(rng.integers(0, item_count - 1))
            if idx not in excluded:
                neg = idx
                break
        if neg is None:
            pool = [i for i in range(1, item_count) if i not in excluded]
            if not pool:
                raise ConfigError("vocabulary too small to sample interest-loss negatives")
            neg = pool[int(rng.integers(0, len(pool)))]
        out.append(neg)
    return np.asarray(out, dtype=np.intp)


def aux_sample_forward(state: CtrState, sample, config: TrainConfig,
                       rng_routing: "Rng | None", rng_negatives: "Rng | None",
                       plan: "AuxPlan | None" = None):
    """Interest loss for one positive sample.

    With a plan, routing coefficients and negative draws are replayed
    instead of drawn, which makes the forward pass a pure function of the
    parameters (finite-difference probes rely on this).
    """
    ids = np.asarray(sample.behaviors[-config.max_len:], dtype=np.intp)
    behaviors = state.encoder.embed_aux(ids)
    k = num_capsules(len(ids), config.k_min, config.k_max)
    if plan is None:
        routing_state = routing_forward(behaviors, state.routing, k, rng=rng_routing)
        negatives = _draw_aux_negatives(rng_negatives, len(state.encoder.item_to_category),
                                        sample, config.num_negatives)
    else:
        routing_state = routing_forward(behaviors, state.routing, k,
                                        frozen_coefficients=plan.coefficients)
        negatives = plan.negatives
    candidate = state.encoder.embed_aux(np.array([sample.candidate], dtype=np.intp))[0]
    attended, att_state = attention_forward(routing_state.capsules, candidate, config.p)
    neg_vecs = state.encoder.embed_aux(negatives)
    loss, loss_state = interest_loss_forward(attended, candidate, neg_vecs)
    cache = (ids, behaviors, routing_state, candidate, attended, att_state, negatives,
             neg_vecs, loss_state)
    return loss, cache


def run_aux_pass(state: CtrState, batch: list, config: TrainConfig,
                 buffers: GradientBuffers, rng_routing: "Rng | None",
                 rng_negatives: "Rng | None", plans: "dict | None" = None,
                 record: "dict | None" = None) -> float:
    """Interest loss over the batch's positives; mean per-positive loss.

    Backward runs with weight lambda/(number of positives) so the scatter
    already carries the joint-loss scaling. lambda == 0 still reports the
    loss but skips all gradient work.
    """
    positives = [(i, s) for i, s in enumerate(batch) if s.label == 1]
    if not positives:
        return 0.0
    total = 0.0
    scale = config.lam / len(positives)
    for i, sample in positives:
        plan = plans.get(i) if plans is not None else None
        loss, cache = aux_sample_forward(state, sample, config, rng_routing,
                                         rng_negatives, plan)
        total += loss
        if record is not None:
            record[i] = AuxPlan(coefficients=cache[2].coefficients.copy(),
                                negatives=cache[6].copy())
        if config.lam > 0.0:
            aux_sample_backward(state, config, sample, cache, scale, buffers)
    return total / len(positives)


def aux_sample_backward(state: CtrState, config: TrainConfig, sample, cache,
                        scale: float, buffers: GradientBuffers) -> None:
    (ids, behaviors, routing_state, candidate, attended, att_state, negatives,
     neg_vecs, loss_state) = cache
    d_attended, d_pos, d_negs = interest_loss_backward(loss_state, attended, candidate,
                                                       neg_vecs, scale)
    d_capsules, d_cand_att = attention_backward(att_state, routing_state.capsules,
                                                candidate, config.p, d_attended)
    d_bilinear, d_behaviors = routing_backward(routing_state, behaviors, state.routing,
                                               d_capsules)
    buffers.dense["capsule.bilinear"] += d_bilinear
    scatter_encoder_aux(state.encoder, buffers.item, buffers.cat, ids, d_behaviors)
    scatter_encoder_aux(state.encoder, buffers.item, buffers.cat,
                        np.array([sample.candidate], dtype=np.intp),
                        (d_pos + d_cand_att)[None, :])
    scatter_encoder_aux(state.encoder, buffers.item, buffers.cat, negatives, d_negs)


def apply_updates(state: CtrState, opt: Optimizer, buffers: GradientBuffers,
                  delta: float) -> None:
    """Mix the auxiliary segment's gradients, then step every parameter."""
    buffers.mix(delta)
    opt.begin_step()
    for name, arr in state.dense_param_items():
        opt.update_dense(name, arr, buffers.dense[name])
    apply_sparse_update(state.encoder.item_table, buffers.item, opt, "item")
    apply_sparse_update(state.encoder.cat_table, buffers.cat, opt, "cat")
    apply_single_update(state.profile_table, buffers.profile, opt, "profile")
    if buffers.wide is not None and buffers.wide.touched:
        rows = np.fromiter(sorted(buffers.wide.touched), dtype=np.intp)
        opt.update_rows("model.wide", state.model.wide, rows, buffers.wide.main[rows])


def joint_loss(l_main: float, l_aux: float, lam: float) -> float:
    if not (math.isfinite(l_main) and math.isfinite(l_aux)):
        raise NumericalError(f"non-finite loss terms: main={l_main}, auxiliary={l_aux}")
    if lam < 0.0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return l_main + lam * l_aux


def train_step(state: CtrState, opt: Optimizer, batch: list, config: TrainConfig,
               buffers: GradientBuffers, rng_routing: Rng, rng_negatives: Rng) -> tuple:
    """One mini-batch: main pass, auxiliary pass, mix, optimizer step."""
    buffers.zero()
    l_main = run_main_pass(state, batch, buffers)
    if config.auxiliary:
        l_aux = run_aux_pass(state, batch, config, buffers, rng_routing, rng_negatives)
    else:
        l_aux = 0.0
    apply_updates(state, opt, buffers, config.delta if config.auxiliary else 1.0)
    return l_main, l_aux


@dataclass
class EpochStats:
    main_loss: float
    aux_loss: float
    total_loss: float
    validation_auc: float


@dataclass
class TrainReport:
    """What one training run did, serializable as JSON."""

    seed: int
    initial_auc: float
    epochs: list = field(default_factory=list)
    wall_seconds: float = 0.0
    checkpoint_path: "str | None" = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "initial_auc": self.initial_auc,
            "epochs": [vars(e).copy() for e in self.epochs],
            "wall_seconds": self.wall_seconds,
            "checkpoint_path": self.checkpoint_path,
        }

    def final_auc(self) -> float:
        return self.epochs[-1].validation_auc if self.epochs else self.initial_auc


def train(config: TrainConfig, dataset: Dataset, log_progress: bool = False) -> tuple:
    """Run the full loop; returns (state, opt, report). Deterministic given seed."""
    config.validate()
    if not dataset.train:
        raise ConfigError("training split is empty")
    if not dataset.valid:
        raise ConfigError("validation split is empty")

    started = time.perf_counter()
    state, opt = build_state(config, dataset)
    buffers = make_buffers(state)
    rng_shuffle = derive_rng(config.seed, STREAM_SHUFFLE)
    rng_routing = derive_rng(config.seed, STREAM_ROUTING)
    rng_negatives = derive_rng(config.seed, STREAM_NEGATIVES)

    report = TrainReport(seed=config.seed, initial_auc=evaluate_auc(state, dataset.valid))
    train_split = dataset.train
    for epoch in range(config.epochs):
        order = rng_shuffle.permutation(len(train_split))
        main_sum = 0.0
        aux_sum = 0.0
        aux_count = 0
        for start in range(0, len(order), config.batch_size):
            rows = order[start:start + config.batch_size]
            batch = [train_split[i] for i in rows]
            l_main, l_aux = train_step(state, opt, batch, config, buffers,
                                       rng_routing, rng_negatives)
            total = joint_loss(l_main, l_aux, config.lam)
            if not math.isfinite(total):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} batch {start // config.batch_size}: "
                    f"main={l_main}, auxiliary={l_aux}")
            positives = sum(1 for s in batch if s.label == 1)
            main_sum += l_main * len(batch)
            aux_sum += l_aux * positives
            aux_count += positives
        epoch_main = main_sum / len(train_split)
        epoch_aux = aux_sum / aux_count if aux_count else 0.0
        stats = EpochStats(
            main_loss=epoch_main,
            aux_loss=epoch_aux,
            total_loss=joint_loss(epoch_main, epoch_aux, config.lam),
            validation_auc=evaluate_auc(state, dataset.valid),
        )
        report.epochs.append(stats)
        if log_progress:
            logger.info("epoch %d: main %.4f aux %.4f valid auc %.4f",
                        epoch + 1, stats.main_loss, stats.aux_loss, stats.validation_auc)
    report.wall_seconds = time.perf_counter() - started
    return state, opt, report
