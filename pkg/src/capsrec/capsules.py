"""Interest capsules: squash, behaviour-to-interest dynamic routing,
label-aware attention, and the sampled-softmax interest loss.

Routing iteratively reassigns behaviour items to K interest capsules via
softmax-normalized bilinear logits. Gradients flow through the final
iteration only: the coefficients of the last iteration are treated as
constants (stop-gradient), which is also what the finite-difference suite
verifies. All backward passes here are hand-derived.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, MaskingViolationError
from .linalg import softmax, softmax_backward, softmax_rows
from .rng import Rng

log = logging.getLogger(__name__)

UPDATE_MODES = ("assign", "accumulate")


@dataclass
class RoutingParams:
    """Shared bilinear map plus routing knobs.

    One matrix serves both the message transform (M @ c_i) and the logit
    u_j' M c_i; per-pair maps would be unlearnable for variable-length
    sequences. update_mode "assign" overwrites logits each iteration,
    "accumulate" adds onto them as in classical dynamic routing.
    """

    bilinear: np.ndarray
    iterations: int = 3
    logit_init_sigma: float = 1.0
    update_mode: str = "assign"

    def __post_init__(self):
        m = self.bilinear
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"bilinear map must be square, got {m.shape}")
        if self.iterations < 1:
            raise ConfigError(f"routing iterations must be >= 1, got {self.iterations}")
        if not self.logit_init_sigma > 0:
            raise ConfigError(f"logit_init_sigma must be > 0, got {self.logit_init_sigma}")
        if self.update_mode not in UPDATE_MODES:
            raise ConfigError(f"update_mode must be one of {UPDATE_MODES}, got {self.update_mode!r}")

    @property
    def dim(self) -> int:
        return self.bilinear.shape[0]


@dataclass
class InterestCapsules:
    """K interest vectors for one user, columns of an h x K matrix."""

    capsules: np.ndarray

    def __post_init__(self):
        if self.capsules.ndim != 2 or self.capsules.shape[1] < 1:
            raise DimensionError(f"capsules must be h x K with K >= 1, got {self.capsules.shape}")

    @property
    def k(self) -> int:
        return self.capsules.shape[1]


def squash(s: np.ndarray) -> np.ndarray:
    """Norm-compressing nonlinearity (|s|^2 / (1 + |s|^2)) * (s / |s|).

    Output is parallel to s with norm in [0, 1); the zero vector maps to
    itself (the algebraic form s * |s| / (1 + |s|^2) needs no guard).
    """
    r2 = float(s @ s)
    return s * (np.sqrt(r2) / (1.0 + r2))


def squash_rows(s: np.ndarray) -> np.ndarray:
    r2 = np.sum(s * s, axis=1, keepdims=True)
    return s * (np.sqrt(r2) / (1.0 + r2))


def squash_backward_rows(s: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Gradient through squash_rows; rows with |s| = 0 get zero gradient."""
    r2 = np.sum(s * s, axis=1, keepdims=True)
    r = np.sqrt(r2)
    g = r / (1.0 + r2)
    # d squash/ds = g I + 2 g'(r2) s s^T with g'(r2) = (1 - r2) / (2 r (1 + r2)^2)
    with np.errstate(divide="ignore", invalid="ignore"):
        two_gp = np.where(r > 0.0, (1.0 - r2) / (r * (1.0 + r2) ** 2), 0.0)
    return g * d_out + two_gp * np.sum(s * d_out, axis=1, keepdims=True) * s


def num_capsules(seq_len: int, k_min: int = 1, k_max: int = 8) -> int:
    """K = clamp(floor(log2(seq_len)), k_min, k_max), exact in integer arithmetic."""
    if not 1 <= k_min <= k_max:
        raise ConfigError(f"capsule bounds must satisfy 1 <= k_min <= k_max, got [{k_min}, {k_max}]")
    if seq_len < 1:
        raise DomainError(f"sequence length must be >= 1, got {seq_len}")
    return min(max(int(seq_len).bit_length() - 1, k_min), k_max)


def routing_logit(u: np.ndarray, bilinear: np.ndarray, c: np.ndarray) -> float:
    """Bilinear agreement u' M c between a capsule and a behaviour embedding."""
    h = bilinear.shape[0]
    if u.shape != (h,) or c.shape != (h,) or bilinear.shape != (h, h):
        raise DimensionError(
            f"routing_logit: incompatible shapes u={u.shape}, M={bilinear.shape}, c={c.shape}"
        )
    return float(u @ bilinear @ c)


@dataclass
class RoutingState:
    """Forward cache: everything the stop-gradient backward pass needs."""

    messages: np.ndarray        # V = C M^T, one row per behaviour (n, h)
    coefficients: np.ndarray    # A, final-iteration routing coefficients (n, K)
    raw_capsules: np.ndarray    # S = A^T V before squash (K, h)
    capsules: np.ndarray        # U = squash(S) rows (K, h)
    coefficient_trace: list = field(default_factory=list)


def routing_forward(behaviors: np.ndarray, params: RoutingParams, k: int,
                    rng: Rng | None = None, logits: np.ndarray | None = None,
                    frozen_coefficients: np.ndarray | None = None,
                    record_trace: bool = False) -> RoutingState:
    """Run behaviour-to-interest routing and keep the backward cache.

    Initial logits are drawn Normal(0, sigma^2) from rng unless given
    explicitly; with frozen_coefficients the iteration is skipped entirely
    and capsules are recomputed under fixed routing (the stop-gradient
    semantics used by the finite-difference suite).
    """
    c = np.asarray(behaviors, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1:
        raise DomainError(f"routing needs at least one behaviour vector, got shape {c.shape}")
    if c.shape[1] != params.dim:
        raise DimensionError(f"behaviour dim {c.shape[1]} != bilinear dim {params.dim}")
    if k < 1:
        raise ConfigError(f"capsule count must be >= 1, got {k}")
    n = c.shape[0]
    v = c @ params.bilinear.T

    if frozen_coefficients is not None:
        a = frozen_coefficients
        s = a.T @ v
        return RoutingState(messages=v, coefficients=a, raw_capsules=s, capsules=squash_rows(s))

    if logits is None:
        if rng is None:
            raise ConfigError("routing_forward needs an rng when logits are not supplied")
        logits = params.logit_init_sigma * rng.normal(size=(n, k))
    b = np.asarray(logits, dtype=np.float64)
    trace: list = []
    a = s = u = None
    for it in range(params.iterations):
        a = softmax_rows(b)
        if record_trace:
            trace.append(a.copy())
        s = a.T @ v
        u = squash_rows(s)
        if it < params.iterations - 1:
            update = v @ u.T
            b = update if params.update_mode == "assign" else b + update
    return RoutingState(messages=v, coefficients=a, raw_capsules=s, capsules=u,
                        coefficient_trace=trace)


def routing_backward(state: RoutingState, behaviors: np.ndarray, params: RoutingParams,
                     d_capsules: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward through the final iteration, coefficients held constant.

    Returns (d_bilinear, d_behaviors).
    """
    d_s = squash_backward_rows(state.raw_capsules, d_capsules)
    d_v = state.coefficients @ d_s
    d_bilinear = d_v.T @ behaviors
    d_behaviors = d_v @ params.bilinear
    return d_bilinear, d_behaviors


def dynamic_routing(behaviors: np.ndarray, params: RoutingParams, k: int,
                    rng: Rng) -> InterestCapsules:
    """Extract K interest capsules from behaviour embeddings (h x K columns)."""
    state = routing_forward(behaviors, params, k, rng=rng)
    return InterestCapsules(capsules=state.capsules.T.copy())


@dataclass
class AttentionState:
    dots: np.ndarray
    weights: np.ndarray


def attention_forward(capsule_rows: np.ndarray, candidate: np.ndarray,
                      p: int) -> tuple[np.ndarray, AttentionState]:
    """Label-aware attention: softmax over (u_j . c)^p, capsules as rows.

    Raw signed powers are used; with odd p a negative dot flips sign, which
    is logged as a configuration warning but computed as written.
    """
    if p < 1:
        raise ConfigError(f"attention exponent must be >= 1, got {p}")
    dots = capsule_rows @ candidate
    if p % 2 == 1 and np.any(dots < 0.0):
        log.warning("label-aware attention: odd exponent p=%d with negative dot products", p)
    weights = softmax(np.power(dots, p))
    attended = capsule_rows.T @ weights
    return attended, AttentionState(dots=dots, weights=weights)


def attention_backward(state: AttentionState, capsule_rows: np.ndarray,
                       candidate: np.ndarray, p: int,
                       d_attended: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (d_capsule_rows, d_candidate)."""
    d_w = capsule_rows @ d_attended
    d_z = softmax_backward(state.weights, d_w)
    d_dots = d_z * p * np.power(state.dots, p - 1)
    d_caps = np.outer(state.weights, d_attended) + np.outer(d_dots, candidate)
    d_candidate = capsule_rows.T @ d_dots
    return d_caps, d_candidate


def label_aware_attention(capsules: InterestCapsules, candidate: np.ndarray,
                          p: int) -> tuple[np.ndarray, np.ndarray]:
    """Attended interest vector i_u and the attention weights (for inspection)."""
    attended, state = attention_forward(capsules.capsules.T, candidate, p)
    return attended, state.weights


@dataclass
class InterestLossState:
    probs: np.ndarray  # softmax over [positive] + negatives scores


def interest_loss_forward(attended: np.ndarray, positive: np.ndarray,
                          negatives: np.ndarray) -> tuple[float, InterestLossState]:
    """Sampled-softmax NLL of the positive item under the attended interest."""
    scores = np.concatenate(([positive @ attended], negatives @ attended))
    m = np.max(scores)
    lse = m + np.log(np.sum(np.exp(scores - m)))
    probs = np.exp(scores - lse)
    return float(lse - scores[0]), InterestLossState(probs=probs)


def interest_loss_backward(state: InterestLossState, attended: np.ndarray,
                           positive: np.ndarray, negatives: np.ndarray,
                           d_loss: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_attended, d_positive, d_negatives)."""
    d_scores = state.probs.copy()
    d_scores[0] -= 1.0
    d_scores *= d_loss
    d_attended = d_scores[0] * positive + negatives.T @ d_scores[1:]
    d_positive = d_scores[0] * attended
    d_negatives = np.outer(d_scores[1:], attended)
    return d_attended, d_positive, d_negatives


def interest_loss(attended: np.ndarray, positive: np.ndarray,
                  negatives: np.ndarray) -> float:
    """-log( exp(pos . i_u) / (exp(pos . i_u) + sum_neg exp(neg . i_u)) ).

    Negatives must be non-empty and must not contain the positive item
    (label masking); per-batch loss is the mean over contributing samples.
    """
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim != 2 or negatives.shape[0] < 1:
        raise DomainError(f"interest loss needs at least one negative, got shape {negatives.shape}")
    for row in negatives:
        if np.array_equal(row, positive):
            raise MaskingViolationError("positive item present among sampled negatives")
    loss, _ = interest_loss_forward(attended, positive, negatives)
    return loss


def interest_item_scores(capsules: InterestCapsules, candidate: np.ndarray) -> np.ndarray:
    """Dot product of the candidate against every interest capsule (K scores)."""
    if candidate.shape != (capsules.capsules.shape[0],):
        raise DimensionError(
            f"candidate shape {candidate.shape} incompatible with capsules {capsules.capsules.shape}"
        )
    return candidate @ capsules.capsules
