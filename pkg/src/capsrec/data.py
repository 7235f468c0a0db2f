"""Dataset construction.

Three sources feed the trainer: a synthetic generator that plants
per-user interest groups (so learnability is known by construction), an
ingester for Amazon-reviews-style line-delimited JSON, and a JSON cache
for round-tripping built datasets. Splits are chronological per user:
last event to test, second-to-last to validation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .fileio import read_json, write_json
from .rng import Rng

logger = logging.getLogger(__name__)

OOV_TOKEN = "<oov>"
OOV_INDEX = 0
FORMAT_VERSION = 1
MIN_EVENTS = 3
MALFORMED_BUDGET = 0.01


class Vocabulary:
    """Token-to-index mapping with index 0 reserved for out-of-vocabulary."""

    def __init__(self):
        self._tokens = [OOV_TOKEN]
        self._index = {OOV_TOKEN: OOV_INDEX}

    def __len__(self) -> int:
        return len(self._tokens)

    def add(self, token: str) -> int:
        idx = self._index.get(token)
        if idx is None:
            idx = len(self._tokens)
            self._index[token] = idx
            self._tokens.append(token)
        return idx

    def index_of(self, token: str) -> int:
        return self._index.get(token, OOV_INDEX)

    def token_of(self, index: int) -> str:
        return self._tokens[index]

    @property
    def tokens(self) -> list:
        return list(self._tokens)

    @classmethod
    def from_tokens(cls, tokens: list) -> "Vocabulary":
        if not tokens or tokens[0] != OOV_TOKEN:
            raise DataFormatError(f"vocabulary must start with {OOV_TOKEN!r}")
        vocab = cls()
        for token in tokens[1:]:
            vocab.add(token)
        if len(vocab) != len(tokens):
            raise DataFormatError("vocabulary contains duplicate tokens")
        return vocab


@dataclass
class Vocabularies:
    users: Vocabulary
    items: Vocabulary
    categories: Vocabulary
    item_to_category: np.ndarray


@dataclass
class InteractionRecord:
    """One viewing/review event: user saw item (of category) at time ts."""

    user: str
    item: str
    category: str
    ts: int

    def __post_init__(self):
        if not self.user or not self.item or not self.category:
            raise DataFormatError("interaction record fields must be non-empty")
        if self.ts < 0:
            raise DataFormatError(f"interaction timestamp must be >= 0, got {self.ts}")


@dataclass
class Sample:
    """One CTR example: behaviour sequence, candidate item, click label."""

    user_index: int
    profile_index: int
    behaviors: list
    candidate: int
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataFormatError(f"label must be 0 or 1, got {self.label}")
        if len(self.behaviors) < 1:
            raise DataFormatError("behaviour sequence must be non-empty")
        if self.candidate in self.behaviors:
            raise DataFormatError(
                f"candidate {self.candidate} appears in its own behaviour sequence")


@dataclass
class Dataset:
    """Built samples plus the vocabularies they index into."""

    source: str
    users: Vocabulary
    items: Vocabulary
    categories: Vocabulary
    item_to_category: np.ndarray
    train: list
    valid: list
    test: list

    def splits(self):
        yield "train", self.train
        yield "valid", self.valid
        yield "test", self.test

    def validate(self) -> None:
        """Vocabulary closure: every index in every sample must resolve."""
        if self.item_to_category.shape != (len(self.items),):
            raise DataFormatError(
                f"item_to_category has {self.item_to_category.shape[0]} entries "
                f"for {len(self.items)} items")
        if np.any(self.item_to_category < 0) or np.any(self.item_to_category >= len(self.categories)):
            raise DataFormatError("item_to_category maps outside the category vocabulary")
        for name, samples in self.splits():
            for s in samples:
                indices = [s.candidate, *s.behaviors]
                if any(i < 0 or i >= len(self.items) for i in indices):
                    raise DataFormatError(f"{name} sample indexes outside the item vocabulary")
                if not (0 <= s.user_index < len(self.users)):
                    raise DataFormatError(f"{name} sample indexes outside the user vocabulary")
                if not (0 <= s.profile_index < len(self.users)):
                    raise DataFormatError(f"{name} sample profile index out of range")

    def summary(self) -> dict:
        return {
            "source": self.source,
            "users": len(self.users),
            "items": len(self.items),
            "categories": len(self.categories),
            "samples": {name: len(split) for name, split in self.splits()},
        }

    def save(self, path: str) -> None:
        self.validate()
        payload = {
            "format_version": FORMAT_VERSION,
            "source": self.source,
            "users": self.users.tokens,
            "items": self.items.tokens,
            "categories": self.categories.tokens,
            "item_to_category": self.item_to_category.tolist(),
            "splits": {
                name: [[s.user_index, s.profile_index, s.candidate, s.label, s.behaviors]
                       for s in split]
                for name, split in self.splits()
            },
        }
        write_json(path, payload)

    @classmethod
    def load(cls, path: str) -> "Dataset":
        payload = read_json(path)
        version = payload.get("format_version")
        if version != FORMAT_VERSION:
            raise DataFormatError(
                f"dataset cache {path} has format_version {version!r}, expected {FORMAT_VERSION}")
        splits = {}
        for name in ("train", "valid", "test"):
            rows = payload["splits"][name]
            splits[name] = [Sample(u, p, list(b), c, y) for u, p, c, y, b in rows]
        dataset = cls(
            source=payload["source"],
            users=Vocabulary.from_tokens(payload["users"]),
            items=Vocabulary.from_tokens(payload["items"]),
            categories=Vocabulary.from_tokens(payload["categories"]),
            item_to_category=np.asarray(payload["item_to_category"], dtype=np.intp),
            train=splits["train"],
            valid=splits["valid"],
            test=splits["test"],
        )
        dataset.validate()
        return dataset


@dataclass
class SyntheticSpec:
    """Planted-interest generator settings.

    Items are partitioned into num_interests groups; each user draws
    interests_per_user of them. Behaviour items come from the user's own
    groups except with probability noise; positives come from groups the
    user both owns and has recently acted in, negatives from groups the
    user does not own. Each round emits one positive (plus negatives) per
    user and appends the positive to the user's history; the last round
    becomes the test split, the one before it validation.
    """

    num_users: int = 2000
    num_items: int = 500
    num_interests: int = 10
    interests_per_user: int = 3
    seq_len: int = 20
    neg_ratio: int = 1
    noise: float = 0.1
    rounds: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.num_users < 1:
            raise ConfigError(f"num_users must be >= 1, got {self.num_users}")
        if self.num_interests < 1:
            raise ConfigError(f"num_interests must be >= 1, got {self.num_interests}")
        if self.num_items < self.num_interests:
            raise ConfigError(
                f"{self.num_items} items cannot fill {self.num_interests} interest groups")
        if not 1 <= self.interests_per_user <= self.num_interests:
            raise ConfigError(
                f"interests_per_user must be in [1, {self.num_interests}], "
                f"got {self.interests_per_user}")
        if self.seq_len < 2:
            raise ConfigError(f"seq_len must be >= 2, got {self.seq_len}")
        if self.neg_ratio < 1:
            raise ConfigError(f"neg_ratio must be >= 1, got {self.neg_ratio}")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError(f"noise must be in [0, 1], got {self.noise}")
        if self.rounds < 3:
            raise ConfigError(
                f"rounds must be >= 3 (train, validation, test), got {self.rounds}")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SyntheticSpec":
        spec = cls()
        converters = {name: type(getattr(spec, name)) for name in spec.__dataclass_fields__}
        for key, value in mapping.items():
            conv = converters.get(key)
            if conv is None:
                raise ConfigError(f"unknown synthetic data key {key!r}")
            try:
                setattr(spec, key, conv(value))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
        spec.validate()
        return spec


def _draw_from(rng: Rng, pool: list) -> int:
    return pool[int(rng.integers(0, len(pool)))]


def _draw_behaviour(rng: Rng, spec: SyntheticSpec, interests: list, group_items: list) -> int:
    if spec.noise > 0.0 and rng.uniform() < spec.noise:
        return 1 + int(rng.integers(0, spec.num_items))
    group = interests[int(rng.integers(0, len(interests)))]
    return _draw_from(rng, group_items[group])


def _draw_positive(rng: Rng, spec: SyntheticSpec, interests: list, window: list,
                   window_set: set, group_items: list, item_group: np.ndarray) -> int:
    window_groups = {int(item_group[i]) for i in window}
    eligible = sorted(window_groups.intersection(interests)) or list(interests)
    pool = [i for g in eligible for i in group_items[g] if i not in window_set]
    if not pool:
        pool = [i for i in range(1, spec.num_items + 1) if i not in window_set]
    if not pool:
        raise ConfigError("synthetic spec leaves no item outside a behaviour window")
    return _draw_from(rng, pool)


def _draw_negative(rng: Rng, spec: SyntheticSpec, interests: list, excluded: set,
                   group_items: list) -> int:
    other = [g for g in range(spec.num_interests) if g not in interests]
    pool = [i for g in other for i in group_items[g] if i not in excluded]
    if not pool:
        pool = [i for i in range(1, spec.num_items + 1) if i not in excluded]
    if not pool:
        raise ConfigError("synthetic spec leaves no item to sample as a negative")
    return _draw_from(rng, pool)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic planted-interest dataset; same spec (incl. seed) → same bytes."""
    spec.validate()
    rng = Rng(spec.seed)

    users = Vocabulary()
    items = Vocabulary()
    categories = Vocabulary()
    for g in range(spec.num_interests):
        categories.add(f"c{g}")
    group_items = [[] for _ in range(spec.num_interests)]
    item_group = np.zeros(spec.num_items + 1, dtype=np.intp)
    for i in range(spec.num_items):
        group = i % spec.num_interests
        idx = items.add(f"i{i}")
        group_items[group].append(idx)
        item_group[idx] = group
    item_to_category = np.zeros(len(items), dtype=np.intp)
    for idx in range(1, len(items)):
        item_to_category[idx] = categories.index_of(f"c{int(item_group[idx])}")

    train, valid, test = [], [], []
    for u in range(spec.num_users):
        uidx = users.add(f"u{u}")
        interests = sorted(
            int(g) for g in rng.permutation(spec.num_interests)[:spec.interests_per_user])
        stream = [_draw_behaviour(rng, spec, interests, group_items)
                  for _ in range(spec.seq_len)]
        for r in range(spec.rounds):
            window = stream[-spec.seq_len:]
            window_set = set(window)
            pos = _draw_positive(rng, spec, interests, window, window_set,
                                 group_items, item_group)
            dest = test if r == spec.rounds - 1 else valid if r == spec.rounds - 2 else train
            dest.append(Sample(uidx, uidx, list(window), pos, 1))
            excluded = window_set | {pos}
            for _ in range(spec.neg_ratio):
                neg = _draw_negative(rng, spec, interests, excluded, group_items)
                dest.append(Sample(uidx, uidx, list(window), neg, 0))
            stream.append(pos)

    dataset = Dataset("synthetic", users, items, categories, item_to_category,
                      train, valid, test)
    dataset.validate()
    return dataset


def _first_category(value):
    """Amazon metadata nests categories as a list of paths; take the head of the first."""
    v = value
    while isinstance(v, list):
        if not v:
            return None
        v = v[0]
    if isinstance(v, str) and v:
        return v
    return None


def _parse_lines(path: str, extract, what: str) -> list:
    """Line-delimited JSON with a tolerated malformed-line budget."""
    rows = []
    total = 0
    malformed = 0
    with open(path, "r", encoding="utf-8") as handle:
        for raw in handle:
            line = raw.strip()
            if not line:
                continue
            total += 1
            try:
                parsed = extract(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                parsed = None
            if parsed is None:
                malformed += 1
                continue
            rows.append(parsed)
    if total and malformed / total > MALFORMED_BUDGET:
        raise DataFormatError(
            f"{malformed} of {total} {what} lines malformed, over the "
            f"{MALFORMED_BUDGET:.0%} budget")
    if malformed:
        logger.warning("skipped %d malformed %s lines in %s", malformed, what, path)
    return rows


def _extract_review(obj):
    user = obj["reviewerID"]
    item = obj["asin"]
    ts = obj["unixReviewTime"]
    if not isinstance(user, str) or not user or not isinstance(item, str) or not item:
        return None
    if isinstance(ts, bool) or not isinstance(ts, int) or ts < 0:
        return None
    return user, item, ts


def _extract_metadata(obj):
    item = obj["asin"]
    if not isinstance(item, str) or not item:
        return None
    category = _first_category(obj.get("categories"))
    return item, category or "unknown"


def ingest_amazon(reviews_path: str, metadata_path: "str | None" = None,
                  min_events: int = MIN_EVENTS):
    """Read review events, attach categories, drop sparse users.

    Returns (records, vocabularies): records grouped per user in file
    order, each user's events sorted by timestamp (stable, so equal
    timestamps keep file order), users with fewer than min_events gone.
    """
    if min_events < 1:
        raise ConfigError(f"min_events must be >= 1, got {min_events}")
    item_category = {}
    if metadata_path is not None:
        for item, category in _parse_lines(metadata_path, _extract_metadata, "metadata"):
            item_category.setdefault(item, category)

    by_user: dict = {}
    for user, item, ts in _parse_lines(reviews_path, _extract_review, "review"):
        by_user.setdefault(user, []).append((item, ts))

    records = []
    for user, events in by_user.items():
        if len(events) < min_events:
            continue
        events.sort(key=lambda e: e[1])
        for item, ts in events:
            records.append(InteractionRecord(
                user=user, item=item, category=item_category.get(item, "unknown"), ts=ts))

    users = Vocabulary()
    items = Vocabulary()
    categories = Vocabulary()
    item_cat_index = {}
    for record in records:
        users.add(record.user)
        iidx = items.add(record.item)
        cidx = categories.add(record.category)
        item_cat_index.setdefault(iidx, cidx)
    item_to_category = np.zeros(len(items), dtype=np.intp)
    for iidx, cidx in item_cat_index.items():
        item_to_category[iidx] = cidx
    return records, Vocabularies(users, items, categories, item_to_category)


def _sample_negative(rng: Rng, item_count: int, excluded: set) -> int:
    if item_count <= 1:
        raise DataFormatError("item vocabulary is empty, cannot sample negatives")
    for _ in range(100):
        idx = 1 + int(rng.integers(0, item_count - 1))
        if idx not in excluded:
            return idx
    pool = [i for i in range(1, item_count) if i not in excluded]
    if not pool:
        raise DataFormatError("user history covers every item, no negatives available")
    return _draw_from(rng, pool)


def build_samples(records: list, vocabs: Vocabularies, max_len: int,
                  neg_ratio: int = 1, rng: "Rng | None" = None) -> Dataset:
    """Leave-last-out samples: last event tests, second-to-last validates.

    Every earlier event becomes a train positive whose behaviour sequence
    is its own chronological prefix (truncated to the most recent max_len
    items). Each positive is paired with neg_ratio negatives drawn
    uniformly from items outside the user's whole history. Positives
    whose candidate re-appears inside its own window are dropped, since a
    sample may not contain its candidate.
    """
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    if neg_ratio < 1:
        raise ConfigError(f"neg_ratio must be >= 1, got {neg_ratio}")
    rng = rng or Rng(0)

    sequences: dict = {}
    for record in records:
        uidx = vocabs.users.index_of(record.user)
        sequences.setdefault(uidx, []).append(vocabs.items.index_of(record.item))

    item_count = len(vocabs.items)
    train, valid, test = [], [], []
    dropped = 0
    for uidx, seq in sequences.items():
        history = set(seq)
        for t in range(1, len(seq)):
            window = seq[max(0, t - max_len):t]
            candidate = seq[t]
            dest = test if t == len(seq) - 1 else valid if t == len(seq) - 2 else train
            if candidate in window:
                dropped += 1
                continue
            dest.append(Sample(uidx, uidx, list(window), candidate, 1))
            for _ in range(neg_ratio):
                neg = _sample_negative(rng, item_count, history)
                dest.append(Sample(uidx, uidx, list(window), neg, 0))
    if dropped:
        logger.warning("dropped %d positives repeating an item still in their window", dropped)

    dataset = Dataset("amazon", vocabs.users, vocabs.items, vocabs.categories,
                      vocabs.item_to_category, train, valid, test)
    dataset.validate()
    return dataset
