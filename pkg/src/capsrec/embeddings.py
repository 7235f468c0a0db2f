"""Dual-segment embedding tables and gradient bookkeeping.

Item vectors are the concatenation of an original segment (owned by the
main CTR task) and an auxiliary segment (shaped by the interest task).
Gradients into the auxiliary segment are accumulated separately per loss
source so they can be convex-mixed with ratio delta before the optimizer
runs. The original segment only ever sees main-loss gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, SequencingError
from .rng import Rng

INIT_SCALE = 0.05


class EmbeddingTable:
    """Plain single-segment table (user profiles). Row 0 is the OOV row."""

    def __init__(self, rows: np.ndarray, oov_index: int = 0):
        self.rows = rows
        self.oov_index = oov_index

    @classmethod
    def initialize(cls, count: int, dim: int, rng: Rng) -> "EmbeddingTable":
        return cls(rng.uniform(-INIT_SCALE, INIT_SCALE, size=(count, dim)))

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def lookup(self, index: int) -> np.ndarray:
        return self.rows[index]


class DualEmbeddingTable:
    """Per-item original + auxiliary segments with a reserved OOV row."""

    def __init__(self, orig_rows: np.ndarray, aux_rows: np.ndarray, oov_index: int = 0):
        if orig_rows.shape[0] != aux_rows.shape[0]:
            raise DimensionError(
                f"segment row counts differ: {orig_rows.shape} vs {aux_rows.shape}"
            )
        self.orig_rows = orig_rows
        self.aux_rows = aux_rows
        self.oov_index = oov_index

    @classmethod
    def initialize(cls, count: int, d_orig: int, d_aux: int, rng: Rng) -> "DualEmbeddingTable":
        orig = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(count, d_orig))
        aux = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(count, d_aux))
        return cls(orig, aux)

    @property
    def item_count(self) -> int:
        return self.orig_rows.shape[0]

    @property
    def d_orig(self) -> int:
        return self.orig_rows.shape[1]

    @property
    def d_aux(self) -> int:
        return self.aux_rows.shape[1]

    @property
    def dim(self) -> int:
        return self.d_orig + self.d_aux

    def lookup(self, index: int) -> np.ndarray:
        """Concatenated [original || auxiliary] vector of one row."""
        return np.concatenate([self.orig_rows[index], self.aux_rows[index]])

    def lookup_orig(self, index: int) -> np.ndarray:
        return self.orig_rows[index]

    def lookup_aux(self, index: int) -> np.ndarray:
        return self.aux_rows[index]

    def lookup_many(self, indices: np.ndarray) -> np.ndarray:
        return np.concatenate([self.orig_rows[indices], self.aux_rows[indices]], axis=1)

    def lookup_aux_many(self, indices: np.ndarray) -> np.ndarray:
        return self.aux_rows[indices]


class ItemEncoder:
    """Composes the item vector as item row + category row, per segment.

    The category of an item is a second embedding row summed onto the item
    row, which keeps associated-information signal inside the same dual
    segment structure. Gradients scatter into both rows.
    """

    def __init__(self, item_table: DualEmbeddingTable, cat_table: DualEmbeddingTable,
                 item_to_category: np.ndarray):
        if item_table.d_orig != cat_table.d_orig or item_table.d_aux != cat_table.d_aux:
            raise DimensionError(
                f"item/category segment dims differ: "
                f"({item_table.d_orig},{item_table.d_aux}) vs ({cat_table.d_orig},{cat_table.d_aux})"
            )
        self.item_table = item_table
        self.cat_table = cat_table
        self.item_to_category = np.asarray(item_to_category, dtype=np.intp)

    @property
    def dim(self) -> int:
        return self.item_table.dim

    @property
    def d_aux(self) -> int:
        return self.item_table.d_aux

    def embed(self, ids: np.ndarray) -> np.ndarray:
        """(n, d_orig + d_aux) concatenated vectors for the given item ids."""
        cats = self.item_to_category[ids]
        orig = self.item_table.orig_rows[ids] + self.cat_table.orig_rows[cats]
        aux = self.item_table.aux_rows[ids] + self.cat_table.aux_rows[cats]
        return np.concatenate([orig, aux], axis=1)

    def embed_aux(self, ids: np.ndarray) -> np.ndarray:
        """(n, d_aux) auxiliary-segment vectors: the interest-space item embeddings."""
        cats = self.item_to_category[ids]
        return self.item_table.aux_rows[ids] + self.cat_table.aux_rows[cats]


def mix_auxiliary_gradient(g_aa: np.ndarray, g_am: np.ndarray, delta: float) -> np.ndarray:
    """(1-delta) * g_aa + delta * g_am, elementwise.

    g_aa is the auxiliary-loss gradient into the auxiliary segment, g_am the
    main-loss gradient into the same rows. The endpoints return exact copies
    so that delta in {0, 1} reproduces the single-source update bit for bit.
    """
    if not 0.0 <= delta <= 1.0:
        raise ConfigError(f"gradient mix ratio delta={delta} outside [0, 1]")
    if g_aa.shape != g_am.shape:
        raise DimensionError(f"mix_auxiliary_gradient: shape mismatch {g_aa.shape} vs {g_am.shape}")
    if delta == 0.0:
        return g_aa.copy()
    if delta == 1.0:
        return g_am.copy()
    return (1.0 - delta) * g_aa + delta * g_am


@dataclass
class DualTableGrads:
    """Batch gradient accumulators for one dual-segment table.

    aux_mixed is populated only by mix(), never by backward passes.
    """

    orig_main: np.ndarray
    aux_from_main: np.ndarray
    aux_from_auxiliary: np.ndarray
    aux_mixed: np.ndarray
    touched_orig: set = field(default_factory=set)
    touched_aux: set = field(default_factory=set)
    mixed: bool = False

    @classmethod
    def for_table(cls, table: DualEmbeddingTable) -> "DualTableGrads":
        return cls(
            orig_main=np.zeros_like(table.orig_rows),
            aux_from_main=np.zeros_like(table.aux_rows),
            aux_from_auxiliary=np.zeros_like(table.aux_rows),
            aux_mixed=np.zeros_like(table.aux_rows),
        )

    def zero(self) -> None:
        if self.touched_orig:
            rows = sorted(self.touched_orig)
            self.orig_main[rows] = 0.0
            self.touched_orig.clear()
        if self.touched_aux:
            rows = sorted(self.touched_aux)
            self.aux_from_main[rows] = 0.0
            self.aux_from_auxiliary[rows] = 0.0
            self.aux_mixed[rows] = 0.0
            self.touched_aux.clear()
        self.mixed = False

    def add_main(self, ids: np.ndarray, g_orig: np.ndarray, g_aux: np.ndarray) -> None:
        np.add.at(self.orig_main, ids, g_orig)
        np.add.at(self.aux_from_main, ids, g_aux)
        self.touched_orig.update(ids.tolist())
        self.touched_aux.update(ids.tolist())

    def add_auxiliary(self, ids: np.ndarray, g_aux: np.ndarray) -> None:
        np.add.at(self.aux_from_auxiliary, ids, g_aux)
        self.touched_aux.update(ids.tolist())

    def mix(self, delta: float) -> None:
        if self.touched_aux:
            rows = sorted(self.touched_aux)
            self.aux_mixed[rows] = mix_auxiliary_gradient(
                self.aux_from_auxiliary[rows], self.aux_from_main[rows], delta
            )
        self.mixed = True


@dataclass
class SingleTableGrads:
    main: np.ndarray
    touched: set = field(default_factory=set)

    @classmethod
    def for_table(cls, table: EmbeddingTable) -> "SingleTableGrads":
        return cls(main=np.zeros_like(table.rows))

    def zero(self) -> None:
        if self.touched:
            self.main[sorted(self.touched)] = 0.0
            self.touched.clear()

    def add(self, ids: np.ndarray, g: np.ndarray) -> None:
        np.add.at(self.main, ids, g)
        self.touched.update(ids.tolist())


def scatter_encoder_main(encoder: ItemEncoder, item_grads: DualTableGrads,
                         cat_grads: DualTableGrads, ids: np.ndarray, g: np.ndarray) -> None:
    """Scatter main-loss gradients of concatenated item vectors into both tables."""
    do = encoder.item_table.d_orig
    cats = encoder.item_to_category[ids]
    item_grads.add_main(ids, g[:, :do], g[:, do:])
    cat_grads.add_main(cats, g[:, :do], g[:, do:])


def scatter_encoder_aux(encoder: ItemEncoder, item_grads: DualTableGrads,
                        cat_grads: DualTableGrads, ids: np.ndarray, g_aux: np.ndarray) -> None:
    """Scatter auxiliary-loss gradients of interest-space vectors into both tables."""
    cats = encoder.item_to_category[ids]
    item_grads.add_auxiliary(ids, g_aux)
    cat_grads.add_auxiliary(cats, g_aux)


def apply_sparse_update(table: DualEmbeddingTable, grads: DualTableGrads, opt,
                        group: str) -> None:
    """Optimizer step on the rows touched this batch, and only those.

    Original rows update from the main-loss accumulator, auxiliary rows from
    the mixed accumulator; stepping before mix() ran is a sequencing error.
    """
    if grads.touched_orig:
        rows = np.fromiter(sorted(grads.touched_orig), dtype=np.intp)
        opt.update_rows(f"{group}_orig", table.orig_rows, rows, grads.orig_main[rows])
    if grads.touched_aux:
        if not grads.mixed:
            raise SequencingError(f"{group}: auxiliary rows updated before gradient mixing")
        rows = np.fromiter(sorted(grads.touched_aux), dtype=np.intp)
        opt.update_rows(f"{group}_aux", table.aux_rows, rows, grads.aux_mixed[rows])


def apply_single_update(table: EmbeddingTable, grads: SingleTableGrads, opt, group: str) -> None:
    if grads.touched:
        rows = np.fromiter(sorted(grads.touched), dtype=np.intp)
        opt.update_rows(group, table.rows, rows, grads.main[rows])


class GradientBuffers:
    """All gradient accumulators for one training batch.

    Dense parameters (bilinear map, MLP weights) accumulate into full-size
    arrays keyed by name; embedding tables accumulate sparsely.
    """

    def __init__(self, item: DualTableGrads, cat: DualTableGrads, profile: SingleTableGrads,
                 dense: dict, wide: "SingleTableGrads | None" = None):
        self.item = item
        self.cat = cat
        self.profile = profile
        self.dense = dense
        self.wide = wide
        self._views: dict = {}

    @classmethod
    def for_tables(cls, item_table: DualEmbeddingTable, cat_table: DualEmbeddingTable,
                   profile_table: EmbeddingTable, dense_items,
                   wide: "np.ndarray | None" = None) -> "GradientBuffers":
        return cls(
            item=DualTableGrads.for_table(item_table),
            cat=DualTableGrads.for_table(cat_table),
            profile=SingleTableGrads.for_table(profile_table),
            dense={name: np.zeros_like(arr) for name, arr in dense_items},
            wide=None if wide is None else SingleTableGrads(main=np.zeros_like(wide)),
        )

    def dense_for(self, prefix: str) -> dict:
        view = self._views.get(prefix)
        if view is None:
            view = {name[len(prefix):]: arr for name, arr in self.dense.items()
                    if name.startswith(prefix)}
            self._views[prefix] = view
        return view

    def zero(self) -> None:
        for arr in self.dense.values():
            arr.fill(0.0)
        self.item.zero()
        self.cat.zero()
        self.profile.zero()
        if self.wide is not None:
            self.wide.zero()

    def mix(self, delta: float) -> None:
        self.item.mix(delta)
        self.cat.mix(delta)
