"""Model checkpoints: every parameter, optimizer moments, and the config,
in one npz archive. Round trips are bit-exact (float64 in, float64 out).
"""

from __future__ import annotations

import json

import numpy as np

from .capsules import RoutingParams
from .embeddings import DualEmbeddingTable, EmbeddingTable, ItemEncoder
from .errors import DataFormatError, DimensionError
from .fileio import write_npz
from .models import CtrState, WideDeepModel, build_model
from .optim import Optimizer
from .rng import Rng
from .training import TrainConfig

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, state: CtrState, opt: Optimizer,
                    config: TrainConfig) -> None:
    arrays = {
        "format_version": np.array([CHECKPOINT_VERSION], dtype=np.int64),
        "config_json": np.array(json.dumps(config.to_mapping(), sort_keys=True)),
        "item_to_category": state.encoder.item_to_category.astype(np.int64),
        "opt/t": np.array([opt.t], dtype=np.int64),
    }
    for name, arr in state.param_items():
        arrays[f"param/{name}"] = arr
    for group, m, v in opt.state_items():
        arrays[f"opt/m/{group}"] = m
        arrays[f"opt/v/{group}"] = v
    write_npz(path, arrays)


def load_checkpoint(path: str):
    """Returns (state, optimizer, config) rebuilt exactly as saved."""
    with np.load(path, allow_pickle=False) as archive:
        try:
            version = int(archive["format_version"][0])
            if version != CHECKPOINT_VERSION:
                raise DataFormatError(
                    f"checkpoint {path} has format_version {version}, "
                    f"expected {CHECKPOINT_VERSION}")
            config = TrainConfig.from_mapping(json.loads(archive["config_json"].item()))

            item_table = DualEmbeddingTable(archive["param/item_orig"].copy(),
                                            archive["param/item_aux"].copy())
            cat_table = DualEmbeddingTable(archive["param/cat_orig"].copy(),
                                           archive["param/cat_aux"].copy())
            encoder = ItemEncoder(item_table, cat_table,
                                  archive["item_to_category"].astype(np.intp))
            profile_table = EmbeddingTable(archive["param/profile"].copy())
            routing = RoutingParams(bilinear=archive["param/capsule.bilinear"].copy(),
                                    iterations=config.routing_iterations,
                                    update_mode=config.routing_update)
            model = build_model(config.base_model, item_table.dim, profile_table.dim,
                                item_table.item_count, Rng(0))
            for name, arr in model.param_items():
                stored = archive[f"param/model.{name}"]
                if stored.shape != arr.shape:
                    raise DimensionError(
                        f"checkpoint param model.{name} has shape {stored.shape}, "
                        f"expected {arr.shape}")
                arr[...] = stored
            if isinstance(model, WideDeepModel):
                model.wide[...] = archive["param/model.wide"]

            state = CtrState(encoder=encoder, profile_table=profile_table,
                             routing=routing, model=model,
                             base_model=config.base_model, max_len=config.max_len)
            opt = Optimizer(config.optimizer, config.learning_rate, config.beta1,
                            config.beta2, config.eps)
            prefix = "opt/m/"
            groups = [k[len(prefix):] for k in archive.files if k.startswith(prefix)]
            opt.load_state(int(archive["opt/t"][0]),
                           [(g, archive[f"opt/m/{g}"], archive[f"opt/v/{g}"])
                            for g in groups])
        except KeyError as exc:
            raise DataFormatError(f"checkpoint {path} is missing entry {exc}") from exc
    return state, opt, config
