"""Save/restore whole models (parameters + run metadata) via the binary
checkpoint container. Meta entries ride along as reserved "meta/" arrays.
"""

from __future__ import annotations

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ValidationError
from .geo import GridSpec, ZScoreParams
from .pretrain import ModelConfig, PretrainModel
from .stmodel import RoadVocab, SupervisedModel

_CONFIG_FIELDS = ("d_model", "encoder_layers", "decoder_layers", "n_heads",
                  "ffn_mult", "gat_layers", "d_transfer", "n_slots",
                  "mask_rate", "mean_span", "k_balance", "loss_on_unmasked",
                  "plain_aggregation", "hierarchical_tuples", "use_st_factor")


def _config_vector(config: ModelConfig) -> np.ndarray:
    return np.array([float(getattr(config, f)) for f in _CONFIG_FIELDS])


def _config_from_vector(vec: np.ndarray) -> ModelConfig:
    kwargs = {}
    for name, value in zip(_CONFIG_FIELDS, vec):
        if name in ("mask_rate", "mean_span", "k_balance"):
            kwargs[name] = float(value)
        elif name in ("loss_on_unmasked", "plain_aggregation",
                      "hierarchical_tuples", "use_st_factor"):
            kwargs[name] = bool(value)
        else:
            kwargs[name] = int(value)
    return ModelConfig(**kwargs)


def _grid_vector(grid: GridSpec) -> np.ndarray:
    return np.array([grid.min_lon, grid.max_lon, grid.min_lat, grid.max_lat,
                     grid.cell_size])


def _grid_from_vector(vec: np.ndarray) -> GridSpec:
    return GridSpec(min_lon=vec[0], max_lon=vec[1], min_lat=vec[2], max_lat=vec[3],
                    cell_size=vec[4])


def _common_meta(config: ModelConfig, grid: GridSpec, zscore: ZScoreParams,
                 n_cells: int) -> dict[str, np.ndarray]:
    return {
        "meta/config": _config_vector(config),
        "meta/grid": _grid_vector(grid),
        "meta/zscore_mean": zscore.mean,
        "meta/zscore_std": zscore.std,
        "meta/n_cells": np.array([float(n_cells)]),
    }


def save_pretrain(path, model: PretrainModel, grid: GridSpec,
                  zscore: ZScoreParams) -> None:
    arrays = _common_meta(model.config, grid, zscore, model.n_cells)
    for name, p in model.named_parameters().items():
        arrays[name] = p.data
    save_checkpoint(path, arrays)


def _restore_params(named, arrays, path):
    for name, p in named.items():
        if name not in arrays:
            raise ValidationError(f"checkpoint {path} missing parameter '{name}'")
        if arrays[name].shape != p.data.shape:
            raise ValidationError(
                f"checkpoint {path}: shape {arrays[name].shape} != {p.data.shape} for '{name}'")
        p.data = arrays[name].copy()


def load_pretrain(path) -> tuple[PretrainModel, GridSpec, ZScoreParams]:
    arrays = load_checkpoint(path)
    config = _config_from_vector(arrays["meta/config"])
    grid = _grid_from_vector(arrays["meta/grid"])
    zscore = ZScoreParams(mean=arrays["meta/zscore_mean"], std=arrays["meta/zscore_std"])
    n_cells = int(arrays["meta/n_cells"][0])
    if n_cells != grid.n_cells:
        raise ValidationError(f"checkpoint {path}: cell count disagrees with grid")
    model = PretrainModel(np.random.default_rng(0), config, n_cells)
    _restore_params(model.named_parameters(), arrays, path)
    return model, grid, zscore


def save_supervised(path, model: SupervisedModel, grid: GridSpec,
                    zscore: ZScoreParams) -> None:
    arrays = _common_meta(model.config, grid, zscore, model.pretrained.n_cells)
    arrays["meta/vocab_ids"] = np.asarray(model.vocab.ids, dtype=np.float64)
    arrays["meta/dist_boundaries"] = model.dist_table.boundaries
    arrays["meta/time_boundaries"] = model.time_table.boundaries
    for name, p in model.named_parameters().items():
        arrays[name] = p.data
    save_checkpoint(path, arrays)


def load_supervised(path) -> tuple[SupervisedModel, GridSpec, ZScoreParams]:
    arrays = load_checkpoint(path)
    config = _config_from_vector(arrays["meta/config"])
    grid = _grid_from_vector(arrays["meta/grid"])
    zscore = ZScoreParams(mean=arrays["meta/zscore_mean"], std=arrays["meta/zscore_std"])
    n_cells = int(arrays["meta/n_cells"][0])
    vocab = RoadVocab([int(v) for v in arrays["meta/vocab_ids"]])
    pre = PretrainModel(np.random.default_rng(0), config, n_cells)
    dist_b = arrays["meta/dist_boundaries"]
    time_b = arrays["meta/time_boundaries"]
    model = SupervisedModel(np.random.default_rng(0), config, pre, vocab,
                            dist_max=float(dist_b[-1]), time_max=float(time_b[-1]))
    model.dist_table.boundaries = dist_b
    model.time_table.boundaries = time_b
    _restore_params(model.named_parameters(), arrays, path)
    return model, grid, zscore
