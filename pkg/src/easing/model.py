"""One full estimator: encoder -> decoder -> scaled (s_hat, z_hat) readout."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .config import DjeConfig, ScalingConfig
from .decoder import decode, init_decoder_params, scaler_vector
from .encoder import encode, init_encoder_params
from .graph import HetGraph, NodeFeatureSet


def init_model_params(store: ParamStore, prefix: str, cfg: DjeConfig,
                      n_edge_types: int, rng: np.random.Generator) -> None:
    init_encoder_params(store, prefix, cfg, n_edge_types, rng)
    init_decoder_params(store, prefix, cfg, rng)


def model_forward(store: ParamStore, prefix: str, graph: HetGraph,
                  features: NodeFeatureSet, cfg: DjeConfig, mode: str,
                  rng: np.random.Generator | None,
                  nodes: Sequence[int] | None = None,
                  scaler: np.ndarray | None = None
                  ) -> Tuple[Tensor, Tensor, np.ndarray]:
    """One stochastic (or deterministic, mode='off') pass of a single model.

    Returns (s_hat, z_hat, node_ids); the optional per-node scaler multiplies
    the importance estimates inside the pass so every consumer of s_hat sees
    the scaled value.
    """
    repr_ = encode(graph, features, store, prefix, cfg, mode, rng, nodes)
    s_hat, z_hat = decode(repr_.S, repr_.U, store, prefix, cfg, mode, rng)
    if scaler is not None:
        s_hat = ad.mul(s_hat, Tensor(scaler[repr_.nodes]))
    return s_hat, z_hat, repr_.nodes


def make_scaler(graph: HetGraph, features: NodeFeatureSet,
                cfg: ScalingConfig) -> np.ndarray | None:
    """Constant per-node output scaler, or None when scaling is disabled."""
    return scaler_vector(graph, features, cfg) if cfg.enabled else None
