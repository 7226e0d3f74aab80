"""Distribution decoder: self-attention over the N rows of each node's mean
and covariance matrices, a Frobenius readout to (importance, uncertainty),
and the auxiliary output scaling by degree centrality and textual entropy.

The two streams (mean S and covariance U) share the attention projections by
default but keep separate adaptive FFN and layer-norm parameters.  The
attention divisor stays sqrt(d) even though rows have width 2d, matching the
readout definition this module implements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .config import DjeConfig, ScalingConfig
from .graph import HetGraph, NodeFeatureSet

STREAMS = ("s", "u")


@dataclass(frozen=True)
class Estimate:
    """Joint point estimate for one node: importance and (log-scale,
    unbounded) uncertainty.  The uncertainty is exponentiated only inside
    losses."""

    s_hat: float
    z_hat: float


def init_decoder_params(store: ParamStore, prefix: str, cfg: DjeConfig,
                        rng: np.random.Generator) -> None:
    two_d = 2 * cfg.d

    def w(shape):
        return rng.normal(scale=0.02, size=shape)

    for l in range(cfg.L):
        layer = f"{prefix}dec.layer{l}"
        if cfg.share_decoder_qkv:
            for name in ("WQ", "WK", "WV"):
                store.add(f"{layer}.{name}", w((two_d, two_d)))
        else:
            for stream in STREAMS:
                for name in ("WQ", "WK", "WV"):
                    store.add(f"{layer}.{stream}.{name}", w((two_d, two_d)))
        for stream in STREAMS:
            base = f"{layer}.{stream}"
            store.add(f"{base}.W1", w((two_d, two_d)))
            store.add(f"{base}.W2", w((two_d, two_d)))
            store.add(f"{base}.ln1.gain", np.ones(two_d))
            store.add(f"{base}.ln1.bias", np.zeros(two_d))
            store.add(f"{base}.ln2.gain", np.ones(two_d))
            store.add(f"{base}.ln2.bias", np.zeros(two_d))
    store.add(f"{prefix}dec.Ws", w((cfg.N, two_d)))
    store.add(f"{prefix}dec.Wz", w((cfg.N, two_d)))


def _qkv_name(prefix: str, layer: int, stream: str, which: str,
              cfg: DjeConfig) -> str:
    if cfg.share_decoder_qkv:
        return f"{prefix}dec.layer{layer}.{which}"
    return f"{prefix}dec.layer{layer}.{stream}.{which}"


def dsa(X: Tensor, store: ParamStore, prefix: str, cfg: DjeConfig,
        layer: int, stream: str) -> Tensor:
    """Distribution self-attention over the N rows of each (N, 2d) matrix;
    queries/keys/values pass through ELU before the softmax mix."""
    Q = ad.elu(ad.matmul(X, store[_qkv_name(prefix, layer, stream, "WQ", cfg)]))
    K = ad.elu(ad.matmul(X, store[_qkv_name(prefix, layer, stream, "WK", cfg)]))
    V = ad.elu(ad.matmul(X, store[_qkv_name(prefix, layer, stream, "WV", cfg)]))
    scores = ad.mul(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(cfg.d))
    return ad.matmul(ad.softmax_rows(scores), V)


def _adaptive_ffn(X: Tensor, store: ParamStore, base: str) -> Tensor:
    return ad.elu(ad.matmul(ad.elu(ad.matmul(X, store[f"{base}.W1"])),
                            store[f"{base}.W2"]))


def decoder_layer(S: Tensor, U: Tensor, store: ParamStore, prefix: str,
                  cfg: DjeConfig, layer: int, mode: str,
                  rng: np.random.Generator | None) -> Tuple[Tensor, Tensor]:
    """One decoding block per stream: DSA and adaptive FFN, each with
    dropout, residual connection, and layer normalization."""
    outputs = []
    for stream, X in (("s", S), ("u", U)):
        base = f"{prefix}dec.layer{layer}.{stream}"
        att = ad.dropout(dsa(X, store, prefix, cfg, layer, stream),
                         cfg.dropout, rng, mode)
        hidden = ad.layer_norm(ad.add(X, att), store[f"{base}.ln1.gain"],
                               store[f"{base}.ln1.bias"])
        ffn = ad.dropout(_adaptive_ffn(hidden, store, base),
                         cfg.dropout, rng, mode)
        outputs.append(ad.layer_norm(ad.add(hidden, ffn),
                                     store[f"{base}.ln2.gain"],
                                     store[f"{base}.ln2.bias"]))
    return outputs[0], outputs[1]


def decode(S: Tensor, U: Tensor, store: ParamStore, prefix: str,
           cfg: DjeConfig, mode: str, rng: np.random.Generator | None = None
           ) -> Tuple[Tensor, Tensor]:
    """Run L decoder layers then read out scalars per node via the
    elementwise inner product with the two learned (N, 2d) matrices.

    Accepts batched (b, N, 2d) inputs and returns two (b,) tensors.
    """
    for l in range(cfg.L):
        S, U = decoder_layer(S, U, store, prefix, cfg, l, mode, rng)
    b = S.data.shape[0]
    Ws = ad.reshape(store[f"{prefix}dec.Ws"], (1, cfg.N, 2 * cfg.d))
    Wz = ad.reshape(store[f"{prefix}dec.Wz"], (1, cfg.N, 2 * cfg.d))
    s_hat = ad.sum_axis(ad.sum_axis(ad.mul(Ws, S), -1), -1)
    z_hat = ad.sum_axis(ad.sum_axis(ad.mul(Wz, U), -1), -1)
    assert s_hat.data.shape == (b,)
    return s_hat, z_hat


# ---------------------------------------------------------------------------
# auxiliary scaling: log degree centrality + accumulated textual relative
# entropy, multiplying the importance estimate (uncertainty untouched)
# ---------------------------------------------------------------------------

def cen(graph: HetGraph, x: int, delta: float = 1e-4) -> float:
    """ln(#distinct file-sourced in-neighbors + delta); the injected self
    edge does not count, so an isolated node scores ln(delta)."""
    return math.log(len(graph.file_in_neighbors(x)) + delta)


def _row_softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def rent(graph: HetGraph, textual: np.ndarray, x: int,
         delta: float = 1e-4) -> float:
    """ln(sum over file in-neighbors of KL(Q_x || Q_y) + delta) where Q is
    the row-softmax of the textual features.  KL terms are non-negative, so
    the log argument is at least delta."""
    qx = _row_softmax(textual[x])
    total = 0.0
    for y in graph.file_in_neighbors(x):
        qy = _row_softmax(textual[y])
        total += float(np.sum(qx * np.log(qx / qy)))
    return math.log(total + delta)


def scaler_vector(graph: HetGraph, features: NodeFeatureSet,
                  cfg: ScalingConfig) -> np.ndarray:
    """Per-node constant mu1*CEN + mu2*RENT; all ones when disabled.

    The scaler depends only on fixed inputs, so treating it as a constant in
    the differentiated forward pass is exact.
    """
    if not cfg.enabled:
        return np.ones(graph.node_count)
    # vectorized over nodes: KL(Q_x||Q_y) = sum_j Q_x (log Q_x - log Q_y)
    t = features.textual
    shifted = t - t.max(axis=1, keepdims=True)
    q = np.exp(shifted)
    q /= q.sum(axis=1, keepdims=True)
    logq = np.log(q)
    self_term = (q * logq).sum(axis=1)  # sum_j Q_x log Q_x per node
    keep = graph.file_edge_mask()
    src, dst = graph.src[keep], graph.dst[keep]
    # dedupe parallel edges: each distinct (src, dst) neighbor counts once
    pair_key = dst.astype(np.int64) * graph.node_count + src.astype(np.int64)
    uniq = np.unique(pair_key)
    u_dst = uniq // graph.node_count
    u_src = uniq % graph.node_count
    cross = np.einsum("ij,ij->i", q[u_dst], logq[u_src])
    kl_sum = np.zeros(graph.node_count)
    np.add.at(kl_sum, u_dst, self_term[u_dst] - cross)
    deg = np.zeros(graph.node_count)
    np.add.at(deg, u_dst, 1.0)
    cen_v = np.log(deg + cfg.delta)
    rent_v = np.log(np.maximum(kl_sum, 0.0) + cfg.delta)
    return cfg.mu1 * cen_v + cfg.mu2 * rent_v


def apply_scaling(estimate: Estimate, graph: HetGraph,
                  features: NodeFeatureSet, x: int,
                  cfg: ScalingConfig) -> Estimate:
    """Scale the importance estimate of node x; uncertainty is unchanged."""
    if not cfg.enabled:
        return estimate
    scale = (cfg.mu1 * cen(graph, x, cfg.delta)
             + cfg.mu2 * rent(graph, features.textual, x, cfg.delta))
    return Estimate(s_hat=scale * estimate.s_hat, z_hat=estimate.z_hat)
