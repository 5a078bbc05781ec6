"""Graph message passing between agents.

Each agent is a node; edges come from a learned adjacency that is
re-estimated every slot from the nodes' final hidden states. One layer
aggregates neighbor messages (multi-head transforms, max or sum pooling) and
combines them with the node's own state. After J layers a message encoder
produces the payload each agent receives plus the next slot's adjacency
scores; received messages update the node input through a residual fusion,
which is what the policy uses as its backbone output.

The hard neighbor selection (sigmoid score thresholded at 0.5, capped at the
top-k strongest, diagonal excluded, ties to the lowest index) is not
differentiable, so messages are weighted by `mask + score - stop(score)`:
forward values see the hard mask exactly while gradients flow to the scorer.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamSet
from .rng import RngStream


@dataclass
class GnnConfig:
    input_dim: int                 # per-node input width (d_r as a backbone)
    layer_dims: tuple = (128, 64)  # J = len(layer_dims) message-passing layers
    message_dim: int = 64
    score_dim: int = 32
    heads: int = 4
    pool: str = "max"              # or "sum"
    top_k: int = 3
    threshold: float = 0.5


def init_backbone_params(ps: ParamSet, cfg: GnnConfig, rng: RngStream):
    def lin(prefix, fi, fo, stream, scale=1.0):
        ps[f"{prefix}.w"] = Tensor(
            rng.derive(stream).standard_normal((fi, fo)) * (scale / np.sqrt(fi)),
            requires_grad=True)
        ps[f"{prefix}.b"] = Tensor(np.zeros(fo), requires_grad=True)

    enc = cfg.layer_dims[0]
    lin("gnn.enc", cfg.input_dim, enc, 0)
    prev = enc
    for j, width in enumerate(cfg.layer_dims):
        if width % cfg.heads:
            raise ValueError(f"layer width {width} not divisible by {cfg.heads} heads")
        for h in range(cfg.heads):
            lin(f"gnn.agg{j}.h{h}", enc + prev + prev, width // cfg.heads, 10 + 7 * j + h)
        lin(f"gnn.comb{j}", enc + prev + width, width, 100 + j)
        prev = width
    lin("gnn.msg", prev, cfg.message_dim, 200)
    lin("gnn.score", prev, cfg.score_dim, 201)
    lin("gnn.fuse", cfg.input_dim + cfg.message_dim, cfg.input_dim, 202, scale=0.1)


def _linear(ps, prefix, x):
    return ad.add(ad.matmul(x, ps[f"{prefix}.w"]), ps[f"{prefix}.b"])


def neighbor_mask(scores: np.ndarray, cfg: GnnConfig) -> np.ndarray:
    """Hard neighbor selection from adjacency scores (..., L, L).

    Row l selects up to top_k highest-scoring columns with score >= threshold,
    never itself; equal scores resolve to the lowest column index.
    """
    n = scores.shape[-1]
    s = np.array(scores, dtype=float)
    idx = np.arange(n)
    s[..., idx, idx] = -np.inf
    mask = np.zeros_like(s)
    if cfg.top_k > 0:
        order = np.argsort(-s, axis=-1, kind="stable")
        top = order[..., :cfg.top_k]
        np.put_along_axis(mask, top, 1.0, -1)
    mask[s < cfg.threshold] = 0.0
    return mask


def aggregate(ps: ParamSet, layer: int, enc: Tensor, states: Tensor,
              mask: np.ndarray, scores: Tensor, cfg: GnnConfig) -> Tensor:
    """Pooled neighbor messages per node.

    enc, states: (..., L, d). For each receiver l and sender l', the message
    is a multi-head transform of (enc_l, s_l, s_l'); pooling runs over the
    senders enabled by `mask`, weighted straight-through by `scores`. Empty
    neighborhoods aggregate to zero.
    """
    lead = states.shape[:-2]
    n, d = states.shape[-2], states.shape[-1]
    de = enc.shape[-1]
    recv_e = ad.broadcast_to(ad.reshape(enc, lead + (n, 1, de)), lead + (n, n, de))
    recv_s = ad.broadcast_to(ad.reshape(states, lead + (n, 1, d)), lead + (n, n, d))
    send_s = ad.broadcast_to(ad.reshape(states, lead + (1, n, d)), lead + (n, n, d))
    pair = ad.concatenate([recv_e, recv_s, send_s], axis=-1)
    heads = [ad.relu(_linear(ps, f"gnn.agg{layer}.h{h}", pair))
             for h in range(cfg.heads)]
    msg = ad.concatenate(heads, axis=-1)
    # straight-through edge weight: forward sees the hard mask, grads the score
    weight = ad.add(Tensor(mask), ad.sub(scores, scores.detach()))
    weighted = ad.mul(msg, ad.reshape(weight, weight.shape + (1,)))
    if cfg.pool == "sum":
        return ad.sum_(weighted, axis=-2)
    masked = ad.add(weighted, Tensor(np.where(mask[..., None] > 0, 0.0, -1e30)))
    pooled = ad.max_(masked, axis=-2)
    nonempty = (mask.sum(axis=-1, keepdims=True) > 0).astype(float)
    return ad.mul(pooled, Tensor(nonempty))


def combine(ps: ParamSet, layer: int, enc: Tensor, state: Tensor, agg: Tensor) -> Tensor:
    """Node-local state update from own encoding, previous state, aggregate."""
    return ad.relu(_linear(ps, f"gnn.comb{layer}",
                           ad.concatenate([enc, state, agg], axis=-1)))


def encode_messages(ps: ParamSet, states: Tensor, cfg: GnnConfig):
    """Final-layer states -> (per-node messages, next adjacency scores)."""
    m = ad.tanh(_linear(ps, "gnn.msg", states))
    e = _linear(ps, "gnn.score", states)
    raw = ad.mul(ad.matmul(e, ad.transpose(e, _swap_axes(e.ndim))),
                 1.0 / np.sqrt(cfg.score_dim))
    return m, ad.sigmoid(raw)


def _swap_axes(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def update_observation(ps: ParamSet, node_input: Tensor, message: Tensor) -> Tensor:
    """Residual fusion; exactly the identity when the fusion weights are zero."""
    fused = _linear(ps, "gnn.fuse", ad.concatenate([node_input, message], axis=-1))
    return ad.add(node_input, fused)


def backbone_forward(ps: ParamSet, a_t: Tensor, hidden, cfg: GnnConfig):
    """Policy-backbone entry point.

    a_t: (..., L, d_r) per-agent embeddings; hidden: (..., L, L) adjacency
    scores carried from the previous slot, as a plain array or, when
    training through time, as a Tensor so the straight-through weights carry
    gradient back to the scorer. Returns the fused (..., L, d_r) output and
    the next slot's adjacency scores.
    """
    a_t = ad.as_tensor(a_t)
    if isinstance(hidden, Tensor):
        scores_prev = hidden
        mask = neighbor_mask(hidden.value, cfg)
    else:
        scores_prev = Tensor(np.asarray(hidden, dtype=float))
        mask = neighbor_mask(scores_prev.value, cfg)
    enc = ad.relu(_linear(ps, "gnn.enc", a_t))
    state = enc
    for j in range(len(cfg.layer_dims)):
        agg = aggregate(ps, j, enc, state, mask, scores_prev, cfg)
        state = combine(ps, j, enc, state, agg)
    msg, next_scores = encode_messages(ps, state, cfg)
    out = update_observation(ps, a_t, msg)
    return out, next_scores.value


def init_hidden(cfg: GnnConfig, batch_shape: tuple) -> np.ndarray:
    """All-zero scores: an empty graph until geometry seeds the adjacency."""
    return np.zeros(batch_shape + (batch_shape[-1],)) if batch_shape else np.zeros((0, 0))


def initial_adjacency(ap_positions: np.ndarray, cfg: GnnConfig) -> np.ndarray:
    """Distance-based warm start: each agent's top-k nearest peers get score 1."""
    n = ap_positions.shape[0]
    d = np.linalg.norm(ap_positions[:, None, :] - ap_positions[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    scores = np.zeros((n, n))
    order = np.argsort(d, axis=-1, kind="stable")
    np.put_along_axis(scores, order[:, :cfg.top_k], 1.0, -1)
    return scores


def adjacency_rows(slot: int, scores: np.ndarray) -> list:
    n = scores.shape[-1]
    return [{"slot": slot, "i": i, "j": j, "score": float(scores[i, j])}
            for i in range(n) for j in range(n) if i != j]


def write_adjacency(path, rows: list):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["slot", "i", "j", "score"])
        writer.writeheader()
        writer.writerows(rows)
