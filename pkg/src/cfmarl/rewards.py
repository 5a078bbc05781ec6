"""Credit assignment: attention-based intrinsic rewards and reward mixing.

The intrinsic network attends over all agents' (observation, action)
embeddings and reads out one scalar incentive per agent. The mixer combines
intrinsic and extrinsic rewards with softplus (hence nonnegative) weights
generated by a small hypernetwork. The hypernetwork is conditioned on
permutation-invariant statistics of the intrinsic rewards only: conditioning
it on the extrinsic rewards would break the guarantee that raising any
agent's extrinsic reward never lowers its mixed reward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamSet
from .rng import RngStream


@dataclass
class RewardNetConfig:
    obs_dim: int
    action_dim: int
    embed_dim: int = 64
    heads: int = 8
    hrn_hidden: int = 16
    init_intrinsic_weight: float = 0.1


def init_reward_params(cfg: RewardNetConfig, rng: RngStream) -> ParamSet:
    if cfg.embed_dim % cfg.heads:
        raise ValueError(f"embed_dim {cfg.embed_dim} not divisible by {cfg.heads} heads")
    ps = ParamSet()
    d_in = cfg.obs_dim + cfg.action_dim
    d = cfg.embed_dim

    def lin(name, fi, fo, stream, scale=1.0):
        ps[f"{name}.w"] = Tensor(
            rng.derive(stream).standard_normal((fi, fo)) * (scale / np.sqrt(fi)),
            requires_grad=True)
        ps[f"{name}.b"] = Tensor(np.zeros(fo), requires_grad=True)

    lin("arn.embed", d_in, d, 0)
    lin("arn.q", d, d, 1)
    lin("arn.k", d, d, 2)
    lin("arn.v", d, d, 3)
    lin("arn.out", d, 1, 4, scale=0.1)
    lin("hrn.ctx", 2, cfg.hrn_hidden, 5)
    lin("hrn.out", cfg.hrn_hidden, 3, 6, scale=0.1)
    # softplus(bias) gives an identity-leaning start: extrinsic weight near 1,
    # intrinsic weight small, zero offset
    ps["hrn.out.b"].value[0] = _inv_softplus(1.0)
    ps["hrn.out.b"].value[1] = _inv_softplus(cfg.init_intrinsic_weight)
    return ps


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _linear(ps, name, x):
    return ad.add(ad.matmul(x, ps[f"{name}.w"]), ps[f"{name}.b"])


def intrinsic_rewards(ps: ParamSet, obs_flat, actions, cfg: RewardNetConfig) -> Tensor:
    """Per-agent intrinsic incentives via multi-head attention over agents.

    obs_flat: (..., L, obs_dim); actions: (..., L, action_dim) -> (..., L).
    """
    x = ad.concatenate([ad.as_tensor(obs_flat), ad.as_tensor(actions)], axis=-1)
    e = ad.relu(_linear(ps, "arn.embed", x))
    lead = e.shape[:-2]
    n, d = e.shape[-2], e.shape[-1]
    h, dh = cfg.heads, d // cfg.heads

    def split_heads(t):
        # (..., L, d) -> (..., h, L, dh)
        t = ad.reshape(t, lead + (n, h, dh))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return ad.transpose(t, axes)

    q = split_heads(_linear(ps, "arn.q", e))
    k = split_heads(_linear(ps, "arn.k", e))
    v = split_heads(_linear(ps, "arn.v", e))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, _swap_last(q.ndim))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(attn, v)                     # (..., h, L, dh)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    merged = ad.reshape(ad.transpose(mixed, axes), lead + (n, d))
    out = _linear(ps, "arn.out", ad.relu(merged))
    return ad.reshape(out, lead + (n,))


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def mixing_weights(ps: ParamSet, r_in: Tensor):
    """Hypernetwork outputs (w1, w2, b) from intrinsic-reward statistics."""
    ctx = ad.stack([ad.mean(r_in, axis=-1), ad.max_(r_in, axis=-1)], axis=-1)
    hid = ad.relu(_linear(ps, "hrn.ctx", ctx))
    out = _linear(ps, "hrn.out", hid)
    w1 = ad.softplus(out[..., 0])
    w2 = ad.softplus(out[..., 1])
    b = out[..., 2]
    return w1, w2, b


def mix_rewards(ps: ParamSet, r_in, r_ex) -> Tensor:
    """r_m = softplus(w1) * r_ex + softplus(w2) * r_in + b, per agent.

    Nondecreasing in every extrinsic entry because the weights never see r_ex.
    """
    r_in = ad.as_tensor(r_in)
    r_ex = ad.as_tensor(r_ex)
    w1, w2, b = mixing_weights(ps, r_in)
    expand = lambda t: ad.reshape(t, t.shape + (1,))
    return ad.add(ad.add(ad.mul(expand(w1), r_ex), ad.mul(expand(w2), r_in)),
                  expand(b))


def mixed_reward_values(ps: ParamSet, obs_flat: np.ndarray, actions: np.ndarray,
                        r_ex: np.ndarray, cfg: RewardNetConfig):
    """Forward pass only: (r_in, r_m) as plain arrays for rollout bookkeeping."""
    frozen = ParamSet((k, v.detach()) for k, v in ps.items())
    r_in = intrinsic_rewards(frozen, obs_flat, actions, cfg)
    r_m = mix_rewards(frozen, r_in, r_ex)
    return r_in.value, r_m.value
