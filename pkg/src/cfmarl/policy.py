"""Permutation-structured policy networks.

The actor is assembled from four modules: a permutation-invariant input
stage that embeds each entity row with a row-content-determined weight
matrix and merges by summation, a recurrent (or graph, see gnn.py) backbone
over the embedding, an invariant head for the mobility action, and
equivariant heads that emit one output block per entity (per-UE power
logits, per-antenna logits).

Row-determined weights come from either a hypernetwork (a row-conditioned
weight generator, so the candidate set is unconstrained) or a finite pool of
candidate matrices picked by a selector net: softly via a Gumbel-softmax
relaxation during training and by hard argmax at evaluation. Gumbel noise is
drawn once per forward and shared across rows, so selection depends on row
content only and permutation properties hold even while exploring.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamSet
from .rng import RngStream

ANTENNA_FEATURES = 4


@dataclass
class PolicyConfig:
    feature_dim: int              # entity-row width f_r
    num_ues: int
    num_antennas: int
    d_r: int = 256                # backbone width
    hyper_hidden: int = 64        # hypernet / selector hidden width
    head_hidden: tuple = (128, 64)
    weight_mode: str = "hypernet"   # or "finite-pool"
    pool_size: int = 4
    backbone: str = "rnn"           # or "gnn"
    actor: str = "dhpn"             # or "mlp" (plain MADDPG actor)
    mlp_hidden: tuple = (128, 64)
    explore_sigma: float = 0.1
    gnn: "object" = None            # gnn.GnnConfig when backbone == "gnn"

    @property
    def action_dim(self):
        return 2 + self.num_ues + self.num_antennas


# -- parameter construction ------------------------------------------------------

def _linear_init(rng: RngStream, fan_in: int, fan_out: int, scale=1.0) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * (scale / np.sqrt(fan_in))


def init_mlp(ps: ParamSet, prefix: str, sizes: tuple, rng: RngStream, out_scale=1.0):
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = out_scale if i == len(sizes) - 2 else 1.0
        ps[f"{prefix}.w{i}"] = Tensor(_linear_init(rng, fi, fo, scale), requires_grad=True)
        ps[f"{prefix}.b{i}"] = Tensor(np.zeros(fo), requires_grad=True)


def mlp_forward(ps: ParamSet, prefix: str, x: Tensor, activation=ad.relu) -> Tensor:
    i = 0
    while f"{prefix}.w{i}" in ps:
        x = ad.add(ad.matmul(x, ps[f"{prefix}.w{i}"]), ps[f"{prefix}.b{i}"])
        i += 1
        if f"{prefix}.w{i}" in ps:
            x = activation(x)
    return x


def init_policy_params(cfg: PolicyConfig, rng: RngStream) -> ParamSet:
    ps = ParamSet()
    if cfg.actor == "mlp":
        flat = cfg.num_ues * cfg.feature_dim
        init_mlp(ps, "mlp", (flat, *cfg.mlp_hidden, cfg.action_dim), rng.derive(0),
                 out_scale=0.1)
        return ps
    f_r, d_r = cfg.feature_dim, cfg.d_r
    if cfg.weight_mode == "hypernet":
        init_mlp(ps, "a_in.hyper", (f_r, cfg.hyper_hidden, f_r * d_r),
                 rng.derive(1), out_scale=0.1)
        init_mlp(ps, "d_sp.hyper", (f_r, cfg.hyper_hidden, d_r),
                 rng.derive(2), out_scale=0.1)
        init_mlp(ps, "d_mp.hyper", (ANTENNA_FEATURES, cfg.hyper_hidden, d_r),
                 rng.derive(3), out_scale=0.1)
    elif cfg.weight_mode == "finite-pool":
        p = cfg.pool_size
        ps["a_in.pool"] = Tensor(
            rng.derive(1).standard_normal((p, f_r * d_r)) * (0.1 / np.sqrt(f_r)),
            requires_grad=True)
        init_mlp(ps, "a_in.sel", (f_r, cfg.hyper_hidden, p), rng.derive(4))
        ps["d_sp.pool"] = Tensor(
            rng.derive(2).standard_normal((p, d_r)) * (0.1 / np.sqrt(d_r)),
            requires_grad=True)
        init_mlp(ps, "d_sp.sel", (f_r, cfg.hyper_hidden, p), rng.derive(5))
        ps["d_mp.pool"] = Tensor(
            rng.derive(3).standard_normal((p, d_r)) * (0.1 / np.sqrt(d_r)),
            requires_grad=True)
        init_mlp(ps, "d_mp.sel", (ANTENNA_FEATURES, cfg.hyper_hidden, p), rng.derive(6))
    else:
        raise ValueError(f"unknown weight_mode {cfg.weight_mode!r}")
    if cfg.backbone == "rnn":
        ps["rnn.wx"] = Tensor(_linear_init(rng.derive(7), d_r, d_r), requires_grad=True)
        ps["rnn.wh"] = Tensor(_linear_init(rng.derive(8), d_r, d_r, 0.5), requires_grad=True)
        ps["rnn.b"] = Tensor(np.zeros(d_r), requires_grad=True)
    elif cfg.backbone == "gnn":
        from . import gnn
        if cfg.gnn is None:
            cfg.gnn = gnn.GnnConfig(input_dim=d_r)
        gnn.init_backbone_params(ps, cfg.gnn, rng.derive(9))
    else:
        raise ValueError(f"unknown backbone {cfg.backbone!r}")
    init_mlp(ps, "c_p", (d_r, *cfg.head_hidden, 2), rng.derive(10), out_scale=0.1)
    return ps


# -- weight selection / generation -------------------------------------------------

def _row_weights(ps: ParamSet, prefix: str, rows: Tensor, out_rows: int, out_cols: int,
                 cfg: PolicyConfig, mode: str, gumbel_noise=None,
                 temperature: float = 1.0) -> Tensor:
    """Per-row weight matrices (..., R, out_rows, out_cols) from row content."""
    lead = rows.shape[:-1]
    if cfg.weight_mode == "hypernet":
        w = mlp_forward(ps, f"{prefix}.hyper", rows)
        return ad.reshape(w, lead + (out_rows, out_cols))
    logits = mlp_forward(ps, f"{prefix}.sel", rows)
    if mode == "eval":
        hard = np.zeros(logits.shape)
        np.put_along_axis(hard, logits.value.argmax(axis=-1)[..., None], 1.0, -1)
        sel = Tensor(hard)
    else:
        noise = np.zeros(cfg.pool_size) if gumbel_noise is None else gumbel_noise
        sel = ad.gumbel_softmax(logits, np.broadcast_to(noise, logits.shape),
                                temperature)
    w = ad.matmul(sel, ps[f"{prefix}.pool"])
    return ad.reshape(w, lead + (out_rows, out_cols))


def canonical_order(values: np.ndarray) -> np.ndarray:
    """Lexicographic order of entity rows (..., R, f) by their content.

    Cross-row float reductions performed in this order are independent of the
    input row order, which is what makes the invariance properties bit-exact
    rather than merely within rounding error.
    """
    lead_r = values.shape[:-1]
    order = np.broadcast_to(np.arange(values.shape[-2]),
                            lead_r).copy()
    for col in range(values.shape[-1] - 1, -1, -1):
        key = np.take_along_axis(values[..., col], order, axis=-1)
        s = np.argsort(key, axis=-1, kind="stable")
        order = np.take_along_axis(order, s, axis=-1)
    return order


def sort_rows(rows: Tensor) -> Tensor:
    order = canonical_order(rows.value)
    return ad.take_along(rows, order[..., None], axis=-2)


def forward_input_pi(ps: ParamSet, rows: Tensor, cfg: PolicyConfig, mode: str = "eval",
                     gumbel_noise=None, temperature: float = 1.0) -> Tensor:
    """Permutation-invariant input embedding: sum of row-embedded entities.

    rows: (..., R, f_r) -> (..., d_r). Each row is multiplied by a weight
    matrix that depends on that row's content only, and rows are summed in
    canonical order, so any reordering of rows gives a bit-identical output.
    """
    rows = sort_rows(ad.as_tensor(rows))
    w = _row_weights(ps, "a_in", rows, cfg.feature_dim, cfg.d_r, cfg, mode,
                     gumbel_noise, temperature)
    lead = rows.shape[:-1]
    r = ad.reshape(rows, lead + (1, cfg.feature_dim))
    embedded = ad.reshape(ad.matmul(r, w), lead + (cfg.d_r,))
    return ad.sum_(embedded, axis=-2)


def backbone_rnn(ps: ParamSet, x: Tensor, hidden: Tensor) -> Tensor:
    """Single recurrent step, ReLU cell; the new hidden equals the output."""
    return ad.relu(ad.add(ad.add(ad.matmul(x, ps["rnn.wx"]),
                                 ad.matmul(hidden, ps["rnn.wh"])), ps["rnn.b"]))


def output_pi(ps: ParamSet, b: Tensor) -> Tensor:
    """Mobility head: pre-squash mean of the 2-D move (tanh applied by act())."""
    return mlp_forward(ps, "c_p", b)


def output_pe(ps: ParamSet, prefix: str, rows: Tensor, b: Tensor, cfg: PolicyConfig,
              mode: str = "eval", gumbel_noise=None, temperature: float = 1.0) -> Tensor:
    """Equivariant head: one scalar logit per entity row.

    rows: (..., R, f) entity rows; b: (..., d_r) backbone state. Each row
    generates its own read-out vector for b, so permuting rows permutes the
    output blocks identically.
    """
    w = _row_weights(ps, prefix, rows, cfg.d_r, 1, cfg, mode, gumbel_noise, temperature)
    lead = rows.shape[:-1]
    b_exp = ad.reshape(b, b.shape[:-1] + (1, 1, b.shape[-1]))
    out = ad.matmul(b_exp, w)
    return ad.reshape(out, lead)


def output_pe_unmodified(ps: ParamSet, b: Tensor, num_blocks: int) -> Tensor:
    """The head Theorem-3 warns about: fed only the backbone state.

    Because it never sees the entity rows it is invariant, not equivariant:
    permuting the input entities does not permute these outputs.
    """
    key = f"d_plain.w.{num_blocks}"
    if key not in ps:
        ps[key] = Tensor(np.random.default_rng(0).standard_normal(
            (b.shape[-1], num_blocks)) / np.sqrt(b.shape[-1]), requires_grad=True)
    return ad.matmul(b, ps[key])


def antenna_rows(rows: Tensor, cfg: PolicyConfig) -> Tensor:
    """Per-antenna entity rows from the per-UE observation rows.

    Features are sums over UEs (real part, imaginary part, energy, and
    gain-weighted energy of each antenna's channel entries), computed in
    canonical UE order, so they are bit-invariant to UE order while remaining
    equivariant in the antenna index.
    """
    rows = sort_rows(ad.as_tensor(rows))
    n = cfg.num_antennas
    re = rows[..., 0:n]
    im = rows[..., n:2 * n]
    beta = rows[..., 2 * n:2 * n + 1]
    energy = ad.add(ad.square(re), ad.square(im))
    feats = [ad.sum_(re, axis=-2), ad.sum_(im, axis=-2),
             ad.sum_(energy, axis=-2), ad.sum_(ad.mul(beta, energy), axis=-2)]
    return ad.stack(feats, axis=-1)


# -- full actor ----------------------------------------------------------------------

@dataclass
class PolicyOutput:
    env_actions: np.ndarray    # (..., 2+K+N): tanh-squashed mobility, sp/mp logits
    presquash: np.ndarray      # (..., 2+K+N): Gaussian-perturbed pre-squash values
    means: np.ndarray          # (..., 2+K+N): deterministic pre-squash means
    next_hidden: object


def policy_means(ps: ParamSet, obs: Tensor, hidden, cfg: PolicyConfig,
                 mode: str = "eval", rng: RngStream | None = None,
                 temperature: float = 1.0):
    """Pre-squash action means (..., 2+K+N) and the next backbone hidden.

    obs: (..., K, f_r) entity rows. For the GNN backbone the leading axes
    must be (batch, agents) and hidden carries the communication graph.
    """
    if cfg.actor == "mlp":
        flat = ad.reshape(obs, obs.shape[:-2] + (cfg.num_ues * cfg.feature_dim,))
        means = mlp_forward(ps, "mlp", flat, activation=lambda t: ad.leaky_relu(t, 0.01))
        return means, hidden
    noise_a = noise_sp = noise_mp = None
    if cfg.weight_mode == "finite-pool" and mode == "train" and rng is not None:
        noise_a = rng.gumbel((cfg.pool_size,))
        noise_sp = rng.gumbel((cfg.pool_size,))
        noise_mp = rng.gumbel((cfg.pool_size,))
    a_t = forward_input_pi(ps, obs, cfg, mode, noise_a, temperature)
    if cfg.backbone == "rnn":
        b_t = backbone_rnn(ps, a_t, hidden)
        next_hidden = b_t
    else:
        from . import gnn
        b_t, next_hidden = gnn.backbone_forward(ps, a_t, hidden, cfg.gnn)
    mob = output_pi(ps, b_t)
    sp = output_pe(ps, "d_sp", obs, b_t, cfg, mode, noise_sp, temperature)
    mp = output_pe(ps, "d_mp", antenna_rows(obs, cfg), b_t, cfg, mode,
                   noise_mp, temperature)
    return ad.concatenate([mob, sp, mp], axis=-1), next_hidden


def act(ps: ParamSet, obs: np.ndarray, hidden, cfg: PolicyConfig, mode: str = "eval",
        rng: RngStream | None = None, explore_sigma: float = 0.0,
        temperature: float = 1.0) -> PolicyOutput:
    """Sample executable actions; also returns pre-squash values for log-probs."""
    means_t, next_hidden = policy_means(ParamSet((k, v.detach()) for k, v in ps.items()),
                                        Tensor(obs), hidden, cfg, mode, rng, temperature)
    means = means_t.value
    if mode == "train" and explore_sigma > 0 and rng is not None:
        u = means + explore_sigma * rng.standard_normal(means.shape)
    else:
        u = means.copy()
    env_actions = u.copy()
    env_actions[..., :2] = np.tanh(u[..., :2])
    nh = next_hidden.value if isinstance(next_hidden, Tensor) else next_hidden
    return PolicyOutput(env_actions=env_actions, presquash=u, means=means,
                        next_hidden=nh)


def log_prob(means: Tensor, presquash: np.ndarray, sigma: float) -> Tensor:
    """Log-density of the Gaussian exploration distribution, summed over dims."""
    diff = ad.sub(Tensor(presquash), means)
    quad = ad.mul(ad.sum_(ad.square(diff), axis=-1), -0.5 / sigma**2)
    const = -0.5 * presquash.shape[-1] * np.log(2 * np.pi * sigma**2)
    return ad.add(quad, const)


def init_hidden(cfg: PolicyConfig, batch_shape: tuple):
    if cfg.actor == "mlp":
        return np.zeros(batch_shape + (1,))
    if cfg.backbone == "rnn":
        return np.zeros(batch_shape + (cfg.d_r,))
    from . import gnn
    return gnn.init_hidden(cfg.gnn, batch_shape)


# -- checkpoints -----------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_params(ps: ParamSet, path):
    doc = {
        "version": CHECKPOINT_VERSION,
        "params": {k: {"shape": list(v.value.shape), "data": v.value.ravel().tolist()}
                   for k, v in ps.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_params(path) -> ParamSet:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    ps = ParamSet()
    for k, spec in doc["params"].items():
        ps[k] = Tensor(np.array(spec["data"], dtype=float).reshape(spec["shape"]),
                       requires_grad=True)
    return ps
