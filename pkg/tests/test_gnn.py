"""Graph communication: pooling, equivariance, locality, adjacency rules."""
import numpy as np

from cfmarl import autodiff as ad
from cfmarl.autodiff import Tensor, grad
from cfmarl.gnn import (
    GnnConfig,
    aggregate,
    backbone_forward,
    combine,
    encode_messages,
    init_backbone_params,
    initial_adjacency,
    neighbor_mask,
    update_observation,
)
from cfmarl.optim import ParamSet
from cfmarl.policy import PolicyConfig, act, init_policy_params, policy_means
from cfmarl.rng import RngStream

from fdcheck import finite_difference


def small_gnn(**kw):
    base = dict(input_dim=6, layer_dims=(8, 8), message_dim=8, score_dim=4,
                heads=2, top_k=3)
    base.update(kw)
    return GnnConfig(**base)


def make(cfg=None, seed=1):
    cfg = cfg or small_gnn()
    ps = ParamSet()
    init_backbone_params(ps, cfg, RngStream(seed))
    return cfg, ps


def rand_states(cfg, n, seed=0):
    rng = np.random.default_rng(seed)
    enc_dim = cfg.layer_dims[0]
    return (Tensor(rng.standard_normal((n, enc_dim))),
            Tensor(rng.standard_normal((n, enc_dim))))


# -- aggregation -----------------------------------------------------------------

def test_empty_neighborhood_aggregates_to_zero():
    cfg, ps = make()
    enc, states = rand_states(cfg, 4)
    mask = np.zeros((4, 4))
    out = aggregate(ps, 0, enc, states, mask, Tensor(mask), cfg)
    assert np.all(out.value == 0)


def test_single_neighbor_pooling_is_identity():
    cfg, ps = make()
    enc, states = rand_states(cfg, 3)
    mask = np.zeros((3, 3))
    mask[0, 2] = 1.0
    out = aggregate(ps, 0, enc, states, mask, Tensor(mask), cfg)
    full = np.ones((3, 3))
    ref = aggregate(ps, 0, enc, states, full, Tensor(full), cfg)
    # node 0's pooled message over {2} must equal the message from 2 alone
    mask2 = np.zeros((3, 3))
    mask2[0, 2] = 1.0
    again = aggregate(ps, 0, enc, states, mask2, Tensor(mask2), cfg)
    assert np.array_equal(out.value[0], again.value[0])
    assert np.all(out.value[1] == 0) and np.all(out.value[2] == 0)


def test_max_pool_idempotent_over_duplicates():
    cfg, ps = make()
    enc, states = rand_states(cfg, 3, seed=4)
    dup = Tensor(states.value.copy())
    dup.value[2] = dup.value[1]       # duplicate neighbor state
    one = np.zeros((3, 3))
    one[0, 1] = 1.0
    both = np.zeros((3, 3))
    both[0, 1] = both[0, 2] = 1.0
    a_one = aggregate(ps, 0, enc, dup, one, Tensor(one), cfg)
    a_both = aggregate(ps, 0, enc, dup, both, Tensor(both), cfg)
    assert np.allclose(a_one.value[0], a_both.value[0], atol=1e-12)


def test_combine_zero_inputs_zero_weights():
    cfg, ps = make()
    for k in list(ps):
        if k.startswith("gnn.comb0"):
            ps[k] = Tensor(np.zeros_like(ps[k].value), requires_grad=True)
    z = Tensor(np.zeros((2, cfg.layer_dims[0])))
    out = combine(ps, 0, z, z, Tensor(np.zeros((2, cfg.layer_dims[0]))))
    assert np.all(out.value == 0)


# -- backbone-level properties -------------------------------------------------------

def test_node_relabeling_equivariance():
    cfg, ps = make()
    rng = np.random.default_rng(7)
    for trial in range(20):
        n = 5
        a_t = rng.standard_normal((n, cfg.input_dim))
        scores = rng.uniform(0, 1, (n, n))
        out, nxt = backbone_forward(ps, Tensor(a_t), scores, cfg)
        perm = rng.permutation(n)
        out_p, nxt_p = backbone_forward(ps, Tensor(a_t[perm]), scores[np.ix_(perm, perm)], cfg)
        assert np.array_equal(out_p.value, out.value[perm])
        assert np.array_equal(nxt_p, nxt[np.ix_(perm, perm)])


def test_locality_beyond_j_hops():
    cfg, ps = make()
    n = 5
    scores = np.zeros((n, n))
    for i in range(n - 1):       # path graph 0-1-2-3-4
        scores[i, i + 1] = scores[i + 1, i] = 1.0
    rng = np.random.default_rng(8)
    a_t = rng.standard_normal((n, cfg.input_dim))
    out, _ = backbone_forward(ps, Tensor(a_t), scores, cfg)
    bumped = a_t.copy()
    bumped[4] += 1.0             # distance 4 > J = 2 from node 0
    out_b, _ = backbone_forward(ps, Tensor(bumped), scores, cfg)
    assert np.array_equal(out_b.value[0], out.value[0])
    assert not np.array_equal(out_b.value[3], out.value[3])  # within 1 hop of 4


def test_empty_graph_reduces_to_per_node_network():
    cfg, ps = make()
    rng = np.random.default_rng(9)
    a_t = rng.standard_normal((4, cfg.input_dim))
    out, _ = backbone_forward(ps, Tensor(a_t), np.zeros((4, 4)), cfg)
    solo, _ = backbone_forward(ps, Tensor(a_t[1:2]), np.zeros((1, 1)), cfg)
    assert np.allclose(out.value[1], solo.value[0], atol=1e-12)


# -- adjacency rules --------------------------------------------------------------------

def test_identical_states_tie_break_lowest_indices():
    cfg, ps = make(small_gnn(top_k=2))
    states = Tensor(np.tile(np.random.default_rng(10).standard_normal(8), (4, 1)))
    _, scores = encode_messages(ps, states, cfg)
    if scores.value[0, 1] >= cfg.threshold:     # all off-diagonal scores equal
        mask = neighbor_mask(scores.value, cfg)
        assert np.array_equal(mask[0], [0, 1, 1, 0])
        assert np.array_equal(mask[3], [1, 1, 0, 0])
    else:
        assert np.all(neighbor_mask(scores.value, cfg) == 0)


def test_top_k_zero_empties_neighbor_sets():
    cfg = small_gnn(top_k=0)
    mask = neighbor_mask(np.ones((4, 4)), cfg)
    assert np.all(mask == 0)


def test_adjacency_scores_in_unit_interval():
    cfg, ps = make()
    states = Tensor(np.random.default_rng(11).standard_normal((5, 8)) * 3)
    _, scores = encode_messages(ps, states, cfg)
    assert np.all(scores.value >= 0) and np.all(scores.value <= 1)


def test_initial_adjacency_three_nearest():
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [10.0, 0.0], [11.0, 0.0]])
    scores = initial_adjacency(pos, small_gnn(top_k=3))
    assert np.array_equal(np.flatnonzero(scores[0]), [1, 2, 3])
    assert scores[0, 4] == 0


def test_fusion_identity_with_zero_weights():
    cfg, ps = make()
    ps["gnn.fuse.w"] = Tensor(np.zeros_like(ps["gnn.fuse.w"].value), requires_grad=True)
    ps["gnn.fuse.b"] = Tensor(np.zeros_like(ps["gnn.fuse.b"].value), requires_grad=True)
    o = Tensor(np.random.default_rng(12).standard_normal((3, cfg.input_dim)))
    m = Tensor(np.random.default_rng(13).standard_normal((3, cfg.message_dim)))
    assert np.array_equal(update_observation(ps, o, m).value, o.value)


# -- gradients -----------------------------------------------------------------------

def test_message_encoder_receives_gradient():
    cfg, ps = make()
    a_t = np.random.default_rng(14).standard_normal((4, cfg.input_dim))
    scores = np.random.default_rng(15).uniform(0.4, 1.0, (4, 4))

    def f(params):
        out, _ = backbone_forward(ps, Tensor(a_t), scores, cfg)
        return ad.sum_(ad.square(out))

    msg_params = [ps["gnn.msg.w"], ps["gnn.msg.b"]]
    out = f(None)
    grads = grad(out, msg_params)
    assert all(np.linalg.norm(g) > 0 for g in grads)
    assert finite_difference(f, msg_params, num_checks=6) < 1e-4


def test_scorer_receives_gradient_through_time():
    # Chain two steps: the first step's scores feed the second step's
    # aggregation as a Tensor, so the straight-through weights reach the scorer.
    cfg, ps = make()
    rng = np.random.default_rng(16)
    a1 = rng.standard_normal((4, cfg.input_dim))
    a2 = rng.standard_normal((4, cfg.input_dim))
    warm = rng.uniform(0.4, 1.0, (4, 4))

    def two_step(params):
        enc1 = ad.relu(ad.add(ad.matmul(Tensor(a1), ps["gnn.enc.w"]), ps["gnn.enc.b"]))
        state = enc1
        mask1 = neighbor_mask(warm, cfg)
        for j in range(len(cfg.layer_dims)):
            agg = aggregate(ps, j, enc1, state, mask1, Tensor(warm), cfg)
            state = combine(ps, j, enc1, state, agg)
        _, scores1 = encode_messages(ps, state, cfg)
        out2, _ = backbone_forward(ps, Tensor(a2), scores1, cfg)
        return ad.sum_(ad.square(out2))

    score_params = [ps["gnn.score.w"], ps["gnn.score.b"]]
    grads = grad(two_step(None), score_params)
    assert all(np.linalg.norm(g) > 0 for g in grads)


# -- as a policy backbone ---------------------------------------------------------------

def gnn_policy_cfg():
    return PolicyConfig(feature_dim=7, num_ues=3, num_antennas=2, d_r=8,
                        hyper_hidden=6, head_hidden=(6, 6), backbone="gnn",
                        gnn=small_gnn(input_dim=8))


def test_gnn_backbone_policy_permutation_contract():
    cfg = gnn_policy_cfg()
    ps = init_policy_params(cfg, RngStream(20))
    rng = np.random.default_rng(21)
    obs = rng.standard_normal((4, cfg.num_ues, cfg.feature_dim))
    hidden = rng.uniform(0, 1, (4, 4))
    base = act(ps, obs, hidden, cfg, mode="eval")
    perm = np.array([2, 0, 1])
    out = act(ps, obs[:, perm, :], hidden, cfg, mode="eval")
    k = cfg.num_ues
    assert np.array_equal(out.env_actions[:, :2], base.env_actions[:, :2])
    assert np.array_equal(out.env_actions[:, 2:2 + k], base.env_actions[:, 2:2 + k][:, perm])
    assert np.array_equal(out.env_actions[:, 2 + k:], base.env_actions[:, 2 + k:])


def test_gnn_backbone_policy_gradients():
    cfg = gnn_policy_cfg()
    ps = init_policy_params(cfg, RngStream(22))
    rng = np.random.default_rng(23)
    obs = rng.standard_normal((4, cfg.num_ues, cfg.feature_dim))
    hidden = rng.uniform(0, 1, (4, 4))

    def f(params):
        means, _ = policy_means(ps, Tensor(obs), hidden, cfg)
        return ad.sum_(ad.square(means))

    assert finite_difference(f, ps.tensors(), num_checks=3) < 1e-4
