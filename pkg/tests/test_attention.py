import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from bodydiff.attention import PartAttentionLayer, init_layer, sinusoidal_embedding, static_mix
from bodydiff.errors import DataError, UsageError
from gradcheck import fd_group_errors
from oracles import (
    dynamic_oracle,
    layer_oracle,
    layernorm_oracle,
    moe_oracle,
    static_oracle,
    temporal_oracle,
)


def _layer(n_parts=3, token_dim=4, text_dim=3, n_experts=2, seed=0, hidden=8, **kw):
    return init_layer(
        n_parts, token_dim, text_dim, n_experts, seed=seed, hidden=hidden,
        dtype=torch.float64, **kw
    )


def _rand(g, *shape):
    return torch.randn(*shape, dtype=torch.float64, generator=g)


def test_adjacency_initializes_to_exact_identity():
    layer = _layer(n_parts=5)
    assert torch.equal(layer.adjacency.detach(), torch.eye(5, dtype=torch.float64))


def test_same_seed_gives_identical_parameters():
    a = _layer(seed=42)
    b = _layer(seed=42)
    for (n, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), n
    c = _layer(seed=43)
    diff = [n for (n, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
            if not torch.equal(pa, pc)]
    assert diff


def test_invalid_expert_count_rejected():
    with pytest.raises(UsageError):
        init_layer(3, 4, 3, n_experts=0)


def test_xavier_bounds_respected():
    layer = _layer(token_dim=16, text_dim=8, seed=9)
    bound = math.sqrt(6.0 / (16 + 16))
    w = layer.dyn_q.detach()
    assert w.abs().max() <= bound
    # spread over most of the interval, not degenerate
    assert w.abs().max() > 0.5 * bound


def test_static_identity_is_exact_passthrough():
    g = torch.Generator().manual_seed(1)
    layer = _layer(n_parts=4)
    h = _rand(g, 6, 4, 4)
    assert torch.equal(layer.static_forward(h), h)


def test_static_swap_adjacency_swaps_parts():
    layer = _layer(n_parts=2)
    with torch.no_grad():
        layer.adjacency.copy_(torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64))
    g = torch.Generator().manual_seed(2)
    h = _rand(g, 3, 2, 4)
    out = layer.static_forward(h)
    assert torch.equal(out[:, 0], h[:, 1])
    assert torch.equal(out[:, 1], h[:, 0])


def test_static_matches_loop_oracle():
    g = torch.Generator().manual_seed(3)
    for _ in range(10):
        a = _rand(g, 4, 4)
        h = _rand(g, 5, 4, 3)
        got = static_mix(a, h).numpy()
        want = static_oracle(a.numpy(), h.numpy())
        assert np.abs(got - want).max() < 1e-10


def test_static_permutation_equivariance():
    g = torch.Generator().manual_seed(4)
    rng = np.random.default_rng(4)
    for _ in range(10):
        n = 5
        a = _rand(g, n, n)
        h = _rand(g, 3, n, 4)
        perm = torch.as_tensor(rng.permutation(n))
        p = torch.eye(n, dtype=torch.float64)[perm]
        left = static_mix(p @ a @ p.T, h[:, perm])
        right = static_mix(a, h)[:, perm]
        assert (left - right).abs().max() < 1e-12


def test_dynamic_single_part_is_value_projection():
    layer = _layer(n_parts=1)
    g = torch.Generator().manual_seed(5)
    h = _rand(g, 4, 1, 4)
    out = layer.dynamic_forward(h)
    want = h @ layer.dyn_v
    assert (out - want).abs().max() < 1e-12


def test_dynamic_identical_tokens_give_uniform_attention():
    layer = _layer(n_parts=6)
    g = torch.Generator().manual_seed(6)
    token = _rand(g, 1, 1, 4)
    h = token.expand(2, 6, 4).contiguous()
    _, rows = dynamic_oracle(
        h.numpy(), layer.dyn_q.detach().numpy(), layer.dyn_k.detach().numpy(),
        layer.dyn_v.detach().numpy()
    )
    rows = np.asarray(rows)
    assert np.abs(rows - 1.0 / 6.0).max() < 1e-12
    out = layer.dynamic_forward(h)
    want = h @ layer.dyn_v  # any convex mix of identical value rows
    assert (out - want).abs().max() < 1e-10


def test_dynamic_matches_loop_oracle():
    g = torch.Generator().manual_seed(7)
    layer = _layer(n_parts=4, token_dim=5)
    h = _rand(g, 6, 4, 5)
    got = layer.dynamic_forward(h).detach().numpy()
    want, rows = dynamic_oracle(
        h.numpy(), layer.dyn_q.detach().numpy(), layer.dyn_k.detach().numpy(),
        layer.dyn_v.detach().numpy()
    )
    assert np.abs(got - want).max() < 1e-10
    for frame_rows in rows:
        for row in frame_rows:
            assert abs(sum(row) - 1.0) < 1e-6


def test_temporal_single_frame_no_text():
    layer = _layer()
    g = torch.Generator().manual_seed(8)
    h = _rand(g, 1, 3, 4)
    out = layer.temporal_forward(h, None)
    want = h @ layer.tmp_v
    assert (out - want).abs().max() < 1e-12


def test_temporal_no_text_matches_self_attention_oracle():
    g = torch.Generator().manual_seed(9)
    layer = _layer()
    h = _rand(g, 7, 3, 4)
    got = layer.temporal_forward(h, None).detach().numpy()
    p = {k: v.detach().numpy() for k, v in layer.named_parameters()}
    want = temporal_oracle(h.numpy(), None, p["tmp_q"], p["tmp_k"], p["tmp_v"],
                           p["txt_k"], p["txt_v"])
    assert np.abs(got - want).max() < 1e-10


def test_temporal_with_text_matches_concat_oracle():
    g = torch.Generator().manual_seed(10)
    layer = _layer()
    h = _rand(g, 5, 3, 4)
    text = _rand(g, 2, 3)
    got = layer.temporal_forward(h, text).detach().numpy()
    p = {k: v.detach().numpy() for k, v in layer.named_parameters()}
    want = temporal_oracle(h.numpy(), text.numpy(), p["tmp_q"], p["tmp_k"], p["tmp_v"],
                           p["txt_k"], p["txt_v"])
    assert np.abs(got - want).max() < 1e-10


def test_temporal_dominant_text_key_wins():
    layer = _layer(n_parts=1)
    with torch.no_grad():
        layer.tmp_q.copy_(torch.eye(4, dtype=torch.float64))
        layer.tmp_k.zero_()  # motion keys score 0 against everything
        layer.txt_k.copy_(torch.full((3, 4), 40.0, dtype=torch.float64))
    g = torch.Generator().manual_seed(11)
    h = _rand(g, 3, 1, 4).abs() + 0.5  # positive queries
    text = torch.ones(1, 3, dtype=torch.float64)
    out = layer.temporal_forward(h, text)
    want = text @ layer.txt_v
    assert (out - want).abs().max() < 1e-8
    p = {k: v.detach().numpy() for k, v in layer.named_parameters()}
    oracle = temporal_oracle(h.numpy(), text.numpy(), p["tmp_q"], p["tmp_k"], p["tmp_v"],
                             p["txt_k"], p["txt_v"])
    assert np.abs(out.detach().numpy() - oracle).max() < 1e-10


def test_temporal_rejects_wrong_text_width():
    layer = _layer(text_dim=3)
    with pytest.raises(DataError):
        layer.temporal_forward(torch.zeros(2, 3, 4, dtype=torch.float64),
                               torch.zeros(2, 5, dtype=torch.float64))


def test_moe_single_expert_is_plain_ffn():
    layer = _layer(n_experts=1)
    g = torch.Generator().manual_seed(12)
    x = _rand(g, 10, 4)
    out = layer.moe_forward(x)
    want = F.gelu(x @ layer.expert_w1[0] + layer.expert_b1[0]) @ layer.expert_w2[0]
    want = want + layer.expert_b2[0]
    assert (out - want).abs().max() < 1e-12


def test_moe_identical_experts_ignore_gating():
    layer = _layer(n_experts=3)
    with torch.no_grad():
        for i in (1, 2):
            layer.expert_w1[i].copy_(layer.expert_w1[0])
            layer.expert_b1[i].copy_(layer.expert_b1[0])
            layer.expert_w2[i].copy_(layer.expert_w2[0])
            layer.expert_b2[i].copy_(layer.expert_b2[0])
    g = torch.Generator().manual_seed(13)
    x = _rand(g, 8, 4)
    out = layer.moe_forward(x)
    want = F.gelu(x @ layer.expert_w1[0] + layer.expert_b1[0]) @ layer.expert_w2[0]
    want = want + layer.expert_b2[0]
    assert (out - want).abs().max() < 1e-10


def test_moe_matches_loop_oracle():
    layer = _layer(n_experts=4, token_dim=6, hidden=16)
    g = torch.Generator().manual_seed(14)
    x = _rand(g, 12, 6)
    got = layer.moe_forward(x).detach().numpy()
    p = {k: v.detach().numpy() for k, v in layer.named_parameters()}
    want = moe_oracle(x.numpy(), p["gate"], p["expert_w1"], p["expert_b1"],
                      p["expert_w2"], p["expert_b2"])
    assert np.abs(got - want).max() < 1e-10


def test_layer_zero_projections_compose_to_layernorm_of_double():
    layer = _layer(n_parts=4, token_dim=6)
    with torch.no_grad():
        for name in ("dyn_q", "dyn_k", "dyn_v", "tmp_q", "tmp_k", "tmp_v", "txt_k", "txt_v"):
            getattr(layer, name).zero_()
        layer.expert_w2.zero_()
        layer.expert_b2.zero_()
    g = torch.Generator().manual_seed(15)
    h = _rand(g, 5, 4, 6)
    out = layer(h, None)
    want = F.layer_norm(2.0 * h, (6,))
    assert (out - want).abs().max() < 1e-12


def test_layer_matches_composed_oracle():
    g = torch.Generator().manual_seed(16)
    for seed in range(3):
        layer = _layer(seed=seed)
        h = _rand(g, 5, 3, 4)
        text = _rand(g, 2, 3)
        got = layer(h, text).detach().numpy()
        want = layer_oracle(layer, h.numpy(), text.numpy())
        assert np.abs(got - want).max() < 1e-10


def test_layer_with_positions_matches_oracle():
    g = torch.Generator().manual_seed(17)
    layer = _layer(seed=5, use_positions=True)
    h = _rand(g, 6, 3, 4)
    text = _rand(g, 2, 3)
    got = layer(h, text).detach().numpy()
    want = layer_oracle(layer, h.numpy(), text.numpy())
    assert np.abs(got - want).max() < 1e-10


def test_layer_single_token_manual_arithmetic():
    layer = _layer(n_parts=1, token_dim=2, n_experts=2, hidden=3, seed=21)
    g = torch.Generator().manual_seed(18)
    x = _rand(g, 1, 1, 2)
    out = layer(x, None).detach().numpy().ravel()

    xv = x.numpy().reshape(2)
    p = {k: v.detach().numpy() for k, v in layer.named_parameters()}
    # one part, one frame: every softmax collapses to weight 1
    e = p["adjacency"][0, 0] * xv + xv @ p["dyn_v"] + xv @ p["tmp_v"]
    pre = xv + e
    mu = pre.mean()
    var = ((pre - mu) ** 2).mean()
    h = (pre - mu) / math.sqrt(var + 1e-5) * p["norm_scale"] + p["norm_shift"]
    logits = h @ p["gate"]
    gates = np.exp(logits - logits.max())
    gates = gates / gates.sum()
    moe = np.zeros(2)
    for e_i in range(2):
        hid = h @ p["expert_w1"][e_i] + p["expert_b1"][e_i]
        hid = np.array([0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in hid])
        moe += gates[e_i] * (hid @ p["expert_w2"][e_i] + p["expert_b2"][e_i])
    want = h + moe
    assert np.abs(out - want).max() < 1e-10


def test_layer_frame_permutation_equivariance_without_positions():
    g = torch.Generator().manual_seed(19)
    layer = _layer(seed=3)
    h = _rand(g, 6, 3, 4)
    perm = torch.as_tensor(np.random.default_rng(19).permutation(6))
    a = layer(h, None)[perm]
    b = layer(h[perm], None)
    assert (a - b).abs().max() < 1e-10
    # branch level as well
    assert (layer.static_forward(h)[perm] - layer.static_forward(h[perm])).abs().max() < 1e-12
    assert (layer.dynamic_forward(h)[perm] - layer.dynamic_forward(h[perm])).abs().max() < 1e-12


def test_positions_make_frames_order_sensitive():
    g = torch.Generator().manual_seed(20)
    layer = _layer(seed=3, use_positions=True)
    h = _rand(g, 6, 3, 4)
    perm = torch.as_tensor([5, 4, 3, 2, 1, 0])
    a = layer(h, None)[perm]
    b = layer(h[perm], None)
    assert (a - b).abs().max() > 1e-6


def test_layer_accepts_batched_input():
    g = torch.Generator().manual_seed(21)
    layer = _layer(seed=7)
    h = _rand(g, 2, 5, 3, 4)
    text = _rand(g, 2, 2, 3)
    out = layer(h, text)
    assert out.shape == h.shape
    for b in range(2):
        single = layer(h[b], text[b])
        assert (out[b] - single).abs().max() < 1e-12


def test_sinusoidal_embedding_shape_and_zero_position():
    pe = sinusoidal_embedding(torch.arange(4, dtype=torch.float64), 8)
    assert pe.shape == (4, 8)
    assert torch.equal(pe[0, :4], torch.zeros(4, dtype=torch.float64))
    assert torch.equal(pe[0, 4:], torch.ones(4, dtype=torch.float64))
    odd = sinusoidal_embedding(torch.arange(3, dtype=torch.float64), 5)
    assert odd.shape == (3, 5)
    assert not odd[:, -1].count_nonzero()


def test_layer_gradients_match_finite_differences():
    layer = _layer(n_parts=3, token_dim=4, text_dim=3, n_experts=2, hidden=8, seed=31)
    g = torch.Generator().manual_seed(22)
    h = _rand(g, 5, 3, 4)
    text = _rand(g, 2, 3)
    probe = _rand(g, 5, 3, 4)

    def loss():
        return (layer(h, text) * probe).sum()

    errors = fd_group_errors(loss, layer, step=1e-5)
    for name, err in errors.items():
        assert err < 1e-4, f"{name}: {err:.3e}"
