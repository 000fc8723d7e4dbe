import numpy as np
import pytest
import torch

from bodydiff.backbone import ModelConfig, build_model
from bodydiff.checkpoint import state_checksums
from bodydiff.control import (
    ControlBranch,
    FreezePolicy,
    align_condition,
    attach_control_branch,
    controlled_forward,
    set_freeze_policy,
)
from bodydiff.errors import DataError, UsageError
from bodydiff.topology import BodyPart, BodyPartLayout


def _tiny_partition(token_dim=4):
    parts = (
        BodyPart("a", tuple(range(0, 2))),
        BodyPart("b", tuple(range(2, 5))),
        BodyPart("c", tuple(range(5, 9))),
    )
    return BodyPartLayout(parts=parts, dim=9, token_dim=token_dim)


def _tiny_model(layers=2, seed=0, perturb=True):
    cfg = ModelConfig(layers=layers, n_parts=3, token_dim=4, ffn_dim=8, n_experts=2,
                      max_frames=16, text_dim=3)
    model = build_model(cfg, seed=seed, partition=_tiny_partition())
    if perturb:
        g = torch.Generator().manual_seed(1000 + seed)
        with torch.no_grad():
            model.out_weight.normal_(generator=g)
            model.out_bias.normal_(generator=g)
    return model


def test_attach_copies_blocks_bit_exactly():
    model = _tiny_model(layers=4)
    before = state_checksums(model)
    branch = attach_control_branch(model, k=2, cond_dim=2, seed=5)
    assert len(branch.blocks) == 2
    for i in range(2):
        for (n, pa), (_, pb) in zip(
            model.layers[i].named_parameters(), branch.blocks[i].named_parameters()
        ):
            assert torch.equal(pa, pb), n
    # main branch untouched by attaching
    assert state_checksums(model) == before


def test_attach_default_k_is_half_the_layers():
    model = _tiny_model(layers=4)
    assert len(attach_control_branch(model).blocks) == 2
    model2 = _tiny_model(layers=2)
    assert len(attach_control_branch(model2).blocks) == 1


def test_bridges_start_exactly_zero():
    branch = attach_control_branch(_tiny_model(), k=2, cond_dim=3)
    assert not branch.bridge_weight.count_nonzero()
    assert not branch.bridge_bias.count_nonzero()


def test_attach_k_bounds():
    model = _tiny_model(layers=2)
    assert len(attach_control_branch(model, k=2).blocks) == 2
    with pytest.raises(UsageError):
        attach_control_branch(model, k=0)
    with pytest.raises(UsageError):
        attach_control_branch(model, k=3)


def test_align_condition_exact_fit():
    track = torch.randn(8, 2, generator=torch.Generator().manual_seed(0))
    aligned, mask = align_condition(track, 8)
    assert torch.equal(aligned, track)
    assert mask.all()


def test_align_condition_pads_with_zeros():
    track = torch.randn(100, 2, generator=torch.Generator().manual_seed(1))
    aligned, mask = align_condition(track, 120)
    assert aligned.shape == (120, 2)
    assert torch.equal(aligned[:100], track)
    assert not aligned[100:].count_nonzero()
    assert int(mask.sum()) == 100 and not mask[100:].any()


def test_align_condition_rejects_long_tracks():
    with pytest.raises(DataError):
        align_condition(torch.zeros(10, 2), 8)


def test_padded_rows_contribute_exactly_zero():
    branch = attach_control_branch(_tiny_model(), k=1, cond_dim=2, seed=3)
    track = torch.randn(5, 2, generator=torch.Generator().manual_seed(2))
    aligned, _ = align_condition(track, 9)
    tokens = branch.condition_tokens(aligned)
    assert torch.equal(tokens[5:], torch.zeros(4, 3, 4))


def test_short_track_equals_manually_padded_track():
    model = _tiny_model()
    branch = attach_control_branch(model, k=1, cond_dim=2, seed=4)
    with torch.no_grad():
        branch.bridge_weight.normal_(generator=torch.Generator().manual_seed(3))
    g = torch.Generator().manual_seed(4)
    x = torch.randn(8, 9, generator=g)
    track = torch.randn(5, 2, generator=g)
    padded = torch.cat([track, torch.zeros(3, 2)])
    a = controlled_forward(model, branch, x, 3, None, track)
    b = controlled_forward(model, branch, x, 3, None, padded)
    assert torch.equal(a, b)


def test_zero_bridge_identity_on_random_inputs():
    model = _tiny_model(layers=2)
    branch = attach_control_branch(model, k=1, cond_dim=2, seed=6)
    g = torch.Generator().manual_seed(5)
    for _ in range(10):
        x = torch.randn(6, 9, generator=g)
        text = torch.randn(2, 3, generator=g)
        track = torch.randn(4, 2, generator=g)
        t = int(torch.randint(1, 100, (1,), generator=g))
        assert torch.equal(
            controlled_forward(model, branch, x, t, text, track), model(x, t, text)
        )


def test_nonzero_bridge_changes_output():
    model = _tiny_model()
    branch = attach_control_branch(model, k=1, cond_dim=2, seed=7)
    g = torch.Generator().manual_seed(6)
    x = torch.randn(6, 9, generator=g)
    track = torch.randn(6, 2, generator=g)
    base = model(x, 4, None)
    with torch.no_grad():
        branch.bridge_weight.normal_(generator=g)
    assert not torch.equal(controlled_forward(model, branch, x, 4, None, track), base)


def test_single_layer_hand_composition():
    model = _tiny_model(layers=1)
    branch = attach_control_branch(model, k=1, cond_dim=2, seed=8)
    g = torch.Generator().manual_seed(7)
    with torch.no_grad():
        branch.bridge_weight.normal_(generator=g)
        branch.bridge_bias.normal_(generator=g)
    x = torch.randn(5, 9, generator=g)
    text = torch.randn(2, 3, generator=g)
    track = torch.randn(3, 2, generator=g)
    t = 9

    got = controlled_forward(model, branch, x, t, text, track)

    base = model.encode_tokens(x, t)
    aligned, _ = align_condition(track, 5)
    h_c = base + branch.condition_tokens(aligned)
    inj = branch.bridge(0, branch.blocks[0](h_c, text))
    h = model.layers[0](base + inj, text)
    tokens = torch.einsum("...nd,nde->...ne", h, model.out_weight) + model.out_bias
    want = model.codec.decode(tokens)
    assert torch.equal(got, want)


def test_branch_backbone_mismatch_rejected():
    model = _tiny_model()
    other = build_model(
        ModelConfig(layers=2, n_parts=3, token_dim=8, ffn_dim=8, n_experts=2,
                    max_frames=16, text_dim=3),
        seed=0,
        partition=_tiny_partition(token_dim=8),
    )
    branch = attach_control_branch(model, k=1, cond_dim=2)
    with pytest.raises(DataError):
        controlled_forward(other, branch, torch.zeros(4, 9), 1, None, None)


def test_freeze_policy_validation():
    with pytest.raises(UsageError):
        FreezePolicy(mode="half-freeze")
    with pytest.raises(UsageError):
        FreezePolicy(mode="full-freeze", unfrozen_parts=frozenset({"a"}))
    with pytest.raises(UsageError):
        FreezePolicy(mode="local-unfreeze")


def test_full_freeze_trainable_set_is_branch_only():
    model = _tiny_model()
    branch = attach_control_branch(model, k=1, cond_dim=2)
    trainable = set_freeze_policy(model, branch, FreezePolicy())
    assert all(name.startswith("branch.") for name in trainable)
    assert all(not p.requires_grad for p in model.parameters())
    assert all(p.requires_grad for p in branch.parameters())
    branch_names = {f"branch.{n}" for n, _ in branch.named_parameters()}
    assert set(trainable) == branch_names


def test_local_unfreeze_adds_exactly_the_named_codecs():
    model = _tiny_model()
    branch = attach_control_branch(model, k=1, cond_dim=2)
    policy = FreezePolicy(mode="local-unfreeze", unfrozen_parts=frozenset({"a", "c"}))
    trainable = set_freeze_policy(model, branch, policy)
    extra = {n for n in trainable if n.startswith("backbone.")}
    assert len(extra) == 8  # 2 parts x (enc W, enc b, dec W, dec b)
    for i in (0, 2):
        assert f"backbone.codec.enc_weight.{i}" in extra
        assert f"backbone.codec.dec_weight.{i}" in extra
    assert model.codec.enc_weight[1].requires_grad is False
    assert model.codec.enc_weight[0].requires_grad is True


def test_unknown_part_in_policy_rejected():
    model = _tiny_model()
    branch = attach_control_branch(model, k=1, cond_dim=2)
    with pytest.raises(UsageError, match="wings"):
        set_freeze_policy(
            model, branch, FreezePolicy(mode="local-unfreeze", unfrozen_parts=frozenset({"wings"}))
        )


def test_one_step_under_full_freeze_keeps_main_branch_and_moves_a_bridge():
    model = _tiny_model()
    branch = attach_control_branch(model, k=1, cond_dim=2, seed=9)
    trainable = set_freeze_policy(model, branch, FreezePolicy())
    before = state_checksums(model)
    opt = torch.optim.Adam(trainable.values(), lr=1e-2)
    g = torch.Generator().manual_seed(8)
    x = torch.randn(6, 9, generator=g)
    track = torch.randn(6, 2, generator=g)
    target = torch.randn(6, 9, generator=g)
    loss = torch.nn.functional.mse_loss(
        controlled_forward(model, branch, x, 5, None, track), target
    )
    loss.backward()
    opt.step()
    assert state_checksums(model) == before
    assert branch.bridge_weight.count_nonzero() or branch.bridge_bias.count_nonzero()
