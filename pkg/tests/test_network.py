import pytest
import torch
import torch.nn as nn

from echoseg.network import (
    ConfigurationError,
    NetworkConfig,
    ResidualBlock,
    build,
    count_parameters,
    forward,
    group_normalize,
    load_checkpoint,
    save_checkpoint,
)

SMALL = NetworkConfig(levels=3, base_channels=8, convs_per_block=(1, 2, 2))


def _conv(cin, cout, k):
    return cin * cout * k * k + cout


def test_output_shapes():
    model = build(SMALL, seed=0).eval()
    out = model(torch.zeros(2, 1, 32, 48))
    assert out.main_logits.shape == (2, 15, 32, 48)
    assert len(out.aux_logits) == 2
    assert all(a.shape == (2, 15, 32, 48) for a in out.aux_logits)
    assert len(out.all_logits) == 3


def test_parameter_count_by_hand():
    gn = lambda c: 2 * c  # noqa: E731
    expected = (
        _conv(1, 8, 5) + gn(8) + _conv(1, 8, 1)  # encoder 0 with projection shortcut
        + _conv(8, 16, 2) + gn(16)  # down 0
        + 2 * (_conv(16, 16, 5) + gn(16))  # encoder 1
        + _conv(16, 32, 2) + gn(32)  # down 1
        + 2 * (_conv(32, 32, 5) + gn(32))  # bottom
        + _conv(32, 16, 2) + gn(16)  # up 1
        + _conv(32, 16, 5) + gn(16) + _conv(16, 16, 5) + gn(16) + _conv(32, 16, 1)  # decoder 1
        + _conv(16, 8, 2) + gn(8)  # up 0
        + _conv(16, 8, 5) + gn(8) + _conv(16, 8, 1)  # decoder 0
        + _conv(8, 15, 1)  # head
        + _conv(16, 15, 1) + _conv(8, 15, 1)  # auxiliary heads
    )
    assert expected == 93573
    assert count_parameters(build(SMALL)) == expected


def test_default_parameter_count():
    assert count_parameters(build(NetworkConfig())) == 9_043_917


def test_configuration_errors():
    with pytest.raises(ConfigurationError, match="divisible"):
        NetworkConfig(base_channels=12)
    with pytest.raises(ConfigurationError):
        NetworkConfig(levels=3, convs_per_block=(1, 2))
    with pytest.raises(ConfigurationError):
        NetworkConfig(kernel_size=4)
    with pytest.raises(ConfigurationError):
        NetworkConfig(levels=3, convs_per_block=(1, 2, 2), deep_supervision_levels=3)
    model = build(SMALL)
    with pytest.raises(ConfigurationError):
        model(torch.zeros(1, 1, 30, 32))
    with pytest.raises(ValueError):
        model(torch.zeros(1, 3, 32, 32))


def test_zero_heads_give_uniform_softmax():
    model = build(SMALL, seed=1).eval()
    for head in [model.head, *model.aux_heads.values()]:
        nn.init.zeros_(head.weight)
        nn.init.zeros_(head.bias)
    out = model(torch.randn(1, 1, 16, 16))
    for logits in out.all_logits:
        p = torch.softmax(logits, 1)
        torch.testing.assert_close(p, torch.full_like(p, 1 / 15))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_batch_independence_in_eval(seed):
    model = build(SMALL, seed=seed).eval()
    x = torch.randn(4, 1, 32, 32, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        batched = model(x).main_logits
        single = torch.cat([model(x[i : i + 1]).main_logits for i in range(4)])
    assert (batched - single).abs().max().item() < 1e-5


def test_full_dropout_leaves_shortcut():
    cfg = NetworkConfig(levels=3, base_channels=8, convs_per_block=(1, 2, 2), dropout_rate=1.0)
    block = ResidualBlock(8, 16, 2, cfg).train()
    x = torch.randn(2, 8, 8, 8)
    torch.testing.assert_close(block(x), block.shortcut(x))


def test_dropout_masks_follow_generator():
    model = build(SMALL, seed=0).train()
    x = torch.randn(2, 1, 16, 16)
    a = forward(model, x, torch.Generator().manual_seed(5)).main_logits
    b = forward(model, x, torch.Generator().manual_seed(5)).main_logits
    c = forward(model, x, torch.Generator().manual_seed(6)).main_logits
    torch.testing.assert_close(a, b)
    assert not torch.equal(a, c)


def test_group_normalize_matches_reference():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(3, 16, 5, 7, generator=g, dtype=torch.float64)
    ref = nn.GroupNorm(8, 16).double()
    with torch.no_grad():
        ref.weight.copy_(torch.randn(16, generator=g))
        ref.bias.copy_(torch.randn(16, generator=g))
    torch.testing.assert_close(group_normalize(x, 8, ref.weight, ref.bias), ref(x))
    # statistics are per sample
    torch.testing.assert_close(group_normalize(x, 8)[1:2], group_normalize(x[1:2], 8))
    with pytest.raises(ValueError):
        group_normalize(x, 3)


def test_every_parameter_receives_gradient():
    cfg = NetworkConfig(levels=3, base_channels=8, convs_per_block=(1, 2, 2), dropout_rate=0.0)
    model = build(cfg, seed=0).train()
    out = model(torch.randn(2, 1, 16, 16))
    sum(t.square().mean() for t in out.all_logits).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_checkpoint_round_trip(tmp_path):
    model = build(SMALL, seed=3).eval()
    path = save_checkpoint(model, tmp_path / "m.pt", {"epoch": 4})
    loaded, cfg, meta = load_checkpoint(path, expected=SMALL)
    assert cfg == SMALL and meta == {"epoch": 4} and not loaded.training
    x = torch.randn(1, 1, 16, 16)
    with torch.no_grad():
        torch.testing.assert_close(loaded(x).main_logits, model(x).main_logits, rtol=0, atol=0)
    with pytest.raises(ConfigurationError):
        load_checkpoint(path, expected=NetworkConfig())
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "bad.pt")
