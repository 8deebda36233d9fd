import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import GRAD_NET, gradient_check, relative_error
from oracles import hand_count
from iqtcfm.config import ConfigError, NetworkConfig, PRESETS
from iqtcfm.core import make_rng
from iqtcfm.network import (
    BottleneckTransformer,
    MultiScaleStem,
    ParameterStore,
    ResBlock,
    SEModule,
    SelfAttention,
    TimeEmbedding,
    VelocityUNet,
    build_model,
    count_params,
    forward,
    init_params,
    load_checkpoint,
    pixel_shuffle,
    pixel_unshuffle,
    save_checkpoint,
    sinusoidal_features,
)


def test_unshuffle_worked_example():
    x = np.arange(1, 17, dtype=np.float32).reshape(1, 4, 4)
    y = pixel_unshuffle(x)
    assert y.shape == (4, 2, 2)
    np.testing.assert_array_equal(y[0], [[1, 3], [9, 11]])
    np.testing.assert_array_equal(y[1], [[2, 4], [10, 12]])
    np.testing.assert_array_equal(y[2], [[5, 7], [13, 15]])
    np.testing.assert_array_equal(y[3], [[6, 8], [14, 16]])


def test_shuffle_worked_example():
    x = np.array([1.0, 2.0, 3.0, 4.0], np.float32).reshape(4, 1, 1)
    np.testing.assert_array_equal(pixel_shuffle(x), [[[1, 2], [3, 4]]])


def test_matches_torch_builtin():
    x = torch.randn(2, 3, 6, 8)
    assert torch.equal(pixel_unshuffle(x), torch.nn.functional.pixel_unshuffle(x, 2))
    y = torch.randn(2, 8, 3, 5)
    assert torch.equal(pixel_shuffle(y), torch.nn.functional.pixel_shuffle(y, 2))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_shuffle_round_trip_bit_exact(c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((c, 2 * h, 2 * w)).astype(np.float32)
    y = pixel_unshuffle(x)
    assert y.shape == (4 * c, h, w)
    assert np.array_equal(pixel_shuffle(y), x)
    assert np.sort(y, axis=None).tobytes() == np.sort(x, axis=None).tobytes()
    z = np.random.default_rng(seed + 1).standard_normal((4 * c, h, w)).astype(np.float32)
    assert pixel_shuffle(z).shape == (c, 2 * h, 2 * w)
    assert np.array_equal(pixel_unshuffle(pixel_shuffle(z)), z)


def test_shuffle_rejects_bad_shapes():
    with pytest.raises(ValueError):
        pixel_unshuffle(np.zeros((1, 3, 4)))
    with pytest.raises(ValueError):
        pixel_shuffle(np.zeros((3, 2, 2)))


def test_sinusoidal_features_at_zero_and_shape():
    f = sinusoidal_features(0.0, 8)
    assert torch.equal(f, torch.tensor([[0.0] * 4 + [1.0] * 4]))
    for t in (0.0, 0.37, 1.0):
        assert sinusoidal_features(t, 16).shape == (1, 16)


def test_time_embedding_distinguishes_nearby_times():
    torch.manual_seed(0)
    emb = TimeEmbedding(32)
    a, b = emb(torch.tensor([0.5])), emb(torch.tensor([0.501]))
    assert a.shape == (1, 32) and torch.isfinite(a).all()
    assert float((a - b).detach().norm()) > 0
    assert torch.equal(emb(torch.tensor([0.5])), a)


def test_stem_shape_zero_and_translation():
    torch.manual_seed(0)
    stem = MultiScaleStem(2, 16)
    x = torch.randn(1, 2, 40, 40)
    y = stem(x)
    assert y.shape == (1, 64, 40, 40)
    shifted = stem(torch.roll(x, 1, dims=-1))
    # interior columns unaffected by the 7-px border of the 15x15 branch
    assert torch.allclose(shifted[..., 8:-8, 9:-8], y[..., 8:-8, 8:-9], atol=1e-5)
    for p in stem.parameters():
        torch.nn.init.zeros_(p)
    assert torch.count_nonzero(stem(x)) == 0


def test_res_block_identity_when_second_path_zero():
    blk = ResBlock(8, 8, 4, 2, 2)
    torch.nn.init.zeros_(blk.norm2.weight)
    torch.nn.init.zeros_(blk.norm2.bias)
    x = torch.randn(2, 8, 6, 6)
    out = blk(x, torch.randn(2, 4))
    assert torch.equal(out, x)


def test_res_block_shape_and_shortcut():
    blk = ResBlock(4, 8, 4, 2, 2)
    assert blk(torch.randn(1, 4, 5, 5), torch.randn(1, 4)).shape == (1, 8, 5, 5)


def test_se_module_properties():
    se = SEModule(8, 2)
    for p in se.fc2.parameters():
        torch.nn.init.zeros_(p)
    x = torch.randn(2, 8, 4, 4)
    assert torch.allclose(se(x), 0.5 * x)
    se2 = SEModule(8, 2)
    torch.nn.init.zeros_(se2.fc1.bias)
    assert torch.count_nonzero(se2(torch.zeros(1, 8, 3, 3))) == 0
    g = se2.gates(x)
    g = g.detach()
    assert float(g.min()) > 0 and float(g.max()) < 1
    s = x.mean(dim=(-2, -1))
    assert torch.allclose(se2.fc1(2 * s), 2 * se2.fc1(s), atol=1e-6)


def test_attention_rows_stochastic_and_single_token():
    torch.manual_seed(1)
    attn = SelfAttention(8, 2)
    w, _ = attn.weights_and_values(torch.randn(2, 10, 8))
    assert torch.allclose(w.sum(-1), torch.ones(2, 2, 10), atol=1e-6)
    x = torch.randn(1, 1, 8)
    v = attn.qkv(x)[..., 16:]
    assert torch.allclose(attn(x), attn.out(v), atol=1e-6)


def test_transformer_permutation_equivariant():
    torch.manual_seed(2)
    blk = BottleneckTransformer(8, 2)
    x = torch.randn(1, 8, 4, 4)
    perm = torch.randperm(16)
    xp = x.flatten(2)[..., perm].reshape(1, 8, 4, 4)
    y = blk(x).flatten(2)[..., perm]
    assert torch.allclose(blk(xp).flatten(2), y, atol=1e-5)


def test_forward_shape_and_zero_head(tiny_net_cfg):
    store = init_params(tiny_net_cfg, make_rng(0))
    rng = make_rng(1)
    x = rng.standard_normal((1, 32, 32)).astype(np.float32)
    out = forward(store, tiny_net_cfg, x, x, 0.4)
    assert out.shape == (1, 32, 32)
    assert np.count_nonzero(out) == 0


def test_forward_rejects_bad_shapes(tiny_net_cfg):
    model = build_model(tiny_net_cfg, make_rng(0))
    with pytest.raises(ConfigError):
        model(torch.zeros(1, 1, 18, 18), torch.zeros(1, 1, 18, 18), 0.5)
    with pytest.raises(ConfigError):
        model(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8), 0.5)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 1, 16, 16), torch.zeros(1, 1, 32, 32), 0.5)


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(groupnorm_groups=7).validate()
    with pytest.raises(ConfigError):
        NetworkConfig(channel_mult=(1, 2)).validate()
    with pytest.raises(ConfigError):
        NetworkConfig(attn_heads=5).validate()


def test_every_parameter_group_receives_gradient():
    store = init_params(GRAD_NET, make_rng(3))
    store["head.weight"] = make_rng(4).standard_normal(store["head.weight"].shape).astype(np.float32)
    model = store.to_model(GRAD_NET)
    x = torch.randn(2, 1, 16, 16)
    model(x, torch.rand(2, 1, 16, 16), torch.tensor([0.2, 0.7])).pow(2).mean().backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or float(p.grad.abs().sum()) == 0]
    assert dead == []


def test_finite_difference_gradients():
    res = gradient_check(per_block=20, seed=5)
    for kind, rows in res.items():
        assert len(rows) >= 20
        for name, idx, a, b in rows:
            assert relative_error(a, b) < 1e-3, (kind, name, idx, a, b)


def test_init_determinism_and_statistics():
    cfg = PRESETS["default"]().network
    a = init_params(cfg, make_rng(7))
    b = init_params(cfg, make_rng(7))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.any(a["head.weight"]) and not np.any(a["head.bias"])
    checked = 0
    for name, w in a.items():
        if name.endswith("weight") and w.ndim >= 2 and w.size >= 10000 and not name.startswith("head"):
            fan_in = int(np.prod(w.shape[1:]))
            assert w.var() == pytest.approx(1 / fan_in, rel=0.2), name
            checked += 1
    assert checked > 5


def test_single_conv_hand_count():
    conv = torch.nn.Conv2d(1, 8, 3)
    assert sum(p.numel() for p in conv.parameters()) == 80


@pytest.mark.parametrize("preset", ["tiny", "desk", "default"])
def test_count_params_matches_hand_count(preset):
    cfg = PRESETS[preset]().network
    assert count_params(cfg) == hand_count(cfg)


def test_count_params_monotone_in_width():
    cfg = NetworkConfig(branch_channels=8)
    wider = NetworkConfig(branch_channels=16)
    assert count_params(wider) > count_params(cfg)


@pytest.mark.parametrize("preset", ["tiny", "desk"])
def test_checkpoint_round_trip(tmp_path, preset):
    cfg = PRESETS[preset]().network
    store = init_params(cfg, make_rng(8))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, store, cfg, {"epoch": 3})
    back, cfg2, extra = load_checkpoint(path)
    assert cfg2 == cfg and extra == {"epoch": 3}
    assert list(back) == list(store)
    assert all(back[k].tobytes() == store[k].tobytes() for k in store)
    assert back.total_count == count_params(cfg)
    save_checkpoint(tmp_path / "m2.ckpt", back, cfg2, {"epoch": 3})
    assert path.read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_store_rejects_mismatched_layout(tiny_net_cfg):
    store = init_params(tiny_net_cfg, make_rng(0))
    other = NetworkConfig(**{**tiny_net_cfg.__dict__, "branch_channels": 2})
    with pytest.raises(ValueError):
        store.to_model(other)
    assert isinstance(store, ParameterStore) and isinstance(store.to_model(tiny_net_cfg), VelocityUNet)
