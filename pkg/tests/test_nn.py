import numpy as np
import pytest

from tstdepth import ops
from tstdepth.errors import ConfigError, UsageError
from tstdepth.nn import (
    FFN,
    AttentionSpec,
    Conv2d,
    ConvBN,
    CrossAttention,
    FFNSpec,
    InvertedResidual,
    InvertedResidualSpec,
    TransformerBlock,
    zero_weights,
)
from tstdepth.tensor import Tensor, precision, relu6

from oracles import loop_attention


def manual_convbn(m: ConvBN, x: Tensor) -> Tensor:
    c, bn = m.conv, m.bn
    y = ops.conv2d(x, c.weight, c.bias, c.stride, c.padding, c.groups)
    y = ops.batch_norm2d(y, bn.weight, bn.bias, bn.running_mean.copy(), bn.running_var.copy(), m.training, bn.momentum, bn.eps)
    return relu6(y) if m.act else y


def test_conv2d_module_params_and_macs():
    conv = Conv2d(3, 8, 3, bias=True)
    assert conv.num_parameters() == 3 * 8 * 9 + 8 == 224
    assert conv.macs(32, 32) == 221_184


def test_inverted_residual_shortcut_rule():
    assert InvertedResidualSpec(16, 16, 4, 1).use_shortcut
    assert not InvertedResidualSpec(16, 16, 4, 2).use_shortcut
    assert not InvertedResidualSpec(16, 24, 4, 1).use_shortcut
    with pytest.raises(ConfigError):
        InvertedResidualSpec(16, 16, 0, 1)
    with pytest.raises(ConfigError):
        InvertedResidualSpec(16, 16, 4, 3)


def test_inverted_residual_zero_branch_is_identity(rng):
    block = InvertedResidual(InvertedResidualSpec(8, 8, 4, 1), rng=rng)
    zero_weights(block)
    block.eval()
    x = Tensor(rng.standard_normal((1, 8, 6, 6)))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_inverted_residual_stride2_halves(rng):
    block = InvertedResidual(InvertedResidualSpec(16, 24, 4, 2), rng=rng)
    assert block(Tensor(rng.standard_normal((1, 16, 32, 32)))).shape == (1, 24, 16, 16)


def test_inverted_residual_matches_composition(rng):
    with precision(np.float64):
        block = InvertedResidual(InvertedResidualSpec(16, 24, 4, 1), rng=rng)
        x = Tensor(rng.standard_normal((1, 16, 8, 8)))
        ref = manual_convbn(block.project, manual_convbn(block.depthwise, manual_convbn(block.expand, x)))
        got = block(x)
    np.testing.assert_allclose(got.data, ref.data, atol=1e-12)
    assert block.expand.conv.kernel == 1 and block.depthwise.conv.groups == 64 and not block.project.act


def test_inverted_residual_channel_mismatch(rng):
    block = InvertedResidual(InvertedResidualSpec(8, 8, 2, 1), rng=rng)
    with pytest.raises(ConfigError, match="channels"):
        block(Tensor(np.zeros((1, 4, 4, 4))))


def test_attention_spec_for_channels():
    assert [AttentionSpec.for_channels(c).heads for c in (64, 128, 160)] == [2, 4, 5]
    assert AttentionSpec.for_channels(64).qk_dim_per_head == 16
    with pytest.raises(ConfigError):
        AttentionSpec.for_channels(48)


def test_attention_single_key_broadcasts_value(rng):
    attn = CrossAttention(AttentionSpec(64, 2), 128, rng=rng).eval()
    out = attn(Tensor(rng.standard_normal((1, 64, 1, 1))), Tensor(rng.standard_normal((1, 128, 1, 1))))
    assert np.all(attn.last_attention == 1.0)
    assert out.shape == (1, 64, 1, 1)
    # with a 1x1 grid of keys but several query positions every position gets the same vector
    attn2 = CrossAttention(AttentionSpec(64, 2), 128, rng=rng).eval()
    ctx = Tensor(np.broadcast_to(rng.standard_normal((1, 128, 1, 1)), (1, 128, 2, 2)).copy())
    out2 = attn2(Tensor(rng.standard_normal((1, 64, 2, 2))), ctx).data
    np.testing.assert_allclose(out2, np.broadcast_to(out2[:, :, :1, :1], out2.shape), rtol=1e-5, atol=1e-6)


def test_attention_zero_query_is_uniform(rng):
    with precision(np.float64):
        attn = CrossAttention(AttentionSpec(64, 2), 32, rng=rng).eval()
        attn.to_q.conv.weight.data[...] = 0.0
        attn.to_q.bn.bias.data[...] = 0.0
        x, ctx = Tensor(rng.standard_normal((1, 64, 2, 3))), Tensor(rng.standard_normal((1, 32, 2, 3)))
        out = attn(x, ctx).data
        np.testing.assert_allclose(attn.last_attention, 1.0 / 6.0, atol=1e-15)
        v = attn.to_v(ctx).data.reshape(1, 64, 6).mean(axis=2)
        expected = attn.proj(Tensor(np.broadcast_to(v[:, :, None, None], (1, 64, 2, 3)).copy())).data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_matches_loop_oracle(rng):
    attn = CrossAttention(AttentionSpec(64, 2), 128, rng=rng).eval()
    for m in (attn.to_q, attn.to_k, attn.to_v, attn.proj):
        m.bn.running_mean[...] = rng.standard_normal(m.bn.channels) * 0.1
        m.bn.running_var[...] = 1.0 + rng.random(m.bn.channels)
    x = rng.standard_normal((1, 64, 4, 4)).astype(np.float32)
    g = rng.standard_normal((1, 128, 4, 4)).astype(np.float32)
    out = attn(Tensor(x), Tensor(g)).data

    def folded(m):
        # fold BN(eval) into an affine map: W' x + b'
        s = m.bn.weight.data / np.sqrt(m.bn.running_var + m.bn.eps)
        w = m.conv.weight.data[:, :, 0, 0].astype(np.float64) * s[:, None]
        b = m.bn.bias.data - m.bn.running_mean * s
        return w, b.astype(np.float64)

    (wq, bq), (wk, bk), (wv, bv), (wp, bp) = (folded(m) for m in (attn.to_q, attn.to_k, attn.to_v, attn.proj))
    xf, gf = x[0].reshape(64, 16).astype(np.float64), g[0].reshape(128, 16).astype(np.float64)
    aug = lambda w, b: np.hstack([w, b[:, None]])  # noqa: E731
    ones = np.ones((1, 16))
    heads_out = loop_attention(
        np.vstack([xf, ones]), np.vstack([gf, ones]), aug(wq, bq), aug(wk, bk), aug(wv, bv), 2, 16, 32
    )
    ref = wp @ heads_out + bp[:, None]
    np.testing.assert_allclose(out[0].reshape(64, 16), ref, atol=1e-5, rtol=1e-5)


@pytest.mark.parametrize("channels", [64, 128, 160])
def test_attention_rows_are_distributions(rng, channels):
    spec = AttentionSpec.for_channels(channels)
    attn = CrossAttention(spec, 256, rng=rng)
    attn(Tensor(rng.standard_normal((2, channels, 3, 3))), Tensor(rng.standard_normal((2, 256, 3, 3))))
    a = attn.last_attention
    assert a.shape == (2, spec.heads, 9, 9)
    assert (a >= 0).all()
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-5)


def test_attention_grid_mismatch(rng):
    attn = CrossAttention(AttentionSpec(64, 2), 32, rng=rng)
    with pytest.raises(UsageError, match="matching grids"):
        attn(Tensor(np.zeros((1, 64, 2, 2))), Tensor(np.zeros((1, 32, 1, 1))))


def test_ffn_zero_and_shape(rng):
    ffn = FFN(FFNSpec(64, 128), rng=rng)
    x = Tensor(rng.standard_normal((1, 64, 6, 6)))
    assert ffn(x).shape == (1, 64, 6, 6)
    ffn = FFN(FFNSpec(64, 128), rng=rng)  # fresh running stats: identity BN
    zero_weights(ffn)
    ffn.eval()
    assert not ffn(x).data.any()
    with pytest.raises(ConfigError):
        ffn(Tensor(np.zeros((1, 32, 6, 6))))


def test_ffn_matches_composition(rng):
    with precision(np.float64):
        ffn = FFN(FFNSpec(8, 16), rng=rng)
        x = Tensor(rng.standard_normal((2, 8, 5, 5)))
        ref = manual_convbn(ffn.fc2, manual_convbn(ffn.dw, manual_convbn(ffn.fc1, x)))
        np.testing.assert_allclose(ffn(x).data, ref.data, atol=1e-12)
    assert ffn.dw.conv.groups == 16 and ffn.dw.conv.kernel == 3 and not ffn.fc2.act


def test_transformer_block_zero_is_identity(rng):
    block = TransformerBlock(AttentionSpec(64, 2), FFNSpec(64, 128), 256, rng=rng)
    zero_weights(block)
    block.eval()
    x = Tensor(rng.standard_normal((1, 64, 2, 2)))
    np.testing.assert_array_equal(block(x, Tensor(rng.standard_normal((1, 256, 2, 2)))).data, x.data)


@pytest.mark.parametrize("channels,heads", [(64, 2), (128, 4), (160, 5)])
def test_transformer_block_shape(rng, channels, heads):
    block = TransformerBlock(AttentionSpec(channels, heads), FFNSpec(channels, 2 * channels), 256, rng=rng).eval()
    assert block(Tensor(rng.standard_normal((1, channels, 1, 1))), Tensor(rng.standard_normal((1, 256, 1, 1)))).shape == (1, channels, 1, 1)


def test_transformer_block_matches_composition(rng):
    with precision(np.float64):
        block = TransformerBlock(AttentionSpec(32, 1), FFNSpec(32, 64), 16, rng=rng).eval()
        x, g = Tensor(rng.standard_normal((1, 32, 2, 2))), Tensor(rng.standard_normal((1, 16, 2, 2)))
        y = x.data + block.attn(x, g).data
        z = y + block.ffn(Tensor(y)).data
        np.testing.assert_allclose(block(x, g).data, z, atol=1e-12)


def test_module_state_dict_round_trip(rng):
    a = InvertedResidual(InvertedResidualSpec(4, 4, 2, 1), rng=np.random.default_rng(0))
    b = InvertedResidual(InvertedResidualSpec(4, 4, 2, 1), rng=np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    x = Tensor(rng.standard_normal((2, 4, 3, 3)))
    np.testing.assert_array_equal(a(x).data, b(x).data)
    bad = dict(a.state_dict())
    bad["expand.conv.weight"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(ConfigError):
        b.load_state_dict(bad)
