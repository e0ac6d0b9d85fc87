import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saunet.gradcheck import grad_check_params
from saunet.layers import (
    BatchNorm2d,
    ConvBlock,
    DropBlockConfig,
    SpatialAttention,
    dropblock_forward,
    dropblock_gamma,
)
from saunet.tensor import Tensor, concat_channels, conv2d, sigmoid, tensor_sum

from oracles import conv2d_reference


# ---------------------------------------------------------------------------
# DropBlock
# ---------------------------------------------------------------------------


def test_dropblock_config_validation():
    DropBlockConfig(7, 0.18)
    with pytest.raises(ValueError, match="odd"):
        DropBlockConfig(4, 0.1)
    with pytest.raises(ValueError, match="drop_rate"):
        DropBlockConfig(3, 1.0)


def test_gamma_zero_rate():
    assert dropblock_gamma(0.0, 7, 32, 32) == 0.0


def test_gamma_block_one_collapses_to_plain_dropout():
    assert dropblock_gamma(0.25, 1, 19, 23) == pytest.approx(0.25, abs=0)


def test_gamma_paper_geometry():
    # (0.18 / 49) * (74*74) / (68*68)
    assert dropblock_gamma(0.18, 7, 74, 74) == pytest.approx(0.0043503284, abs=1e-9)


def test_gamma_rejects_oversized_block():
    with pytest.raises(ValueError, match="exceeds"):
        dropblock_gamma(0.1, 7, 6, 20)


def test_dropblock_eval_is_bitwise_identity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 16, 16)))
    out = dropblock_forward(x, DropBlockConfig(7, 0.18), np.random.default_rng(1), train=False)
    assert out.data is x.data


def test_dropblock_zero_rate_is_bitwise_identity_in_train():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 16, 16)))
    out = dropblock_forward(x, DropBlockConfig(7, 0.0), np.random.default_rng(1), train=True)
    assert out.data is x.data


def test_dropblock_requires_rng_in_train():
    x = Tensor(np.ones((1, 1, 8, 8)))
    with pytest.raises(ValueError, match="generator"):
        dropblock_forward(x, DropBlockConfig(3, 0.2), None, train=True)


def _masks_from_forward(shape, cfg, seed, draws):
    """Stacked mask planes recovered by running on all-ones input."""
    rng = np.random.default_rng(seed)
    planes = []
    for _ in range(draws):
        out = dropblock_forward(Tensor(np.ones(shape, dtype=np.float32)), cfg, rng, train=True)
        planes.append(out.data.reshape(-1, shape[2], shape[3]))
    return np.concatenate(planes, axis=0)


def test_dropblock_mask_is_binary_blocks_with_rescale():
    cfg = DropBlockConfig(7, 0.18)
    planes = _masks_from_forward((1, 8, 74, 74), cfg, seed=3, draws=4)
    for plane in planes:
        dropped = plane == 0
        kept = ~dropped
        if kept.all():
            continue
        # survivors all share the exact rescale factor
        values = np.unique(plane[kept])
        assert values.size == 1
        assert values[0] == pytest.approx(plane.size / kept.sum(), rel=1e-6)
        # every dropped pixel sits inside at least one fully-zero 7x7 window
        bs = cfg.block_size
        hs, ws = plane.shape[0] - bs + 1, plane.shape[1] - bs + 1
        win = np.lib.stride_tricks.sliding_window_view(dropped, (bs, bs))
        full = win.all(axis=(2, 3))  # [hs, ws] anchors of fully-dropped windows
        covered = np.zeros_like(dropped)
        for i in range(bs):
            for j in range(bs):
                covered[i : i + hs, j : j + ws] |= full
        assert not (dropped & ~covered).any()


def test_dropblock_monte_carlo_dropped_fraction():
    cfg = DropBlockConfig(7, 0.18)
    planes = _masks_from_forward((1, 64, 74, 74), cfg, seed=5, draws=16)  # 1024 masks
    assert abs((planes == 0).mean() - 0.18) < 0.02


def test_dropblock_rescale_preserves_expected_activation():
    cfg = DropBlockConfig(5, 0.15)
    rng = np.random.default_rng(7)
    x = np.full((1, 32, 40, 40), 2.0, dtype=np.float32)
    total = 0.0
    draws = 24
    for _ in range(draws):
        out = dropblock_forward(Tensor(x), cfg, rng, train=True)
        total += float(out.data.mean())
    assert abs(total / draws - 2.0) / 2.0 < 0.02


def test_dropblock_backward_uses_the_same_scaled_mask():
    cfg = DropBlockConfig(3, 0.3)
    x = Tensor(np.ones((1, 2, 10, 10), dtype=np.float64), requires_grad=True, dtype=np.float64)
    out = dropblock_forward(x, cfg, np.random.default_rng(11), train=True)
    mask = out.data.copy()  # ones input: output *is* the scaled mask
    tensor_sum(out).backward()
    assert np.array_equal(x.grad, mask)


def test_dropblock_determinism():
    cfg = DropBlockConfig(5, 0.2)
    a = _masks_from_forward((2, 4, 20, 20), cfg, seed=13, draws=3)
    b = _masks_from_forward((2, 4, 20, 20), cfg, seed=13, draws=3)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# BatchNorm
# ---------------------------------------------------------------------------


def test_bn_constant_input_returns_beta():
    bn = BatchNorm2d(3, dtype=np.float64)
    bn.beta = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True, dtype=np.float64)
    x = Tensor(np.full((2, 3, 4, 4), 7.0), dtype=np.float64)
    out = bn(x, train=True, update_stats=False)
    expected = np.broadcast_to(np.array([1.0, -2.0, 0.5]).reshape(1, 3, 1, 1), out.shape)
    assert np.array_equal(out.data, expected)


def test_bn_train_normalizes_to_unit_stats():
    rng = np.random.default_rng(1)
    bn = BatchNorm2d(4, dtype=np.float64)
    x = rng.standard_normal((8, 4, 6, 6)) * 3.0 + 1.5
    out = bn(Tensor(x, dtype=np.float64), train=True).data
    for c in range(4):
        channel = out[:, c]
        var = x[:, c].var()
        assert abs(channel.mean()) < 1e-5
        # normalized variance is var/(var+eps); compare pre-eps
        assert abs(channel.var() - var / (var + bn.eps)) < 1e-5


def test_bn_moving_stats_update_rule():
    bn = BatchNorm2d(2, momentum=0.9, dtype=np.float64)
    x = np.stack([np.full((4, 4), 2.0), np.full((4, 4), -1.0)])[None]
    bn(Tensor(x, dtype=np.float64), train=True)
    np.testing.assert_allclose(bn.moving_mean, 0.9 * 0.0 + 0.1 * np.array([2.0, -1.0]))
    np.testing.assert_allclose(bn.moving_var, 0.9 * 1.0 + 0.1 * np.array([0.0, 0.0]))


def test_bn_eval_is_affine_in_moving_stats():
    rng = np.random.default_rng(2)
    bn = BatchNorm2d(3, dtype=np.float64)
    bn.moving_mean = rng.standard_normal(3)
    bn.moving_var = rng.random(3) + 0.5
    bn.gamma = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
    bn.beta = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
    x = rng.standard_normal((2, 3, 5, 5))
    out = bn(Tensor(x, dtype=np.float64), train=False).data
    mm = bn.moving_mean.reshape(1, 3, 1, 1)
    mv = bn.moving_var.reshape(1, 3, 1, 1)
    expected = bn.gamma.data.reshape(1, 3, 1, 1) * (x - mm) / np.sqrt(mv + bn.eps) + bn.beta.data.reshape(
        1, 3, 1, 1
    )
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_bn_train_then_freeze_reproduces_eval():
    rng = np.random.default_rng(3)
    bn = BatchNorm2d(3, momentum=0.0, dtype=np.float64)  # moving stats <- batch stats
    x = Tensor(rng.standard_normal((4, 3, 5, 5)), dtype=np.float64)
    train_out = bn(x, train=True).data
    eval_out = bn(x, train=False).data
    np.testing.assert_allclose(eval_out, train_out, atol=1e-12)


def test_bn_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    bn = BatchNorm2d(3, dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.standard_normal((2, 3, 4, 4)), dtype=np.float64)
    report = grad_check_params(
        lambda: tensor_sum(bn(x, train=True, update_stats=False) * w),
        [("x", x), ("gamma", bn.gamma), ("beta", bn.beta)],
        tol=1e-4,
    )
    assert report.passed, report.summary()


def test_bn_channel_mismatch():
    bn = BatchNorm2d(3)
    with pytest.raises(ValueError, match="expected"):
        bn(Tensor(np.ones((1, 4, 2, 2))), train=True)


# ---------------------------------------------------------------------------
# ConvBlock
# ---------------------------------------------------------------------------


def test_convblock_unknown_kind():
    with pytest.raises(ValueError, match="unknown block kind"):
        ConvBlock(3, 8, "resnet", np.random.default_rng(0))


def test_convblock_unet_equals_sdunet_at_zero_rate():
    x = Tensor(np.random.default_rng(1).standard_normal((1, 3, 12, 12)).astype(np.float32))
    a = ConvBlock(3, 8, "unet", np.random.default_rng(5))
    b = ConvBlock(3, 8, "sdunet", np.random.default_rng(5), DropBlockConfig(7, 0.0))
    out_a = a(x, train=True)
    out_b = b(x, train=True, rng=np.random.default_rng(0))
    assert np.array_equal(out_a.data, out_b.data)


def test_convblock_backbone_eval_is_conv_bn_relu():
    rng = np.random.default_rng(6)
    block = ConvBlock(2, 4, "backbone", np.random.default_rng(7), DropBlockConfig(3, 0.0), dtype=np.float64)
    block.bn1.moving_mean = rng.standard_normal(4)
    block.bn1.moving_var = rng.random(4) + 0.5
    block.bn2.moving_mean = rng.standard_normal(4)
    block.bn2.moving_var = rng.random(4) + 0.5
    x = Tensor(rng.standard_normal((1, 2, 9, 9)), dtype=np.float64)
    got = block(x, train=False).data

    h = conv2d(x, block.conv1.weight, block.conv1.bias)
    h = block.bn1(h, train=False)
    h = Tensor(np.maximum(h.data, 0))
    h = conv2d(h, block.conv2.weight, block.conv2.bias)
    h = block.bn2(h, train=False)
    expected = np.maximum(h.data, 0)
    np.testing.assert_allclose(got, expected, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(
    cin=st.integers(1, 4),
    cout=st.integers(1, 6),
    h=st.integers(4, 12),
    w=st.integers(4, 12),
    kind=st.sampled_from(["unet", "sdunet", "backbone"]),
)
def test_convblock_output_shape(cin, cout, h, w, kind):
    block = ConvBlock(cin, cout, kind, np.random.default_rng(0), DropBlockConfig(3, 0.1))
    out = block(Tensor(np.zeros((1, cin, h, w), dtype=np.float32)), train=False)
    assert out.shape == (1, cout, h, w)


# ---------------------------------------------------------------------------
# SpatialAttention
# ---------------------------------------------------------------------------


def test_sam_has_exactly_98_parameters():
    sam = SpatialAttention(np.random.default_rng(0))
    assert sam.weight.size == 98


def test_sam_zero_weight_halves_input_exactly():
    sam = SpatialAttention(np.random.default_rng(0), dtype=np.float64)
    sam.weight = Tensor(np.zeros((1, 2, 7, 7)), requires_grad=True, dtype=np.float64)
    x = np.random.default_rng(1).standard_normal((2, 5, 9, 9))
    out = sam(Tensor(x, dtype=np.float64))
    assert np.array_equal(out.data, 0.5 * x)


def test_sam_output_shape_matches_input():
    sam = SpatialAttention(np.random.default_rng(0))
    for shape in ((1, 1, 8, 8), (2, 7, 16, 12), (1, 3, 64, 64)):
        out = sam(Tensor(np.zeros(shape, dtype=np.float32)))
        assert out.shape == shape


def test_sam_gate_strictly_inside_unit_interval_and_preserves_sign():
    sam = SpatialAttention(np.random.default_rng(2), dtype=np.float64)
    x = np.random.default_rng(3).standard_normal((1, 6, 10, 10)) * 4
    out = sam(Tensor(x, dtype=np.float64)).data
    gate = out / np.where(x == 0, 1.0, x)
    gate = gate[x != 0]
    assert np.all(gate > 0.0) and np.all(gate < 1.0)
    assert np.all(np.sign(out) == np.sign(x))


def test_sam_single_channel_matches_straight_line_oracle():
    rng = np.random.default_rng(4)
    sam = SpatialAttention(np.random.default_rng(5), dtype=np.float64)
    x = rng.standard_normal((1, 1, 8, 8))
    got = sam(Tensor(x, dtype=np.float64)).data

    # independent straight-line computation: C=1 makes both pooled maps x itself
    stacked = np.concatenate([x, x], axis=1)
    conv = conv2d_reference(stacked, sam.weight.data, None, 1, (3, 3, 3, 3))
    gate = 1.0 / (1.0 + np.exp(-conv))
    np.testing.assert_allclose(got, x * gate, atol=1e-12)


def test_sam_warns_on_tiny_maps():
    sam = SpatialAttention(np.random.default_rng(6))
    with pytest.warns(UserWarning, match="exceeds"):
        sam(Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)))


def test_sam_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    sam = SpatialAttention(np.random.default_rng(8), dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 4, 9, 9)), requires_grad=True, dtype=np.float64)
    report = grad_check_params(
        lambda: tensor_sum(sam(x) * 0.5), [("x", x), ("weight", sam.weight)], tol=1e-4
    )
    assert report.passed, report.summary()
