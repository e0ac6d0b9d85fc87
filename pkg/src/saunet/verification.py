"""The stock gradient-verification suite: primitives, composite layers, and a
reduced end-to-end network, all checked in float64 against central
differences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gradcheck import GradCheckReport, grad_check_params
from .layers import BatchNorm2d, DropBlockConfig, SpatialAttention
from .models import ArchitectureSpec, Network
from .tensor import (
    Tensor,
    bce_loss,
    channel_reduce,
    concat_channels,
    conv2d,
    conv2d_transpose,
    maxpool2d,
    relu,
    sigmoid,
    tensor_sum,
)

__all__ = ["VerificationCheck", "default_checks", "run_suite"]

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass(frozen=True)
class VerificationCheck:
    name: str
    tol: float
    run: Callable[[], GradCheckReport]


def _t(rng: np.random.Generator, shape: tuple, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _check_conv2d() -> GradCheckReport:
    rng = np.random.default_rng(11)
    x = _t(rng, (2, 3, 8, 8))
    w = _t(rng, (4, 3, 3, 3), scale=0.5)
    b = _t(rng, (4,), scale=0.1)
    return grad_check_params(
        lambda: tensor_sum(conv2d(x, w, b, stride=1, padding="same")),
        [("input", x), ("weight", w), ("bias", b)],
        tol=PRIMITIVE_TOL,
    )


def _check_conv2d_strided() -> GradCheckReport:
    rng = np.random.default_rng(12)
    x = _t(rng, (1, 2, 10, 10))
    w = _t(rng, (3, 2, 3, 3), scale=0.5)
    return grad_check_params(
        lambda: tensor_sum(conv2d(x, w, stride=2, padding="same")),
        [("input", x), ("weight", w)],
        tol=PRIMITIVE_TOL,
    )


def _check_conv2d_transpose() -> GradCheckReport:
    rng = np.random.default_rng(13)
    x = _t(rng, (2, 4, 5, 5))
    w = _t(rng, (4, 3, 3, 3), scale=0.5)
    b = _t(rng, (3,), scale=0.1)
    return grad_check_params(
        lambda: tensor_sum(conv2d_transpose(x, w, b, stride=2)),
        [("input", x), ("weight", w), ("bias", b)],
        tol=PRIMITIVE_TOL,
    )


def _check_maxpool() -> GradCheckReport:
    rng = np.random.default_rng(14)
    # distinct values keep the check away from argmax ties
    base = rng.permutation(2 * 6 * 6).reshape(1, 2, 6, 6).astype(np.float64)
    x = Tensor(base * 0.1 + rng.standard_normal((1, 2, 6, 6)) * 1e-3, requires_grad=True, dtype=np.float64)
    weights = Tensor(rng.standard_normal((1, 2, 3, 3)), dtype=np.float64)
    return grad_check_params(
        lambda: tensor_sum(maxpool2d(x) * weights),
        [("input", x)],
        tol=PRIMITIVE_TOL,
    )


def _check_channel_reduce() -> GradCheckReport:
    rng = np.random.default_rng(15)
    base = rng.permutation(2 * 8 * 4 * 4).reshape(2, 8, 4, 4).astype(np.float64)
    x = Tensor(base * 0.05, requires_grad=True, dtype=np.float64)
    weights = Tensor(rng.standard_normal((2, 1, 4, 4)), dtype=np.float64)
    return grad_check_params(
        lambda: tensor_sum(channel_reduce(x, "max") * weights + channel_reduce(x, "mean") * weights),
        [("input", x)],
        tol=PRIMITIVE_TOL,
    )


def _check_concat() -> GradCheckReport:
    rng = np.random.default_rng(16)
    a = _t(rng, (2, 3, 4, 4))
    b = _t(rng, (2, 2, 4, 4))
    w = Tensor(rng.standard_normal((2, 5, 4, 4)), dtype=np.float64)
    return grad_check_params(
        lambda: tensor_sum(concat_channels(a, b) * w),
        [("a", a), ("b", b)],
        tol=PRIMITIVE_TOL,
    )


def _check_activations() -> GradCheckReport:
    rng = np.random.default_rng(17)
    # keep ReLU inputs away from the kink at zero
    raw = rng.standard_normal((3, 4, 5, 5))
    raw = np.where(np.abs(raw) < 0.1, raw + 0.2, raw)
    x = Tensor(raw, requires_grad=True, dtype=np.float64)
    y = _t(rng, (3, 4, 5, 5))
    return grad_check_params(
        lambda: tensor_sum(relu(x)) + tensor_sum(sigmoid(y) * sigmoid(y)),
        [("relu_input", x), ("sigmoid_input", y)],
        tol=PRIMITIVE_TOL,
    )


def _check_bce() -> GradCheckReport:
    rng = np.random.default_rng(18)
    pred = Tensor(rng.uniform(0.1, 0.9, size=(2, 1, 6, 6)), requires_grad=True, dtype=np.float64)
    target = Tensor((rng.random((2, 1, 6, 6)) > 0.7).astype(np.float64), dtype=np.float64)
    return grad_check_params(lambda: bce_loss(pred, target), [("pred", pred)], tol=PRIMITIVE_TOL)


def _check_batchnorm() -> GradCheckReport:
    rng = np.random.default_rng(19)
    bn = BatchNorm2d(3, dtype=np.float64)
    x = _t(rng, (2, 3, 4, 4))
    w = Tensor(rng.standard_normal((2, 3, 4, 4)), dtype=np.float64)
    return grad_check_params(
        lambda: tensor_sum(bn(x, train=True, update_stats=False) * w),
        [("input", x), ("gamma", bn.gamma), ("beta", bn.beta)],
        tol=PRIMITIVE_TOL,
    )


def _check_sam() -> GradCheckReport:
    rng = np.random.default_rng(20)
    sam = SpatialAttention(np.random.default_rng(7), dtype=np.float64)
    x = _t(rng, (1, 4, 9, 9))
    return grad_check_params(
        lambda: tensor_sum(sam(x) * Tensor(np.full((1, 4, 9, 9), 0.5), dtype=np.float64)),
        [("input", x), ("sam_weight", sam.weight)],
        tol=PRIMITIVE_TOL,
    )


def _check_full_network() -> GradCheckReport:
    spec = ArchitectureSpec(
        variant="sa-unet", base_channels=4, dropblock=DropBlockConfig(block_size=7, drop_rate=0.0)
    )
    net = Network(spec, seed=3, dtype=np.float64)
    rng = np.random.default_rng(21)
    x = Tensor(rng.random((1, 3, 16, 16)), dtype=np.float64)
    target = Tensor((rng.random((1, 1, 16, 16)) > 0.9).astype(np.float64), dtype=np.float64)

    def loss_fn():
        return bce_loss(net.forward(x, train=True, update_stats=False), target)

    return grad_check_params(loss_fn, net.trainable_params(), tol=END_TO_END_TOL)


def default_checks(include_end_to_end: bool = True) -> list[VerificationCheck]:
    checks = [
        VerificationCheck("conv2d", PRIMITIVE_TOL, _check_conv2d),
        VerificationCheck("conv2d_stride2", PRIMITIVE_TOL, _check_conv2d_strided),
        VerificationCheck("conv2d_transpose", PRIMITIVE_TOL, _check_conv2d_transpose),
        VerificationCheck("maxpool2d", PRIMITIVE_TOL, _check_maxpool),
        VerificationCheck("channel_reduce", PRIMITIVE_TOL, _check_channel_reduce),
        VerificationCheck("concat_channels", PRIMITIVE_TOL, _check_concat),
        VerificationCheck("activations", PRIMITIVE_TOL, _check_activations),
        VerificationCheck("bce_loss", PRIMITIVE_TOL, _check_bce),
        VerificationCheck("batchnorm", PRIMITIVE_TOL, _check_batchnorm),
        VerificationCheck("spatial_attention", PRIMITIVE_TOL, _check_sam),
    ]
    if include_end_to_end:
        checks.append(VerificationCheck("full_network", END_TO_END_TOL, _check_full_network))
    return checks


def run_suite(include_end_to_end: bool = True, verbose: bool = True) -> bool:
    """Run every check; prints one line per check, returns overall pass."""
    ok = True
    for check in default_checks(include_end_to_end):
        report = check.run()
        passed = report.passed
        ok = ok and passed
        if verbose:
            status = "PASS" if passed else "FAIL"
            print(f"{status} {check.name}: max rel err {report.max_rel_err:.3e} (tol {check.tol:.0e})")
            if not passed:
                print(report.summary())
    return ok
