"""Gradient-check suite covering every differentiable operation family.

Each component builds a small random problem, reduces it to a scalar, and
compares analytic gradients against central finite differences. The full
backbone check freezes the slice-sampling noise so the function is
deterministic.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import attention as A
from . import networks as N
from . import training as TR
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _freeze_noise(cfg: N.BackboneConfig, rng) -> list:
    noise = []
    for i in range(cfg.levels):
        if cfg.csam_enabled[i]:
            noise.append((rng.standard_normal(cfg.rank),
                          rng.standard_normal(cfg.slices)))
        else:
            noise.append(None)
    return noise


def run_suite(cfg: N.BackboneConfig | None = None, seed: int = 0,
              net_coords: int = 48, param_coords: int = 4):
    """Run all checks; returns [(component, max relative error)]."""
    if cfg is None:
        cfg = N.BackboneConfig(levels=3, base_channels=4, slices=4,
                               csam_enabled=[True, True, True])
    rng = np.random.default_rng(seed)
    rows: list[tuple[str, float]] = []

    x = _rand(rng, 3, 5)
    rows.append(("sigmoid", grad_check(lambda t: T.reduce_sum(T.sigmoid(t)), x)))
    x = _rand(rng, 3, 5)
    rows.append(("softplus", grad_check(lambda t: T.reduce_sum(T.softplus(t)), x)))
    x = _rand(rng, 3, 5)
    rows.append(("leaky_relu",
                 grad_check(lambda t: T.reduce_sum(T.leaky_relu(t, 0.01)), x)))

    a = _rand(rng, 3, 1, 4)
    b = Tensor(rng.standard_normal((3, 2, 4)))
    rows.append(("broadcast_add_mul",
                 grad_check(lambda t: T.reduce_sum(T.mul(T.add(t, b), b)), a)))

    x = _rand(rng, 2, 3, 4)
    rows.append(("reduce_mean",
                 grad_check(lambda t: T.reduce_sum(
                     T.mul(T.reduce_mean(t, axes=(0, 2)), Tensor([1.0, -2.0, 3.0]))), x)))
    x = _rand(rng, 2, 3, 4)
    rows.append(("reduce_max",
                 grad_check(lambda t: T.reduce_sum(
                     T.mul(T.reduce_max(t, axes=(0, 2)), Tensor([1.0, -2.0, 3.0]))), x)))

    w = _rand(rng, 3, 4)
    v = Tensor(rng.standard_normal((4, 2)))
    rows.append(("matmul", grad_check(
        lambda t: T.reduce_sum(T.sigmoid(T.matmul(t, v))), w)))

    k = _rand(rng, 2, 3, 3, 3)
    xi = Tensor(rng.standard_normal((2, 3, 6, 6)))
    rows.append(("conv2d_kernel", grad_check(
        lambda t: T.reduce_sum(T.sigmoid(T.conv2d(xi, t, padding=1))), k)))
    xk = _rand(rng, 2, 3, 6, 6)
    kk = Tensor(rng.standard_normal((2, 3, 3, 3)))
    rows.append(("conv2d_input", grad_check(
        lambda t: T.reduce_sum(T.sigmoid(T.conv2d(t, kk, padding=1))), xk)))

    xn = _rand(rng, 2, 3, 4, 4)
    gm = Tensor(rng.standard_normal(3) * 0.3 + 1.0, requires_grad=True)
    bt = Tensor(rng.standard_normal(3) * 0.3)
    rows.append(("instance_norm", grad_check(
        lambda t: T.reduce_sum(T.sigmoid(T.instance_norm(t, gm, bt))), xn,
        eps=1e-6)))

    xs = _rand(rng, 2, 2, 3, 3)
    weights = Tensor(rng.standard_normal((3, 4, 5, 5)))

    def structural_fn(t):
        u = T.upsample_nearest(t, 2)
        cat = T.concat([u, u], axis=1)
        cropped = T.crop_center(cat, (2, 4, 5, 5))
        padded = T.pad_slices(cropped, 3)
        return T.reduce_sum(T.mul(padded, weights))

    rows.append(("structural", grad_check(structural_fn, xs)))

    l, c = cfg.slices, 6
    csam = A.init_csam(l, c, rank=2, k=3, rng=rng)
    fmap = _rand(rng, l, c, 5, 5)
    rows.append(("semantic_attention", grad_check(
        lambda t: T.reduce_sum(T.mul(A.semantic_attention(t, csam), t)), fmap)))
    fmap = _rand(rng, l, c, 5, 5)
    rows.append(("positional_attention", grad_check(
        lambda t: T.reduce_sum(T.mul(A.positional_attention(t, csam), t)), fmap)))

    fmap = _rand(rng, l, c, 5, 5)
    frozen = (rng.standard_normal(2), rng.standard_normal(l))
    rows.append(("slice_attention", grad_check(
        lambda t: T.reduce_sum(T.mul(
            A.slice_attention(t, csam.slice_gate, "train", noise=frozen)[0], t)),
        fmap)))
    fmap = _rand(rng, l, c, 5, 5)
    rows.append(("csam_forward", grad_check(
        lambda t: T.reduce_sum(A.csam_forward(t, csam, "train",
                                              noise=frozen)[0]), fmap)))
    for pname, ptensor in csam.tensors():
        err = grad_check(
            lambda t: T.reduce_sum(A.csam_forward(fmap, csam, "train",
                                                  noise=frozen)[0]),
            ptensor, max_coords=param_coords, rng=rng)
        rows.append((f"csam_param_{pname}", err))

    blk = N.init_conv_block(1, 3, rng)
    xb = _rand(rng, 2, 1, 4, 4)
    rows.append(("conv_block", grad_check(
        lambda t: T.reduce_sum(T.sigmoid(N.conv_block(t, blk))), xb, eps=1e-6)))

    lg = _rand(rng, 2, 3, 4, 4)
    lb = rng.integers(0, 3, size=(2, 4, 4))
    rows.append(("cross_entropy", grad_check(
        lambda t: TR.cross_entropy_loss(t, lb), lg)))
    lg = _rand(rng, 2, 3, 4, 4)
    rows.append(("soft_dice", grad_check(
        lambda t: TR.soft_dice_loss(t, lb), lg)))
    lg = _rand(rng, 2, 3, 4, 4)
    rows.append(("focal", grad_check(
        lambda t: TR.focal_loss(t, lb), lg)))

    # full backbone, frozen sampling noise, subsampled coordinates
    model = N.SegNet(cfg, rng=np.random.default_rng(seed + 1))
    hw = 16
    xin = Tensor(rng.standard_normal((cfg.slices, cfg.input_channels, hw, hw)),
                 requires_grad=True)
    noise = _freeze_noise(cfg, rng)

    def net_loss(_t):
        logits, _ = model.forward(xin, mode="train", noise=noise)
        return T.reduce_sum(T.sigmoid(logits))

    rows.append(("network_input", grad_check(net_loss, xin,
                                             max_coords=net_coords, rng=rng)))
    named = model.named_parameters()
    worst_param = 0.0
    for _, ptensor in named:
        worst_param = max(worst_param, grad_check(
            net_loss, ptensor, max_coords=param_coords, rng=rng))
    rows.append(("network_params", worst_param))
    return rows
