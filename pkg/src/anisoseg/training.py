"""Losses, optimizer, augmentation, and the training loop.

One volume is one optimizer step; the slice axis is the batch axis. All
randomness comes from named sub-streams of a single run seed, so a (seed,
config, data) triple pins the final parameters bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .networks import SegNet


class TrainingDiverged(RuntimeError):
    """Loss became NaN/Inf; carries the step at which it happened."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 20
    seed: int = 0
    loss: str = "cross_entropy"  # cross_entropy | dice | focal
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    crop_target: int | None = None  # center-crop h/w to this size, off if None
    hflip_prob: float = 0.5
    gamma_range: tuple[float, float] | None = (0.7, 1.5)  # None disables

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0,1]")
        if self.gamma_range is not None and min(self.gamma_range) <= 0:
            raise ValueError("gamma range endpoints must be positive")
        if self.loss not in ("cross_entropy", "dice", "focal"):
            raise ValueError(f"unknown loss {self.loss!r}")


# ---------------------------------------------------------------------------
# losses (logits: (l, K, h, w); labels: (l, h, w) integer)

def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise T.ShapeError(f"labels shape {labels.shape} does not match logits")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label outside [0, {k})")
    return labels.astype(np.int64)


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    l, h, w = labels.shape
    oh = np.zeros((l, k, h, w))
    ll, hh, ww = np.meshgrid(np.arange(l), np.arange(h), np.arange(w),
                             indexing="ij")
    oh[ll, labels, hh, ww] = 1.0
    return oh


def _log_softmax(logits: Tensor) -> Tensor:
    # subtracting the (constant) row max keeps the exponentials bounded
    m = Tensor(logits.data.max(axis=1, keepdims=True))
    s = logits - m
    lse = T.log(T.reduce_sum(T.exp(s), axes=1, keepdims=True))
    return s - lse


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = _check_labels(logits, labels)
    logp = _log_softmax(logits)
    oh = Tensor(_one_hot(labels, logits.shape[1]))
    nll = -T.reduce_sum(logp * oh, axes=1)
    return T.reduce_mean(nll)


def soft_dice_loss(logits: Tensor, labels: np.ndarray,
                   smooth: float = 1e-5) -> Tensor:
    """1 - mean soft overlap over foreground classes."""
    labels = _check_labels(logits, labels)
    k = logits.shape[1]
    p = T.exp(_log_softmax(logits))
    oh = _one_hot(labels, k)
    terms = []
    for cls in range(1, k):
        mask = np.zeros((1, k, 1, 1))
        mask[0, cls, 0, 0] = 1.0
        pk = T.reduce_sum(p * Tensor(mask), axes=1)
        gk = Tensor(oh[:, cls])
        num = 2.0 * T.reduce_sum(pk * gk) + Tensor(smooth)
        den = T.reduce_sum(pk) + Tensor(float(oh[:, cls].sum())) + Tensor(smooth)
        terms.append(num / den)
    mean_overlap = terms[0]
    for t in terms[1:]:
        mean_overlap = mean_overlap + t
    mean_overlap = mean_overlap * Tensor(1.0 / len(terms))
    return Tensor(1.0) - mean_overlap


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float = 2.0,
               alpha: float = 0.25) -> Tensor:
    """Mean of -alpha * (1 - p_true)^gamma * log p_true."""
    labels = _check_labels(logits, labels)
    logp = _log_softmax(logits)
    oh = Tensor(_one_hot(labels, logits.shape[1]))
    logp_t = T.reduce_sum(logp * oh, axes=1)
    p_t = T.exp(logp_t)
    focal = Tensor(-alpha) * T.powc(Tensor(1.0) - p_t + Tensor(1e-12), gamma) * logp_t
    return T.reduce_mean(focal)


def make_loss(cfg: TrainConfig):
    if cfg.loss == "cross_entropy":
        return cross_entropy_loss
    if cfg.loss == "dice":
        return soft_dice_loss
    return lambda lg, lb: focal_loss(lg, lb, cfg.focal_gamma, cfg.focal_alpha)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: list[Tensor]) -> "OptimizerState":
        return cls(m=[np.zeros(p.shape) for p in params],
                   v=[np.zeros(p.shape) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray],
              state: OptimizerState, lr: float, weight_decay: float = 0.0) -> None:
    """One Adam update with L2-coupled weight decay (added to the gradient)."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise T.ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        g = g + weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / (1 - b1 ** state.t)
        vhat = state.v[i] / (1 - b2 ** state.t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# augmentation (numpy level, before the autodiff graph)

def augment(volume: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Center crop, random horizontal flip, random gamma on intensities."""
    vol, lab = volume, labels
    if cfg.crop_target is not None:
        t = cfg.crop_target
        h, w = vol.shape[2], vol.shape[3]
        if t > h or t > w:
            raise ValueError(f"crop target {t} exceeds spatial size {h}x{w}")
        oy, ox = (h - t + 1) // 2, (w - t + 1) // 2
        vol = vol[:, :, oy:oy + t, ox:ox + t]
        lab = lab[:, oy:oy + t, ox:ox + t]
    if rng.random() < cfg.hflip_prob:
        vol = vol[:, :, :, ::-1]
        lab = lab[:, :, ::-1]
    if cfg.gamma_range is not None:
        g = rng.uniform(*cfg.gamma_range)
        lo, hi = vol.min(), vol.max()
        if hi > lo:  # degenerate constant volume: gamma is the identity
            vol = ((vol - lo) / (hi - lo)) ** g * (hi - lo) + lo
    return np.ascontiguousarray(vol), np.ascontiguousarray(lab)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class FitResult:
    loss_curve: list[float]  # mean loss per epoch


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Named deterministic sub-streams derived from one run seed."""
    names = ("data", "init", "sampling", "augment")
    return {name: np.random.default_rng([seed, i])
            for i, name in enumerate(names)}


def fit(model: SegNet, volumes: list, cfg: TrainConfig,
        streams: dict[str, np.random.Generator] | None = None) -> FitResult:
    """Train in place; one volume per optimizer step, slice axis as batch."""
    if not volumes:
        raise ValueError("empty dataset")
    ls = {v.data.shape[0] for v in volumes}
    if len(ls) != 1:
        raise T.ShapeError(f"volumes disagree on slice count: {sorted(ls)}")
    streams = streams if streams is not None else seed_streams(cfg.seed)
    loss_fn = make_loss(cfg)
    params = model.parameters()
    state = OptimizerState.init(params)
    curve = []
    order_rng = streams["data"]
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(volumes))
        epoch_losses = []
        for vi in order:
            v = volumes[vi]
            vol, lab = augment(v.data, v.labels, cfg, streams["augment"])
            try:
                logits, _ = model.forward(Tensor(vol), mode="train",
                                          rng=streams["sampling"])
                loss = loss_fn(logits, lab)
            except T.NonFiniteError as e:
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch} step {step}: {e}") from e
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingDiverged(
                    f"non-finite loss {val} at epoch {epoch} step {step}")
            T.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros(p.shape)
                     for p in params]
            adam_step(params, grads, state, cfg.lr, cfg.weight_decay)
            epoch_losses.append(val)
            step += 1
        curve.append(float(np.mean(epoch_losses)))
    return FitResult(loss_curve=curve)
