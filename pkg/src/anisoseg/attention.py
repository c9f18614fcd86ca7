"""Cross-slice attention: semantic, positional, and slice gates.

All feature maps use the canonical (l, c, h, w) axis order, with l the slice
axis. The three gates are applied sequentially; the slice gate is driven by a
sample from a low-rank Gaussian over slices, which doubles as a per-slice
uncertainty model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


VARIANCE_FLOOR = 1e-4  # added to softplus(D') so the covariance stays SPD
HIDDEN_SLOPE = 0.01    # leaky rectifier slope inside the gate MLPs


def hidden_dim(n: int, reduction: float) -> int:
    return max(math.ceil(n / reduction), 1)


@dataclass
class SliceGateParams:
    """Weights of the slice-attention gate for a fixed slice count l.

    The MLP maps the pooled l-vector through a bottleneck; w_mu / w_p / w_d
    are the pure linear maps producing the Gaussian's mean, low-rank factor,
    and diagonal. No bias terms anywhere.
    """

    mlp_w1: Tensor  # (l_hidden, l)
    mlp_w2: Tensor  # (l, l_hidden)
    w_mu: Tensor    # (l, l)
    w_p: Tensor     # (l*r, l)
    w_d: Tensor     # (l, l)
    rank: int

    @property
    def num_slices(self) -> int:
        return self.w_mu.shape[0]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("mlp_w1", self.mlp_w1), ("mlp_w2", self.mlp_w2),
                ("w_mu", self.w_mu), ("w_p", self.w_p), ("w_d", self.w_d)]


@dataclass
class CsamParams:
    """All trainable weights of one cross-slice attention instance."""

    mlp_w1: Tensor      # (c_hidden, c) semantic MLP, shared by max/avg paths
    mlp_w2: Tensor      # (c, c_hidden)
    pos_kernel: Tensor  # (1, 2, k, k)
    slice_gate: SliceGateParams

    @property
    def num_channels(self) -> int:
        return self.mlp_w1.shape[1]

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = [("mlp_w1", self.mlp_w1), ("mlp_w2", self.mlp_w2),
               ("pos_kernel", self.pos_kernel)]
        out += [("slice_" + n, t) for n, t in self.slice_gate.tensors()]
        return out


@dataclass
class LowRankGaussian:
    """N(mu, P P^T + diag(d)) over the l slices; r = P.shape[1] <= l."""

    mu: np.ndarray       # (l,)
    p_factor: np.ndarray  # (l, r)
    d_diag: np.ndarray   # (l,), strictly positive

    def covariance(self) -> np.ndarray:
        return self.p_factor @ self.p_factor.T + np.diag(self.d_diag)


@dataclass
class AttentionRecord:
    """Numeric snapshot of one forward pass through the three gates."""

    m_semantic: np.ndarray   # (1, c, 1, 1)
    m_positional: np.ndarray  # (1, 1, h, w)
    m_slice: np.ndarray      # (l, 1, 1, 1)
    gaussian: LowRankGaussian
    z_sample: np.ndarray     # (l,)


def _he_normal(rng, shape, fan_in, scale=1.0):
    return rng.standard_normal(shape) * scale * math.sqrt(2.0 / fan_in)


def init_slice_gate(l: int, rank: int, reduction_s: float,
                    rng: np.random.Generator) -> SliceGateParams:
    if rank > l:
        raise ValueError(f"rank {rank} exceeds slice count {l}")
    lh = hidden_dim(l, reduction_s)
    return SliceGateParams(
        mlp_w1=Tensor(_he_normal(rng, (lh, l), l), requires_grad=True),
        mlp_w2=Tensor(_he_normal(rng, (l, lh), lh), requires_grad=True),
        w_mu=Tensor(_he_normal(rng, (l, l), l, scale=0.1), requires_grad=True),
        w_p=Tensor(_he_normal(rng, (l * rank, l), l, scale=0.1), requires_grad=True),
        w_d=Tensor(_he_normal(rng, (l, l), l, scale=0.1), requires_grad=True),
        rank=rank,
    )


def init_csam(l: int, c: int, rank: int = 4, k: int = 7,
              reduction: float = 8.0, reduction_s: float = 2.0,
              rng: np.random.Generator | None = None) -> CsamParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    ch = hidden_dim(c, reduction)
    return CsamParams(
        mlp_w1=Tensor(_he_normal(rng, (ch, c), c), requires_grad=True),
        mlp_w2=Tensor(_he_normal(rng, (c, ch), ch), requires_grad=True),
        pos_kernel=Tensor(_he_normal(rng, (1, 2, k, k), 2 * k * k),
                          requires_grad=True),
        slice_gate=init_slice_gate(l, rank, reduction_s, rng),
    )


def _mlp(v: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return T.matmul(w2, T.leaky_relu(T.matmul(w1, v), HIDDEN_SLOPE))


def semantic_attention(f: Tensor, p: CsamParams) -> Tensor:
    """Per-channel gate, identical for all slices and spatial positions."""
    if f.shape[1] != p.num_channels:
        raise T.ShapeError(
            f"semantic_attention: {f.shape[1]} channels, params expect "
            f"{p.num_channels}")
    c = f.shape[1]
    mp = T.reshape(T.reduce_max(f, axes=(0, 2, 3)), (c, 1))
    # in-plane mean first, then an order-stable mean over slices so the gate
    # is exactly invariant under slice permutations
    ap = T.reshape(T.stable_mean0(T.reduce_mean(f, axes=(2, 3))), (c, 1))
    s = T.sigmoid(_mlp(mp, p.mlp_w1, p.mlp_w2) + _mlp(ap, p.mlp_w1, p.mlp_w2))
    return T.reshape(s, (1, c, 1, 1))


def positional_attention(f1: Tensor, p: CsamParams) -> Tensor:
    """Per-location gate shared by all slices and channels."""
    h, w = f1.shape[2], f1.shape[3]
    mp = T.reshape(T.reduce_max(f1, axes=(0, 1)), (1, 1, h, w))
    # channel mean first, then an order-stable mean over slices (see
    # semantic_attention)
    ap = T.reshape(T.stable_mean0(T.reduce_mean(f1, axes=1)), (1, 1, h, w))
    k = p.pos_kernel.shape[2]
    conv = T.conv2d(T.concat([mp, ap], axis=1), p.pos_kernel, padding=(k - 1) // 2)
    return T.sigmoid(conv)


def slice_gaussian(v: Tensor, p: SliceGateParams) -> tuple[Tensor, Tensor, Tensor]:
    """Map the pooled slice vector to (mu, P, d_diag) of the slice Gaussian.

    ``v`` is an (l, 1) column. d_diag is softplus(W_d v) plus a small floor so
    the covariance P P^T + diag(d) is always strictly positive definite.
    """
    l, r = p.num_slices, p.rank
    mu = T.reshape(T.matmul(p.w_mu, v), (l,))
    p_factor = T.reshape(T.matmul(p.w_p, v), (l, r))
    d_raw = T.reshape(T.matmul(p.w_d, v), (l,))
    d_diag = T.softplus(d_raw) + Tensor(VARIANCE_FLOOR)
    return mu, p_factor, d_diag


def sample_slice(mu: Tensor, p_factor: Tensor, d_diag: Tensor, mode: str,
                 rng: np.random.Generator | None = None,
                 noise: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Draw z from N(mu, PP^T + D) by reparameterization, or return mu in eval.

    ``noise`` overrides the rng with fixed (eps1, eps2) draws, which keeps the
    sample path differentiable and deterministic for gradient checking.
    """
    if mode == "eval":
        return mu
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    l, r = p_factor.shape
    if noise is not None:
        eps1, eps2 = noise
    else:
        if rng is None:
            raise ValueError("train-mode sampling needs an rng or fixed noise")
        eps1 = rng.standard_normal(r)
        eps2 = rng.standard_normal(l)
    pe = T.reshape(T.matmul(p_factor, Tensor(eps1.reshape(r, 1))), (l,))
    de = T.powc(d_diag, 0.5) * Tensor(eps2)
    return mu + pe + de


def slice_attention(f2: Tensor, p: SliceGateParams, mode: str = "eval",
                    rng: np.random.Generator | None = None,
                    noise=None) -> tuple[Tensor, LowRankGaussian, np.ndarray]:
    """Per-slice scalar gate from the sampled slice Gaussian.

    Returns the (l,1,1,1) gate plus a numeric record of the distribution and
    the drawn z.
    """
    l = f2.shape[0]
    if l != p.num_slices:
        raise T.ShapeError(
            f"slice_attention: input has {l} slices, params built for "
            f"{p.num_slices}")
    mp = T.reshape(T.reduce_max(f2, axes=(1, 2, 3)), (l, 1))
    ap = T.reshape(T.reduce_mean(f2, axes=(1, 2, 3)), (l, 1))
    v = _mlp(mp, p.mlp_w1, p.mlp_w2) + _mlp(ap, p.mlp_w1, p.mlp_w2)
    mu, p_factor, d_diag = slice_gaussian(v, p)
    z = sample_slice(mu, p_factor, d_diag, mode, rng=rng, noise=noise)
    gate = T.reshape(T.sigmoid(z), (l, 1, 1, 1))
    gaussian = LowRankGaussian(mu.data.copy(), p_factor.data.copy(),
                               d_diag.data.copy())
    return gate, gaussian, z.data.copy()


def csam_forward(f: Tensor, p: CsamParams, mode: str = "eval",
                 rng: np.random.Generator | None = None,
                 noise=None) -> tuple[Tensor, AttentionRecord]:
    """Apply the three gates in sequence: semantic, positional, slice."""
    m_sem = semantic_attention(f, p)
    f1 = T.mul(m_sem, f)
    m_pos = positional_attention(f1, p)
    f2 = T.mul(m_pos, f1)
    m_slice, gaussian, z = slice_attention(f2, p.slice_gate, mode, rng, noise)
    out = T.mul(m_slice, f2)
    rec = AttentionRecord(m_sem.data.copy(), m_pos.data.copy(),
                          m_slice.data.copy(), gaussian, z)
    return out, rec


def csam_param_count(l: int, c: int, r: int, k: int,
                     reduction: float = 8.0, reduction_s: float = 2.0) -> int:
    """Closed-form trainable-weight total of one attention instance."""
    if min(l, c, r, k) <= 0:
        raise ValueError("all size arguments must be positive")
    ch = hidden_dim(c, reduction)
    lh = hidden_dim(l, reduction_s)
    return 2 * c * ch + 2 * k * k + 2 * l * lh + (2 + r) * l * l


def enumerate_param_count(p: CsamParams) -> int:
    return sum(t.size for _, t in p.tensors())
