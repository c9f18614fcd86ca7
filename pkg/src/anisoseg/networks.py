"""Encoder-decoder backbones with per-scale cross-slice attention.

Two wirings are provided: the classic single-chain decoder ("unet") and the
nested dense-skip decoder ("unetpp"). The slice axis l is treated as the
batch axis by every 2D operation; attention couples the slices. Convolution
blocks follow the instance-norm + leaky-ReLU convention.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import attention as A


class CheckpointError(IOError):
    """Malformed checkpoint file."""


@dataclass
class BackboneConfig:
    levels: int = 4
    base_channels: int = 16
    input_channels: int = 1
    num_classes: int = 3
    slices: int = 8
    wiring: str = "unet"  # "unet" | "unetpp"
    csam_enabled: list[bool] = field(default_factory=list)  # per level; empty = all on
    rank: int = 4
    reduction: float = 8.0
    reduction_s: float = 2.0
    pos_kernel_size: int = 7

    def __post_init__(self):
        if self.levels < 3:
            raise ValueError("levels must be >= 3")
        if self.wiring not in ("unet", "unetpp"):
            raise ValueError(f"unknown wiring {self.wiring!r}")
        if not self.csam_enabled:
            self.csam_enabled = [True] * self.levels
        if len(self.csam_enabled) != self.levels:
            raise ValueError("csam_enabled must have one flag per level")
        if self.rank > self.slices:
            raise ValueError("rank must not exceed slice count")

    def channels(self, level: int) -> int:
        return self.base_channels * (2 ** level)


@dataclass
class PipelineConfig:
    """Placement of cross-slice operations around a 2D encoder/decoder."""

    f_pre: str = "identity"   # "identity" | "stack"
    f_mid: str = "identity"   # "identity" | "csam"
    f_post: str = "identity"  # "identity" | "slice_attention"
    n_neighbors: int = 1

    def __post_init__(self):
        if self.f_pre not in ("identity", "stack"):
            raise ValueError(f"unknown f_pre {self.f_pre!r}")
        if self.f_mid not in ("identity", "csam"):
            raise ValueError(f"unknown f_mid {self.f_mid!r}")
        if self.f_post not in ("identity", "slice_attention"):
            raise ValueError(f"unknown f_post {self.f_post!r}")


def is_2p5d(p: PipelineConfig) -> bool:
    """True iff at least one stage operates across slices."""
    return p.f_pre != "identity" or p.f_mid != "identity" or p.f_post != "identity"


@dataclass
class ConvBlockParams:
    """Two (conv 3x3 -> instance norm -> leaky relu) repetitions, no conv bias."""

    conv1: Tensor
    gamma1: Tensor
    beta1: Tensor
    conv2: Tensor
    gamma2: Tensor
    beta2: Tensor
    in_channels: int
    out_channels: int

    def tensors(self):
        return [("conv1", self.conv1), ("gamma1", self.gamma1),
                ("beta1", self.beta1), ("conv2", self.conv2),
                ("gamma2", self.gamma2), ("beta2", self.beta2)]


def init_conv_block(cin: int, cout: int, rng) -> ConvBlockParams:
    def kernel(ci, co):
        std = np.sqrt(2.0 / (ci * 9))
        return Tensor(rng.standard_normal((co, ci, 3, 3)) * std,
                      requires_grad=True)

    return ConvBlockParams(
        conv1=kernel(cin, cout),
        gamma1=Tensor(np.ones(cout), requires_grad=True),
        beta1=Tensor(np.zeros(cout), requires_grad=True),
        conv2=kernel(cout, cout),
        gamma2=Tensor(np.ones(cout), requires_grad=True),
        beta2=Tensor(np.zeros(cout), requires_grad=True),
        in_channels=cin, out_channels=cout,
    )


def conv_block(x: Tensor, p: ConvBlockParams) -> Tensor:
    if x.shape[1] != p.in_channels:
        raise T.ShapeError(
            f"conv_block expects {p.in_channels} input channels, got {x.shape[1]}")
    h = T.leaky_relu(T.instance_norm(T.conv2d(x, p.conv1, padding=1),
                                     p.gamma1, p.beta1), 0.01)
    return T.leaky_relu(T.instance_norm(T.conv2d(h, p.conv2, padding=1),
                                        p.gamma2, p.beta2), 0.01)


def max_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise T.ShapeError(f"max_pool2 needs even spatial size, got {h}x{w}")
    r = T.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return T.reduce_max(r, axes=(3, 5))


def f_pre_stack(x: Tensor, n: int) -> Tensor:
    """Stack each slice with its n neighbors per side as extra channels.

    Edge slices replicate the boundary slice. The middle channel group of
    every stack is the original slice.
    """
    if n < 1:
        raise ValueError("neighbor count must be >= 1")
    l = x.shape[0]
    if n >= l:
        raise ValueError(f"neighbor count {n} must be < slice count {l}")
    groups = []
    data = x.data
    for off in range(-n, n + 1):
        idx = np.clip(np.arange(l) + off, 0, l - 1)
        groups.append(data[idx])
    return Tensor(np.concatenate(groups, axis=1))


def f_post_slice_attention(decoded: Tensor, gate: A.SliceGateParams,
                           mode: str = "eval", rng=None, noise=None):
    """Gate decoder output with the per-slice attention scalar."""
    m_slice, gaussian, z = A.slice_attention(decoded, gate, mode, rng, noise)
    return T.mul(m_slice, decoded), m_slice, gaussian, z


class SegNet:
    """A segmentation backbone instance: config plus ordered parameters."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        L = cfg.levels
        self.encoder = []
        for i in range(L):
            cin = cfg.input_channels if i == 0 else cfg.channels(i - 1)
            self.encoder.append(init_conv_block(cin, cfg.channels(i), rng))
        self.csam: list[A.CsamParams | None] = []
        for i in range(L):
            if cfg.csam_enabled[i]:
                self.csam.append(A.init_csam(
                    cfg.slices, cfg.channels(i), rank=cfg.rank,
                    k=cfg.pos_kernel_size, reduction=cfg.reduction,
                    reduction_s=cfg.reduction_s, rng=rng))
            else:
                self.csam.append(None)
        # decoder nodes keyed (level i, stage j); channel algebra checked here
        self.decoder: dict[tuple[int, int], ConvBlockParams] = {}
        if cfg.wiring == "unet":
            for i in range(L - 2, -1, -1):
                cin = cfg.channels(i) + cfg.channels(i + 1)
                self.decoder[(i, 1)] = init_conv_block(cin, cfg.channels(i), rng)
        else:
            for j in range(1, L):
                for i in range(L - j):
                    cin = j * cfg.channels(i) + cfg.channels(i + 1)
                    self.decoder[(i, j)] = init_conv_block(cin, cfg.channels(i), rng)
        std = np.sqrt(2.0 / cfg.base_channels)
        self.head = Tensor(
            rng.standard_normal((cfg.num_classes, cfg.base_channels, 1, 1)) * std,
            requires_grad=True)

    # ----- parameter bookkeeping -------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Parameters in declared construction order (stable for checkpoints)."""
        out = []
        for i, blk in enumerate(self.encoder):
            out += [(f"enc{i}.{n}", t) for n, t in blk.tensors()]
        for i, cp in enumerate(self.csam):
            if cp is not None:
                out += [(f"csam{i}.{n}", t) for n, t in cp.tensors()]
        for (i, j) in sorted(self.decoder):
            out += [(f"dec{i}_{j}.{n}", t) for n, t in self.decoder[(i, j)].tensors()]
        out.append(("head", self.head))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def csam_parameter_count(self) -> int:
        return sum(A.enumerate_param_count(cp) for cp in self.csam if cp is not None)

    def backbone_parameter_count(self) -> int:
        return self.parameter_count() - self.csam_parameter_count()

    # ----- forward ---------------------------------------------------------------

    def _check_input(self, x: Tensor):
        l, c, h, w = x.shape
        cfg = self.cfg
        if l != cfg.slices:
            raise T.ShapeError(f"input has {l} slices, model built for {cfg.slices}")
        if c != cfg.input_channels:
            raise T.ShapeError(f"input has {c} channels, expected {cfg.input_channels}")
        d = 2 ** (cfg.levels - 1)
        if h % d or w % d:
            raise T.ShapeError(f"spatial size {h}x{w} not divisible by {d}")

    def encode(self, x: Tensor) -> list[Tensor]:
        self._check_input(x)
        feats = []
        cur = x
        for i, blk in enumerate(self.encoder):
            if i > 0:
                cur = max_pool2(cur)
            cur = conv_block(cur, blk)
            feats.append(cur)
        return feats

    def _refine(self, feats, mode, rng, noise):
        refined, records = [], []
        for i, f in enumerate(feats):
            cp = self.csam[i]
            if cp is None:
                refined.append(f)
                records.append(None)
            else:
                nz = None if noise is None else noise[i]
                out, rec = A.csam_forward(f, cp, mode=mode, rng=rng, noise=nz)
                refined.append(out)
                records.append(rec)
        return refined, records

    def forward(self, x: Tensor, mode: str = "eval", rng=None, noise=None):
        """Full forward pass; returns (logits, attention records per level)."""
        feats = self.encode(x)
        refined, records = self._refine(feats, mode, rng, noise)
        if self.cfg.wiring == "unet":
            out = self._decode_unet(refined)
        else:
            out = self._decode_unetpp(refined)
        logits = T.conv2d(out, self.head, padding=0)
        return logits, records

    def _decode_unet(self, refined):
        L = self.cfg.levels
        d = refined[L - 1]
        for i in range(L - 2, -1, -1):
            blk = self.decoder[(i, 1)]
            merged = T.concat([refined[i], T.upsample_nearest(d, 2)], axis=1)
            assert merged.shape[1] == blk.in_channels
            d = conv_block(merged, blk)
        return d

    def _decode_unetpp(self, refined):
        L = self.cfg.levels
        nodes: dict[tuple[int, int], Tensor] = {(i, 0): refined[i] for i in range(L)}
        for j in range(1, L):
            for i in range(L - j):
                blk = self.decoder[(i, j)]
                skips = [refined[i]] + [nodes[(i, jj)] for jj in range(1, j)]
                up = T.upsample_nearest(nodes[(i + 1, j - 1)], 2)
                merged = T.concat(skips + [up], axis=1)
                assert merged.shape[1] == blk.in_channels
                nodes[(i, j)] = conv_block(merged, blk)
        return nodes[(0, L - 1)]

    def forward_plain(self, x: Tensor):
        """Classic 2D wiring with the same weights and no attention anywhere."""
        feats = self.encode(x)
        L = self.cfg.levels
        if self.cfg.wiring == "unet":
            d = feats[L - 1]
            for i in range(L - 2, -1, -1):
                merged = T.concat([feats[i], T.upsample_nearest(d, 2)], axis=1)
                d = conv_block(merged, self.decoder[(i, 1)])
            out = d
        else:
            nodes = {(i, 0): feats[i] for i in range(L)}
            for j in range(1, L):
                for i in range(L - j):
                    skips = [feats[i]] + [nodes[(i, jj)] for jj in range(1, j)]
                    up = T.upsample_nearest(nodes[(i + 1, j - 1)], 2)
                    nodes[(i, j)] = conv_block(T.concat(skips + [up], axis=1),
                                               self.decoder[(i, j)])
            out = nodes[(0, L - 1)]
        return T.conv2d(out, self.head, padding=0)


def expected_csam_total(cfg: BackboneConfig) -> int:
    """Closed-form attention-parameter total over enabled levels."""
    total = 0
    for i in range(cfg.levels):
        if cfg.csam_enabled[i]:
            total += A.csam_param_count(cfg.slices, cfg.channels(i), cfg.rank,
                                        cfg.pos_kernel_size, cfg.reduction,
                                        cfg.reduction_s)
    return total


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, JSON descriptor, raw float64 parameters

_CKPT_MAGIC = b"ASCK"
_CKPT_VERSION = 1


def save_checkpoint(model: SegNet, path) -> None:
    named = model.named_parameters()
    desc = {
        "config": asdict(model.cfg),
        "tensors": [[name, list(t.shape)] for name, t in named],
    }
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<BI", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> SegNet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        version, dlen = struct.unpack("<BI", fh.read(5))
        if version != _CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        desc = json.loads(fh.read(dlen).decode("utf-8"))
        cfg = BackboneConfig(**desc["config"])
        model = SegNet(cfg, rng=np.random.default_rng(0))
        named = dict(model.named_parameters())
        for name, shape in desc["tensors"]:
            if name not in named:
                raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"truncated checkpoint at tensor {name!r}")
            named[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return model
