"""Network blocks: the DSA fusion module, Res-DSA, MSAC/P-CAN and the
assembled DSAN forward pass.

All blocks are frozen dataclasses holding :class:`~opblend.autodiff.Tensor`
parameters. A model's canonical storage form is a flat
:class:`~opblend.weights.ParamSet`; :func:`init_dsan_params` creates one and
:func:`bind_dsan` wraps it back into a block tree (optionally on a gradient
tape for training). Both walk the same builder, so parameter enumeration
order is deterministic and identical everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    GradTape,
    ShapeError,
    Tensor,
    add,
    affine,
    concat_channels,
    conv2d,
    conv_transpose2d,
    lrelu,
    mul,
    sigmoid,
    tanh,
)
from .weights import ParamSet

__all__ = [
    "DsanConfig",
    "ConvParams",
    "DsaParams",
    "ResDsaBlock",
    "PcanBlock",
    "MsacBlock",
    "DsanModel",
    "PCAN_DILATIONS",
    "dsa_terms",
    "dsa_forward",
    "res_dsa_forward",
    "pcan_forward",
    "msac_forward",
    "dsan_forward",
    "dsan_param_layout",
    "init_dsan_params",
    "bind_dsan",
    "infer_dsan_config",
]

PCAN_DILATIONS = (1, 4, 8)


@dataclass(frozen=True)
class DsanConfig:
    """Architecture hyperparameters: feature width, image channels, lrelu slope."""

    channels: int = 16
    in_channels: int = 1
    lrelu_slope: float = 0.2

    def __post_init__(self):
        if self.channels < 1 or self.in_channels not in (1, 3):
            raise ValueError(f"bad config: channels={self.channels}, in_channels={self.in_channels}")


@dataclass(frozen=True)
class ConvParams:
    w: Tensor
    b: Tensor


@dataclass(frozen=True)
class DsaParams:
    """Four dual-convolution-summation units: eight 3x3 kernels, four biases."""

    w1l: Tensor
    w1r: Tensor
    b1: Tensor
    w2l: Tensor
    w2r: Tensor
    b2: Tensor
    w3l: Tensor
    w3r: Tensor
    b3: Tensor
    w4l: Tensor
    w4r: Tensor
    b4: Tensor


@dataclass(frozen=True)
class ResDsaBlock:
    """Residual block whose shortcut and conv branch merge through a DSA module."""

    conv_a: ConvParams
    conv_b: ConvParams
    dsa: DsaParams


@dataclass(frozen=True)
class PcanBlock:
    """Three parallel dilated 3x3 convs (dilations 1, 4, 8) fused by a 1x1 conv."""

    d1: ConvParams
    d4: ConvParams
    d8: ConvParams
    fuse: ConvParams


@dataclass(frozen=True)
class MsacBlock:
    """Three cascaded PcanBlock stages, per-stage 1x1 rearrange convs and a
    1x1 shrink back to the working channel count."""

    pcan1: PcanBlock
    pcan2: PcanBlock
    pcan3: PcanBlock
    rearrange1: ConvParams
    rearrange2: ConvParams
    rearrange3: ConvParams
    shrink: ConvParams


@dataclass(frozen=True)
class DsanModel:
    """The full network, plus the flat (name, tensor) enumeration it was built from."""

    ifi: ConvParams
    lfa_res1: ResDsaBlock
    lfa_res2: ResDsaBlock
    lfa_dsa: DsaParams
    down: ConvParams
    nla_msac1: MsacBlock
    nla_res3: ResDsaBlock
    nla_msac2: MsacBlock
    nla_res4: ResDsaBlock
    nla_dsa: DsaParams
    up: ConvParams
    halve: ConvParams
    uro_res: ResDsaBlock
    out_conv: ConvParams
    config: DsanConfig
    entries: tuple[tuple[str, Tensor], ...]

    def parameters(self):
        """Deterministic ordered (name, tensor) pairs."""
        return iter(self.entries)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _build_dsan(cfg: DsanConfig, make):
    """Assemble the block tree, requesting every parameter from ``make``.

    ``make(name, shape, kind)`` with kind in {"weight", "bias"} is called in
    the fixed enumeration order; whatever it returns is stored in the tree.
    """
    c, ic = cfg.channels, cfg.in_channels

    def conv(name, cin, cout, k):
        return ConvParams(
            make(f"{name}.w", (cout, cin, k, k), "weight"),
            make(f"{name}.b", (1, cout, 1, 1), "bias"),
        )

    def dsa(name):
        fields = []
        for i in (1, 2, 3, 4):
            fields.append(make(f"{name}.w{i}l", (c, c, 3, 3), "weight"))
            fields.append(make(f"{name}.w{i}r", (c, c, 3, 3), "weight"))
            fields.append(make(f"{name}.b{i}", (1, c, 1, 1), "bias"))
        return DsaParams(*fields)

    def res(name):
        return ResDsaBlock(conv(f"{name}.conv_a", c, c, 3), conv(f"{name}.conv_b", c, c, 3), dsa(f"{name}.dsa"))

    def pcan(name):
        return PcanBlock(
            conv(f"{name}.d1", c, c, 3),
            conv(f"{name}.d4", c, c, 3),
            conv(f"{name}.d8", c, c, 3),
            conv(f"{name}.fuse", 3 * c, c, 1),
        )

    def msac(name):
        return MsacBlock(
            pcan(f"{name}.pcan1"),
            pcan(f"{name}.pcan2"),
            pcan(f"{name}.pcan3"),
            conv(f"{name}.rearrange1", c, c, 1),
            conv(f"{name}.rearrange2", c, c, 1),
            conv(f"{name}.rearrange3", c, c, 1),
            conv(f"{name}.shrink", 3 * c, c, 1),
        )

    return dict(
        ifi=conv("ifi", ic, c, 3),
        lfa_res1=res("lfa.res1"),
        lfa_res2=res("lfa.res2"),
        lfa_dsa=dsa("lfa.dsa"),
        down=conv("down", c, c, 3),
        nla_msac1=msac("nla.msac1"),
        nla_res3=res("nla.res3"),
        nla_msac2=msac("nla.msac2"),
        nla_res4=res("nla.res4"),
        nla_dsa=dsa("nla.dsa"),
        up=ConvParams(make("up.w", (c, c, 4, 4), "weight"), make("up.b", (1, c, 1, 1), "bias")),
        halve=conv("halve", 2 * c, c, 1),
        uro_res=res("uro.res5"),
        out_conv=conv("out", c, ic, 3),
    )


def dsan_param_layout(cfg: DsanConfig) -> list[tuple[str, tuple[int, int, int, int]]]:
    """Ordered (name, shape) list of every parameter of the architecture."""
    layout = []

    def make(name, shape, kind):
        layout.append((name, shape))
        return None

    _build_dsan(cfg, make)
    return layout


def init_dsan_params(cfg: DsanConfig, seed) -> ParamSet:
    """Deterministic seeded initialization: weights uniform with fan-in
    scaling, biases zero."""
    rng = np.random.default_rng(seed)
    entries = []

    def make(name, shape, kind):
        if kind == "bias":
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        entries.append((name, arr))
        return None

    _build_dsan(cfg, make)
    return ParamSet(entries, meta={"channels": cfg.channels, "in_channels": cfg.in_channels})


def infer_dsan_config(params: ParamSet, lrelu_slope: float = 0.2) -> DsanConfig:
    """Recover the architecture hyperparameters from a parameter set."""
    try:
        w = params["ifi.w"]
    except KeyError:
        raise ValueError("parameter set has no 'ifi.w' entry; not a DSAN model") from None
    c, ic = int(w.shape[0]), int(w.shape[1])
    return DsanConfig(channels=c, in_channels=ic, lrelu_slope=lrelu_slope)


def bind_dsan(params: ParamSet, cfg: DsanConfig | None = None, tape: GradTape | None = None) -> DsanModel:
    """Wrap a flat parameter set into a block tree, optionally on a tape.

    Raises ``ValueError`` naming the first entry whose name or shape does not
    match the architecture layout.
    """
    if cfg is None:
        cfg = infer_dsan_config(params)
    it = iter(params.entries)
    entries = []

    def make(name, shape, kind):
        try:
            got_name, arr = next(it)
        except StopIteration:
            raise ValueError(f"parameter set ended early; expected entry {name!r} {shape}") from None
        if got_name != name or arr.shape != shape:
            raise ValueError(
                f"parameter mismatch at entry {len(entries)}: got {got_name!r} "
                f"{arr.shape}, expected {name!r} {shape}"
            )
        t = Tensor(arr, tape=tape)
        entries.append((name, t))
        return t

    fields = _build_dsan(cfg, make)
    leftover = sum(1 for _ in it)
    if leftover:
        raise ValueError(f"parameter set has {leftover} extra entries beyond the architecture")
    return DsanModel(config=cfg, entries=tuple(entries), **fields)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _conv_same(p: ConvParams, x: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    # zero padding chosen so that stride-1 output matches the input extent
    k = p.w.shape[2]
    return conv2d(x, p.w, p.b, stride=stride, dilation=dilation, padding=dilation * (k - 1) // 2)


def dsa_terms(p: DsaParams, s0: Tensor, s1: Tensor, slope: float = 0.2):
    """The three additive terms of the double-state aggregation module.

    Each of the four units mixes both states through its own kernel pair:
    the first unit is rectified on both signs, the next two are tanh
    modulators for those two paths, and the last one sigmoid-gates a tanh
    of the second state.
    """
    if s0.shape != s1.shape:
        raise ShapeError(f"dsa_forward: state shapes {s0.shape} and {s1.shape} differ")

    # conv(s0, wl) + conv(s1, wr) == conv([s0;s1], [wl;wr]); stacking the
    # states lets the four units share one window gather
    states = concat_channels([s0, s1])

    def unit(wl, wr, b):
        return conv2d(states, concat_channels([wl, wr]), b, padding=1)

    pre = unit(p.w1l, p.w1r, p.b1)
    pos = lrelu(pre, slope)
    neg = lrelu(affine(pre, -1.0), slope)
    mod_pos = tanh(unit(p.w2l, p.w2r, p.b2))
    mod_neg = tanh(unit(p.w3l, p.w3r, p.b3))
    gate = sigmoid(unit(p.w4l, p.w4r, p.b4))
    return mul(pos, mod_pos), mul(neg, mod_neg), mul(gate, tanh(s1))


def dsa_forward(p: DsaParams, s0: Tensor, s1: Tensor, slope: float = 0.2) -> Tensor:
    """Fuse two same-shape feature states; returns the sum of the three terms."""
    e1, e2, e3 = dsa_terms(p, s0, s1, slope)
    return add(add(e1, e2), e3)


def res_dsa_forward(blk: ResDsaBlock, x: Tensor, slope: float = 0.2) -> Tensor:
    """Residual block: shortcut and two-conv branch fused by DSA rather than
    direct summation."""
    branch = lrelu(_conv_same(blk.conv_b, lrelu(_conv_same(blk.conv_a, x), slope)), slope)
    return dsa_forward(blk.dsa, x, branch, slope)


def pcan_forward(blk: PcanBlock, x: Tensor, slope: float = 0.2) -> Tensor:
    """Parallel dilated convolutions, channel concat, 1x1 fuse."""
    branches = [
        lrelu(_conv_same(p, x, dilation=d), slope)
        for p, d in zip((blk.d1, blk.d4, blk.d8), PCAN_DILATIONS)
    ]
    return _conv_same(blk.fuse, concat_channels(branches))


def msac_forward(blk: MsacBlock, x: Tensor, slope: float = 0.2) -> Tensor:
    """Three cascaded P-CAN stages, rearranged per stage and shrunk to c channels."""
    s1 = pcan_forward(blk.pcan1, x, slope)
    s2 = pcan_forward(blk.pcan2, s1, slope)
    s3 = pcan_forward(blk.pcan3, s2, slope)
    merged = concat_channels(
        [
            _conv_same(blk.rearrange1, s1),
            _conv_same(blk.rearrange2, s2),
            _conv_same(blk.rearrange3, s3),
        ]
    )
    return _conv_same(blk.shrink, merged)


def dsan_forward(m: DsanModel, image: Tensor) -> Tensor:
    """Full forward pass; output has the input's shape.

    feature init -> local aggregation at full resolution -> stride-2 down ->
    nonlocal aggregation (two MSAC + Res-DSA pairs fused by DSA) -> transposed
    conv back to full resolution -> concat with the local features, 1x1 halve,
    final Res-DSA and reconstruction conv.
    """
    slope = m.config.lrelu_slope
    b, c, h, w = image.shape
    if c != m.config.in_channels:
        raise ShapeError(
            f"dsan_forward: model expects {m.config.in_channels} image channels, got shape {image.shape}"
        )
    if h % 2 or w % 2:
        raise ShapeError(
            f"dsan_forward: spatial extents must be even, got {h}x{w}; pad or resize the image"
        )

    feats = lrelu(_conv_same(m.ifi, image), slope)

    s0 = res_dsa_forward(m.lfa_res1, feats, slope)
    s1 = res_dsa_forward(m.lfa_res2, s0, slope)
    local = dsa_forward(m.lfa_dsa, s0, s1, slope)

    half = _conv_same(m.down, local, stride=2)
    stage1 = res_dsa_forward(m.nla_res3, msac_forward(m.nla_msac1, half, slope), slope)
    stage2 = res_dsa_forward(m.nla_res4, msac_forward(m.nla_msac2, stage1, slope), slope)
    nonlocal_ = dsa_forward(m.nla_dsa, stage1, stage2, slope)

    restored = conv_transpose2d(nonlocal_, m.up.w, m.up.b, stride=2, padding=1, out_hw=(h, w))
    merged = _conv_same(m.halve, concat_channels([restored, local]))
    return _conv_same(m.out_conv, res_dsa_forward(m.uro_res, merged, slope))
