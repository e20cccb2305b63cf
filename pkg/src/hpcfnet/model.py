"""Siamese change-detection network: encoder, paired channel fusion,
reverse spatial attention, multi-part feature learning and prediction head.

Level indices in code run 0..4 for the conv1_2 .. conv5_3 taps.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import ops
from .ops import BNState, ConvSpec, SpecError
from .tensor import ShapeError, Tensor, concat, make_result, rng_stream

FULL_WIDTHS = (64, 128, 256, 512, 512)
VGG_DEPTHS = (2, 2, 3, 3, 3)


@dataclass
class ModelConfig:
    width_scale: float = 1.0
    base_widths: tuple = FULL_WIDTHS
    dilations: tuple = (1, 2, 3, 4)
    leaky_slope: float = 0.01
    input_size: tuple = (224, 224)
    use_rsa: bool = True
    use_mpfl: bool = True
    arch: str = "hpcfnet"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.base_widths = tuple(self.base_widths)
        self.dilations = tuple(self.dilations)
        self.input_size = tuple(self.input_size)
        if self.arch not in ("hpcfnet", "early_concat"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.width_scale <= 0:
            raise ValueError("width_scale must be positive")
        if self.arch == "hpcfnet" and self.use_mpfl:
            for m in self.mpfl_channels:
                if m % 4:
                    raise SpecError(f"MPFL width {m} not divisible by 4; adjust width_scale")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(b * self.width_scale))) for b in self.base_widths)

    @property
    def pagc_channels(self) -> tuple[int, ...]:
        """1x1 reduction target per level: c for levels 1-4, 2c at level 5."""
        w = self.widths
        return (*w[:4], 2 * w[4])

    @property
    def mpfl_channels(self) -> tuple[int, ...]:
        """MPFL output width for levels 2..5 (half the level's CLB width)."""
        return tuple(c // 2 for c in self.widths[1:])

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("base_widths", "dilations", "input_size"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# -- parameter containers --------------------------------------------------

class Module:
    """Minimal container that discovers tensors, BN states and sub-modules."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, val in vars(self).items():
            if isinstance(val, (list, tuple)):
                for i, v in enumerate(val):
                    if isinstance(v, (Module, Tensor, BNState)):
                        yield f"{name}.{i}", v
            elif isinstance(val, (Module, Tensor, BNState)):
                yield name, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in self._children():
            path = f"{prefix}{name}"
            if isinstance(val, Tensor):
                yield path, val
            elif isinstance(val, BNState):
                yield f"{path}.scale", val.scale
                yield f"{path}.shift", val.shift
            else:
                yield from val.named_parameters(path + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in self._children():
            path = f"{prefix}{name}"
            if isinstance(val, BNState):
                yield f"{path}.running_mean", val.running_mean
                yield f"{path}.running_var", val.running_var
            elif isinstance(val, Module):
                yield from val.named_buffers(path + ".")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv(Module):
    def __init__(self, spec: ConvSpec, seed: int, name: str, dtype=np.float64, bias: bool = True):
        self.spec = spec
        oc, icg, kh, kw = spec.weight_shape
        rng = rng_stream(seed, f"init/{name}")
        fan_in = icg * kh * kw
        fan_out = oc // spec.groups * kh * kw
        self.weight = Tensor(xavier_uniform(spec.weight_shape, fan_in, fan_out, rng, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(oc, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec)


class CLB(Module):
    """3x3 convolution -> leaky ReLU -> batch normalization."""

    def __init__(self, cin: int, cout: int, seed: int, name: str, slope: float, dtype):
        self.conv = Conv(ConvSpec.same(cin, cout, 3), seed, f"{name}.conv", dtype)
        self.bn = BNState.create(cout, dtype)
        self.slope = slope

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ops.batch_norm(ops.leaky_relu(self.conv(x), self.slope), self.bn, mode)


class Encoder(Module):
    """VGG-16-style stacks; returns the last activation of each stack."""

    def __init__(self, in_channels: int, widths, seed: int, slope: float, dtype, name="encoder"):
        self.stages = []
        cin = in_channels
        for level, (depth, cout) in enumerate(zip(VGG_DEPTHS, widths)):
            stage = []
            for k in range(depth):
                stage.append(CLB(cin, cout, seed, f"{name}.{level}.{k}", slope, dtype))
                cin = cout
            self.stages.append(_Stage(stage))

    def __call__(self, x: Tensor, mode: str) -> list[Tensor]:
        feats = []
        for level, stage in enumerate(self.stages):
            if level > 0:
                x = ops.max_pool2d(x)
            for layer in stage.layers:
                x = layer(x, mode)
            feats.append(x)
        return feats


class _Stage(Module):
    def __init__(self, layers):
        self.layers = list(layers)


# -- paired channel fusion ---------------------------------------------------

def cfs(f0: Tensor, f1: Tensor) -> Tensor:
    """Cross feature stack: t0 channel i -> 2i, t1 channel i -> 2i+1."""
    if f0.shape != f1.shape:
        raise ShapeError(f"CFS needs equal shapes, got {f0.shape} and {f1.shape}")
    n, c, h, w = f0.shape
    out = np.stack([f0.data, f1.data], axis=2).reshape(n, 2 * c, h, w)

    def backward(g):
        g5 = g.reshape(n, c, 2, h, w)
        return g5[:, :, 0], g5[:, :, 1]

    return make_result(out, (f0, f1), backward, "cfs")


class PAGC(Module):
    """Four dilated group convolutions (one 2-channel group per pair) + 1x1 reduction."""

    def __init__(self, c: int, reduce_to: int, dilations, seed: int, name: str, slope: float, dtype):
        self.c = c
        self.slope = slope
        # no bias: batch norm directly follows and would cancel it
        self.branches = [Conv(ConvSpec.same(2 * c, c, 3, d, groups=c), seed, f"{name}.branch{d}", dtype,
                              bias=False) for d in dilations]
        self.bns = [BNState.create(c, dtype) for _ in dilations]
        self.reduce = Conv(ConvSpec(len(dilations) * c, reduce_to, 1), seed, f"{name}.reduce", dtype)

    def __call__(self, fs: Tensor, mode: str = "train") -> Tensor:
        return self.reduce(ops.concat_channels(self.branch_outputs(fs, mode)))

    def branch_outputs(self, fs: Tensor, mode: str = "train") -> list[Tensor]:
        """Per-dilation maps (conv -> BN -> leaky ReLU), c channels each."""
        if fs.shape[1] != 2 * self.c:
            raise SpecError(f"PAGC expects {2 * self.c} interleaved channels, got {fs.shape[1]}")
        return [ops.leaky_relu(ops.batch_norm(conv(fs), bn, mode), self.slope)
                for conv, bn in zip(self.branches, self.bns)]


def pcf(f0: Tensor, f1: Tensor, deeper: Tensor | None, pagc: PAGC, mode: str = "train") -> Tensor:
    """Fuse a level's feature pair and append the upsampled deeper decoder feature."""
    fused = pagc(cfs(f0, f1), mode)
    if deeper is None:
        return fused
    up = ops.upsample_bilinear(deeper, 2)
    if up.shape[2:] != fused.shape[2:]:
        raise ShapeError(f"deeper feature upsamples to {up.shape[2:]}, level is {fused.shape[2:]}")
    return ops.concat_channels([fused, up])


# -- reverse spatial attention ----------------------------------------------

RSA_SPEC = ConvSpec.same(2, 1, 3)


def rsa_mask(f0: Tensor, f1: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1 - sigmoid(conv3x3([avg_c(f0*f1), max_c(f0*f1)]))."""
    if f0.shape != f1.shape:
        raise ShapeError(f"RSA needs equal shapes, got {f0.shape} and {f1.shape}")
    prod = f0 * f1
    pooled = ops.concat_channels([ops.channel_pool(prod, "avg"), ops.channel_pool(prod, "max")])
    return 1.0 - ops.sigmoid(ops.conv2d(pooled, weight, bias, RSA_SPEC))


def rsa_apply(mask: Tensor, feat: Tensor) -> Tensor:
    if mask.shape[1] != 1 or mask.shape[2:] != feat.shape[2:] or mask.shape[0] != feat.shape[0]:
        raise ShapeError(f"mask {mask.shape} does not match feature {feat.shape}")
    return feat * mask


class RSA(Module):
    def __init__(self, seed: int, name: str, dtype):
        self.conv = Conv(RSA_SPEC, seed, name, dtype)

    def mask(self, f0: Tensor, f1: Tensor) -> Tensor:
        return rsa_mask(f0, f1, self.conv.weight, self.conv.bias)

    def __call__(self, f0: Tensor, f1: Tensor, feat: Tensor) -> Tensor:
        return rsa_apply(self.mask(f0, f1), feat)


# -- multi-part feature learning --------------------------------------------

class MPFL(Module):
    """Channel reduction then four spatial partitions with independent kernels.

    Branch 1: quadrants, 1x1 each. Branch 2: left/right halves, 3x1 each.
    Branch 3: top/bottom halves, 1x3 each. Branch 4: whole map, 3x3.
    """

    def __init__(self, cin: int, out: int, seed: int, name: str, slope: float, dtype):
        if out % 4:
            raise SpecError(f"MPFL output {out} not divisible by 4")
        q = out // 4
        self.slope = slope
        self.reduce = Conv(ConvSpec(cin, q, 1), seed, f"{name}.reduce", dtype)
        self.quadrant = [Conv(ConvSpec(q, q, 1), seed, f"{name}.b1.{i}", dtype) for i in range(4)]
        self.columns = [Conv(ConvSpec.same(q, q, (3, 1)), seed, f"{name}.b2.{i}", dtype) for i in range(2)]
        self.rows = [Conv(ConvSpec.same(q, q, (1, 3)), seed, f"{name}.b3.{i}", dtype) for i in range(2)]
        self.whole = Conv(ConvSpec.same(q, q, 3), seed, f"{name}.b4", dtype)

    def branches(self, x: Tensor) -> list[Tensor]:
        """The four branch maps of an already-reduced input."""
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ShapeError(f"MPFL needs even spatial extents, got {(h, w)}")
        h2, w2 = h // 2, w // 2
        top, bot, left, right = slice(0, h2), slice(h2, h), slice(0, w2), slice(w2, w)
        al = slice(None)
        q = [conv(x[al, al, r, c]) for conv, (r, c) in
             zip(self.quadrant, [(top, left), (top, right), (bot, left), (bot, right)])]
        b1 = concat([concat(q[:2], 3), concat(q[2:], 3)], 2)
        b2 = concat([self.columns[0](x[al, al, al, left]), self.columns[1](x[al, al, al, right])], 3)
        b3 = concat([self.rows[0](x[al, al, top, al]), self.rows[1](x[al, al, bot, al])], 2)
        b4 = self.whole(x)
        return [ops.leaky_relu(b, self.slope) for b in (b1, b2, b3, b4)]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.concat_channels(self.branches(self.reduce(x)))


# -- full networks -----------------------------------------------------------

def _cast(x: Tensor, dtype) -> Tensor:
    return x if x.dtype == dtype else Tensor(x.data.astype(dtype))


def _check_pair(x0: Tensor, x1: Tensor, divisor: int = 16):
    if x0.shape != x1.shape:
        raise ShapeError(f"image pair shapes differ: {x0.shape} vs {x1.shape}")
    if x0.ndim != 4 or x0.shape[1] != 3:
        raise ShapeError(f"expected (n, 3, H, W) images, got {x0.shape}")
    h, w = x0.shape[2:]
    if h % divisor or w % divisor:
        raise ShapeError(f"image size {(h, w)} not divisible by {divisor}")



class HPCFNet(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        cfg, dt, seed, slope = config, config.np_dtype, config.seed, config.leaky_slope
        widths = cfg.widths
        self.encoder = Encoder(3, widths, seed, slope, dt)
        self.pagc = [PAGC(c, r, cfg.dilations, seed, f"pagc.{i}", slope, dt)
                     for i, (c, r) in enumerate(zip(widths, cfg.pagc_channels))]
        self.rsa = [RSA(seed, f"rsa.{i}", dt) for i in range(1, 5)] if cfg.use_rsa else []
        fused = [cfg.pagc_channels[i] + (widths[i + 1] if i < 4 else 0) for i in range(5)]
        self.fused_channels = tuple(fused)
        self.clb = [CLB(fused[i], widths[i], seed, f"clb.{i}", slope, dt) for i in range(5)]
        self.mpfl = ([MPFL(widths[i + 1], m, seed, f"mpfl.{i + 1}", slope, dt)
                      for i, m in enumerate(cfg.mpfl_channels)] if cfg.use_mpfl else [])
        self.head_channels = widths[0] + (sum(cfg.mpfl_channels) if cfg.use_mpfl else 0)
        self.head = Conv(ConvSpec(self.head_channels, 2, 1), seed, "head", dt)

    def backbone(self, x0: Tensor, x1: Tensor, mode: str = "train"):
        """Shared-weight encoder run once over the stacked pair."""
        n = x0.shape[0]
        both = concat([_cast(x0, self.config.np_dtype), _cast(x1, self.config.np_dtype)], 0) - 0.5
        feats = self.encoder(both, mode)
        return [f[:n] for f in feats], [f[n:] for f in feats]

    def forward_levels(self, x0: Tensor, x1: Tensor, mode: str = "train") -> dict:
        """Intermediate tensors per level, deepest first (for inspection and tests)."""
        # MPFL halves the 1/16-scale map, so that map must have even extents too
        _check_pair(x0, x1, 32 if self.config.use_mpfl else 16)
        f0, f1 = self.backbone(x0, x1, mode)
        trace = {"pcf": [None] * 5, "rsa": [None] * 5, "clb": [None] * 5, "mpfl": [None] * 5}
        deeper = None
        for i in range(4, -1, -1):
            feat = pcf(f0[i], f1[i], deeper, self.pagc[i], mode)
            trace["pcf"][i] = feat
            if i >= 1 and self.rsa:
                feat = self.rsa[i - 1](f0[i], f1[i], feat)
                trace["rsa"][i] = feat
            deeper = self.clb[i](feat, mode)
            trace["clb"][i] = deeper
            if i >= 1 and self.mpfl:
                trace["mpfl"][i] = self.mpfl[i - 1](deeper)
        return trace

    def __call__(self, x0: Tensor, x1: Tensor, mode: str = "train") -> Tensor:
        trace = self.forward_levels(x0, x1, mode)
        parts = [trace["clb"][0]]
        for i in range(1, 5):
            if trace["mpfl"][i] is not None:
                parts.append(ops.upsample_bilinear(trace["mpfl"][i], 2 ** i))
        return self.head(ops.concat_channels(parts))


class EarlyFusionNet(Module):
    """Baseline: images concatenated channel-wise into one encoder, plain U-Net decoder."""

    def __init__(self, config: ModelConfig):
        self.config = config
        cfg, dt, seed, slope = config, config.np_dtype, config.seed, config.leaky_slope
        w = cfg.widths
        self.encoder = Encoder(6, w, seed, slope, dt)
        self.clb = [CLB(w[i] + (w[i + 1] if i < 4 else 0), w[i], seed, f"clb.{i}", slope, dt)
                    for i in range(5)]
        self.head = Conv(ConvSpec(w[0], 2, 1), seed, "head", dt)

    def __call__(self, x0: Tensor, x1: Tensor, mode: str = "train") -> Tensor:
        _check_pair(x0, x1)
        dt = self.config.np_dtype
        x = concat([_cast(x0, dt), _cast(x1, dt)], 1) - 0.5
        feats = self.encoder(x, mode)
        deeper = None
        for i in range(4, -1, -1):
            feat = feats[i] if deeper is None else ops.concat_channels(
                [feats[i], ops.upsample_bilinear(deeper, 2)])
            deeper = self.clb[i](feat, mode)
        return self.head(deeper)


def build_model(config: ModelConfig):
    return HPCFNet(config) if config.arch == "hpcfnet" else EarlyFusionNet(config)


def matched_baseline_config(config: ModelConfig) -> ModelConfig:
    """Early-fusion config whose parameter count is closest to ``config``'s model."""
    target = build_model(config).num_parameters()
    best, best_gap = None, None
    for k in range(1, 400):
        scale = config.width_scale * k / 100
        cand = ModelConfig(**{**config.to_dict(), "arch": "early_concat", "width_scale": scale})
        gap = abs(EarlyFusionNet(cand).num_parameters() - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = cand, gap
    return best


def model_forward(x0: Tensor, x1: Tensor, model, mode: str = "eval") -> Tensor:
    return model(x0, x1, mode)


def predict_from_logits(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ties go to label 0 (unchanged)."""
    return (logits[:, 1] > logits[:, 0]).astype(np.uint8)


def predict_change_map(x0: Tensor, x1: Tensor, model) -> np.ndarray:
    """Binary (n, H, W) change maps, 1 = changed."""
    return predict_from_logits(model(x0, x1, "eval").data)
