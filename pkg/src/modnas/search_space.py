"""Searchable U-net denoiser, its continuous relaxations, and the unfolded supernet.

The supernet applies ``T`` denoising stages, each a U-net with three encoding
blocks and four decoding blocks.  Every searchable layer is a
:class:`MixedLayer` (softmax over candidate operations, each candidate's
output channels scaled by free width parameters); the normal layers of each
block are joined by densely connected, softmax-weighted paths.  Between
stages the estimate is pulled back toward the observation::

    v_t = f_t(x_{t-1}),    x_t = delta_t * y + (1 - delta_t) * v_t,   x_0 = y
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamStore

LAYER_KINDS = ("NL", "DSL", "USL")

OP_KINDS = (
    "conv", "separable_conv", "dilated_conv", "residual_block", "skip",
    "strided_conv", "deconv", "interp_nearest", "interp_bilinear", "interp_area",
    "pixel_repeat",
)

_INTERP_MODE = {"interp_nearest": "nearest", "interp_bilinear": "bilinear",
                "interp_area": "area", "pixel_repeat": "nearest"}


@dataclass(frozen=True)
class OpSpec:
    kind: str
    kernel: int = 3
    dilation: int = 1

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {self.kind!r}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    @property
    def is_interp(self) -> bool:
        return self.kind in _INTERP_MODE

    @property
    def label(self) -> str:
        if self.kind == "skip" or self.is_interp:
            return self.kind
        d = f"_d{self.dilation}" if self.dilation > 1 else ""
        return f"{self.kind}{self.kernel}x{self.kernel}{d}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> OpSpec:
        return cls(**d)


@dataclass(frozen=True)
class CandidateSet:
    layer_kind: str
    candidates: tuple[OpSpec, ...]

    def __post_init__(self):
        if self.layer_kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.layer_kind!r}")
        if not self.candidates:
            raise ValueError("candidate set is empty")
        allowed = {
            "NL": {"conv", "separable_conv", "dilated_conv", "residual_block", "skip"},
            "DSL": {"strided_conv", "interp_nearest", "interp_bilinear", "interp_area"},
            "USL": {"deconv", "interp_nearest", "interp_bilinear", "interp_area", "pixel_repeat"},
        }[self.layer_kind]
        bad = [c.kind for c in self.candidates if c.kind not in allowed]
        if bad:
            raise ValueError(f"{self.layer_kind} layers cannot use {bad}")

    def __len__(self) -> int:
        return len(self.candidates)

    def to_dict(self) -> dict:
        return {"layer_kind": self.layer_kind, "candidates": [c.to_dict() for c in self.candidates]}

    @classmethod
    def from_dict(cls, d: dict) -> CandidateSet:
        return cls(d["layer_kind"], tuple(OpSpec.from_dict(c) for c in d["candidates"]))


DEFAULT_NL = CandidateSet("NL", (
    OpSpec("conv", 3), OpSpec("conv", 5), OpSpec("separable_conv", 5),
    OpSpec("dilated_conv", 3, 2), OpSpec("dilated_conv", 5, 2),
    OpSpec("residual_block", 3), OpSpec("skip", 1),
))
DEFAULT_DSL = CandidateSet("DSL", (
    OpSpec("strided_conv", 3), OpSpec("interp_nearest", 1),
    OpSpec("interp_bilinear", 1), OpSpec("interp_area", 1),
))
DEFAULT_USL = CandidateSet("USL", (
    OpSpec("deconv", 3), OpSpec("interp_nearest", 1), OpSpec("interp_bilinear", 1),
    OpSpec("interp_area", 1), OpSpec("pixel_repeat", 1),
))


@dataclass
class UNetSpec:
    init_channels: int = 48
    layers_per_block: int = 3
    levels: int = 3
    dense: bool = True
    nl: CandidateSet = DEFAULT_NL
    dsl: CandidateSet = DEFAULT_DSL
    usl: CandidateSet = DEFAULT_USL

    def __post_init__(self):
        if self.init_channels < 1 or self.layers_per_block < 1 or self.levels < 1:
            raise ValueError("init_channels, layers_per_block and levels must be positive")

    @property
    def divisor(self) -> int:
        return 2 ** self.levels

    def block_names(self) -> list[str]:
        enc = [f"eb{i + 1}" for i in range(self.levels)]
        dec = [f"db{i + 1}" for i in range(self.levels + 1)]
        return enc + dec

    def to_dict(self) -> dict:
        return {"init_channels": self.init_channels, "layers_per_block": self.layers_per_block,
                "levels": self.levels, "dense": self.dense, "nl": self.nl.to_dict(),
                "dsl": self.dsl.to_dict(), "usl": self.usl.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> UNetSpec:
        d = dict(d)
        for key in ("nl", "dsl", "usl"):
            if key in d:
                d[key] = CandidateSet.from_dict(d[key])
        return cls(**d)


@dataclass
class SupernetConfig:
    stages: int = 2
    unet: UNetSpec = field(default_factory=UNetSpec)
    share_stages: bool = False
    unfold: bool = True

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")

    def to_dict(self) -> dict:
        return {"stages": self.stages, "unet": self.unet.to_dict(),
                "share_stages": self.share_stages, "unfold": self.unfold}

    @classmethod
    def from_dict(cls, d: dict) -> SupernetConfig:
        d = dict(d)
        if "unet" in d:
            d["unet"] = UNetSpec.from_dict(d["unet"])
        return cls(**d)


# ---------------------------------------------------------------------------
# parametric building blocks


class ParamFactory:
    """Creates named, initialized weights inside a :class:`ParamStore`.

    Conv kernels use fan-in scaling with gain 2 behind a ReLU and gain 1
    otherwise, so activations keep their variance; biases start at zero.
    """

    def __init__(self, store: ParamStore, rng: np.random.Generator, prefix: str = ""):
        self.store = store
        self.rng = rng
        self.prefix = prefix

    def child(self, name: str) -> ParamFactory:
        return ParamFactory(self.store, self.rng, f"{self.prefix}{name}.")

    def kernel(self, name: str, shape: tuple[int, ...], fan_in: int, gain: float = 2.0) -> Tensor:
        std = np.sqrt(gain / fan_in)
        data = (self.rng.standard_normal(shape) * std).astype(np.float32)
        return self.store.add(self.prefix + name, data)

    def zeros(self, name: str, n: int) -> Tensor:
        return self.store.add(self.prefix + name, np.zeros(n, dtype=np.float32))

    def ones(self, name: str, n: int) -> Tensor:
        return self.store.add(self.prefix + name, np.ones(n, dtype=np.float32))


class Conv:
    """Convolution, optionally preceded by ReLU."""

    def __init__(self, pf: ParamFactory, c_in: int, c_out: int, k: int, stride: int = 1,
                 dilation: int = 1, groups: int = 1, pre_relu: bool = True, name: str = "conv"):
        sub = pf.child(name)
        self.weight = sub.kernel("w", (c_out, c_in // groups, k, k), (c_in // groups) * k * k,
                                 gain=2.0 if pre_relu else 1.0)
        self.bias = sub.zeros("b", c_out)
        self.stride, self.dilation, self.groups, self.pre_relu = stride, dilation, groups, pre_relu
        self.c_in, self.c_out, self.k = c_in, c_out, k

    def __call__(self, x: Tensor) -> Tensor:
        if self.pre_relu:
            x = ad.relu(x)
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.groups)

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


class SeparableConv:
    def __init__(self, pf: ParamFactory, c_in: int, c_out: int, k: int):
        self.depthwise = Conv(pf, c_in, c_in, k, groups=c_in, name="dw")
        self.pointwise = Conv(pf, c_in, c_out, 1, pre_relu=False, name="pw")

    def __call__(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))

    def tensors(self) -> list[Tensor]:
        return self.depthwise.tensors() + self.pointwise.tensors()


class ResidualBlock:
    """Two ReLU-conv layers plus an identity shortcut.

    When the widths differ the shortcut keeps the first ``c_out`` input
    channels (zero-padded if there are fewer), so it adds no parameters.
    The second conv starts at zero, making a fresh block an identity map.
    """

    def __init__(self, pf: ParamFactory, c_in: int, c_out: int, k: int):
        self.conv1 = Conv(pf, c_in, c_out, k, name="conv1")
        self.conv2 = Conv(pf, c_out, c_out, k, name="conv2")
        self.conv2.weight.data[...] = 0.0
        self.c_out = c_out

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.adjust_channels(x, self.c_out), self.conv2(self.conv1(x)))

    def tensors(self) -> list[Tensor]:
        return self.conv1.tensors() + self.conv2.tensors()


class Skip:
    def __call__(self, x: Tensor) -> Tensor:
        return x

    def tensors(self) -> list[Tensor]:
        return []


class Deconv:
    def __init__(self, pf: ParamFactory, c_in: int, c_out: int, k: int):
        sub = pf.child("deconv")
        self.weight = sub.kernel("w", (c_in, c_out, k, k), c_in * k * k)
        self.bias = sub.zeros("b", c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.transposed_conv2d(ad.relu(x), self.weight, self.bias, stride=2)

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Resample:
    """Fixed-factor interpolation followed by a 1x1 channel-conversion conv."""

    def __init__(self, pf: ParamFactory, c_in: int, c_out: int, mode: str, scale: float):
        self.mode, self.scale = mode, scale
        self.proj = Conv(pf, c_in, c_out, 1, pre_relu=False, name="proj")

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(ad.interpolate(x, self.mode, self.scale))

    def tensors(self) -> list[Tensor]:
        return self.proj.tensors()


def instantiate_candidate(spec: OpSpec, c_in: int, c_out: int, layer_kind: str, pf: ParamFactory):
    """Build the callable for one candidate operation.

    Every conv weight is applied after a ReLU; interpolations are followed by a
    1x1 conv.  DSL candidates halve and USL candidates double the spatial size.
    """
    if c_in < 1 or c_out < 1:
        raise ValueError("channel counts must be >= 1")
    if layer_kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {layer_kind!r}")
    kind, k, d = spec.kind, spec.kernel, spec.dilation
    if kind == "skip":
        if c_in != c_out:
            raise ValueError(f"skip needs c_in == c_out, got {c_in} and {c_out}")
        return Skip()
    if layer_kind == "NL":
        if kind in ("conv", "dilated_conv"):
            return Conv(pf, c_in, c_out, k, dilation=d)
        if kind == "separable_conv":
            return SeparableConv(pf, c_in, c_out, k)
        if kind == "residual_block":
            return ResidualBlock(pf, c_in, c_out, k)
    elif layer_kind == "DSL":
        if kind == "strided_conv":
            return Conv(pf, c_in, c_out, k, stride=2, dilation=d)
        if spec.is_interp:
            return Resample(pf, c_in, c_out, _INTERP_MODE[kind], 0.5)
    else:
        if kind == "deconv":
            return Deconv(pf, c_in, c_out, k)
        if spec.is_interp:
            return Resample(pf, c_in, c_out, _INTERP_MODE[kind], 2)
    raise ValueError(f"op {kind!r} is not valid in a {layer_kind} layer")


# ---------------------------------------------------------------------------
# relaxations


class MixedLayer:
    """Softmax-weighted sum of candidate outputs, each scaled per channel.

    ``z = sum_o softmax(alpha)_o * (beta_o * o(x))``.  Setting ``choice``
    evaluates a single candidate (still width-scaled), which is what the
    supernet collapses to when one logit dominates.
    """

    def __init__(self, pf: ParamFactory, arch_pf: ParamFactory, cands: CandidateSet,
                 c_in: int, c_out: int):
        self.cands = cands
        self.ops = [instantiate_candidate(spec, c_in, c_out, cands.layer_kind, pf.child(f"c{i}"))
                    for i, spec in enumerate(cands.candidates)]
        self.alpha = arch_pf.zeros("alpha", len(cands))
        self.betas = [arch_pf.ones(f"beta.{i}", c_out) for i in range(len(cands))]
        self.choice: int | None = None

    def weights(self) -> Tensor:
        return ad.softmax_vec(self.alpha)

    def __call__(self, x: Tensor) -> Tensor:
        if self.choice is not None:
            return ad.channel_scale(self.ops[self.choice](x), self.betas[self.choice])
        outs = [ad.channel_scale(op(x), beta) for op, beta in zip(self.ops, self.betas)]
        shape = outs[0].shape
        for spec, o in zip(self.cands.candidates, outs):
            if o.shape != shape:
                raise ValueError(f"candidate {spec.label} produced {o.shape}, expected {shape}")
        return ad.mix(outs, self.weights())


def mixed_layer_forward(x: Tensor, ops: Sequence[Callable], alpha: Tensor, betas: Sequence[Tensor]) -> Tensor:
    """Functional form of :class:`MixedLayer` over arbitrary candidate callables."""
    outs = [ad.channel_scale(op(x), b) for op, b in zip(ops, betas)]
    return ad.mix(outs, ad.softmax_vec(alpha))


def dense_block_forward(block_input: Tensor, layers: Sequence[Callable], gammas: Sequence[Tensor] | None) -> list[Tensor]:
    """Run a densely connected block and return ``[L_0, L_1, ..., L_n]``.

    Layer ``l`` computes ``z_l = layer_l(L_{l-1})`` and
    ``L_l = sum_{i<l} p_i L_i + p_l z_l`` with ``p = softmax(gamma_l)``.
    ``gammas=None`` gives a plain sequential chain.
    """
    feats = [block_input]
    for idx, layer in enumerate(layers):
        z = layer(feats[-1])
        if gammas is None:
            feats.append(z)
            continue
        gamma = gammas[idx]
        if gamma.shape != (idx + 2,):
            raise ValueError(f"gamma for layer {idx + 1} must have length {idx + 2}, got {gamma.shape}")
        for f in feats:
            if f.shape != z.shape:
                raise ValueError(f"dense path shape mismatch: {f.shape} vs {z.shape}")
        feats.append(ad.mix([*feats, z], ad.softmax_vec(gamma)))
    return feats


class SearchBlock:
    def __init__(self, pf: ParamFactory, arch_pf: ParamFactory, spec: UNetSpec, sampler: CandidateSet | None,
                 fusion_in: int | None):
        c = spec.init_channels
        self.fusion = Conv(pf, fusion_in, c, 3, pre_relu=False, name="fusion") if fusion_in else None
        self.layers = [MixedLayer(pf.child(f"l{i + 1}"), arch_pf.child(f"l{i + 1}"), spec.nl, c, c)
                       for i in range(spec.layers_per_block)]
        self.gammas = None
        if spec.dense:
            self.gammas = [arch_pf.zeros(f"l{i + 1}.gamma", i + 2) for i in range(spec.layers_per_block)]
        self.sampler = MixedLayer(pf.child("s"), arch_pf.child("s"), sampler, c, c) if sampler else None

    def __call__(self, x: Tensor) -> list[Tensor]:
        return dense_block_forward(x, self.layers, self.gammas)

    def mixed_layers(self) -> list[MixedLayer]:
        return self.layers + ([self.sampler] if self.sampler else [])


class SearchableUNet:
    """One denoising stage.  Weights live under ``pf``; architecture under ``arch_pf``.

    Arch tensors are created by the first stage and looked up by the others,
    so all stages share one architecture while owning distinct weights.
    """

    def __init__(self, spec: UNetSpec, pf: ParamFactory, arch_pf: ParamFactory):
        self.spec = spec
        c = spec.init_channels
        self.stem1 = Conv(pf, 1, c, 3, pre_relu=False, name="stem1")
        self.stem2 = Conv(pf, c, c, 3, name="stem2")
        self.encoders = [SearchBlock(pf.child(f"eb{i + 1}"), arch_pf.child(f"eb{i + 1}"), spec, spec.dsl, None)
                         for i in range(spec.levels)]
        self.decoders = []
        for i in range(spec.levels + 1):
            sampler = spec.usl if i < spec.levels else None
            fusion_in = 2 * c if i > 0 else None
            self.decoders.append(SearchBlock(pf.child(f"db{i + 1}"), arch_pf.child(f"db{i + 1}"), spec,
                                             sampler, fusion_in))
        self.head = Conv(pf, c, 1, 1, name="head")

    def blocks(self) -> list[SearchBlock]:
        return self.encoders + self.decoders

    def __call__(self, x: Tensor) -> Tensor:
        return unet_forward(x, self)


def unet_forward(x: Tensor, net: SearchableUNet) -> Tensor:
    """Forward pass of one searchable U-net stage; output shape equals input shape.

    Each decoding block after the deepest concatenates the upsampled features
    with the first-layer output of the encoding block at the same resolution.
    """
    n, c, h, w = x.shape
    div = net.spec.divisor
    if c != 1:
        raise ValueError(f"expected a single-channel input, got {c} channels")
    if h % div or w % div:
        raise ValueError(f"spatial size {h}x{w} must be divisible by {div}")
    feat = net.stem2(net.stem1(x))
    skips = []
    for blk in net.encoders:
        ls = blk(feat)
        skips.append(ls[1])
        feat = blk.sampler(ls[-1])
    for i, blk in enumerate(net.decoders):
        if blk.fusion is not None:
            feat = blk.fusion(ad.concat([feat, skips[-i]]))
        ls = blk(feat)
        feat = blk.sampler(ls[-1]) if blk.sampler is not None else ls[-1]
    return net.head(feat)


def mod_unfold_forward(y: Tensor, denoisers: Sequence[Callable], deltas: Sequence[Tensor]) -> Tensor:
    """Unfolded iterative regularization: ``x_t = d_t y + (1 - d_t) f_t(x_{t-1})``, ``x_0 = y``."""
    if len(denoisers) < 1:
        raise ValueError("need at least one stage")
    if len(denoisers) != len(deltas):
        raise ValueError(f"{len(denoisers)} denoisers but {len(deltas)} relaxation values")
    x = y
    for f, d in zip(denoisers, deltas):
        x = ad.blend(y, f(x), d)
    return x


@dataclass
class SupernetState:
    """All trainable weights plus architecture parameters (alpha, beta, gamma, delta)."""

    config: SupernetConfig
    weights: ParamStore
    arch: ParamStore


class Supernet:
    """``T`` searchable U-net stages joined by the relaxation update."""

    def __init__(self, config: SupernetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        weights, arch = ParamStore(), ParamStore()
        self.state = SupernetState(config, weights, arch)
        arch_pf = ParamFactory(arch, rng, "")
        n_nets = 1 if config.share_stages else config.stages
        self.stages: list[SearchableUNet] = []
        for t in range(n_nets):
            pf = ParamFactory(weights, rng, f"s{t}.")
            # later stages reuse the arch tensors created by stage 0
            self.stages.append(SearchableUNet(config.unet, pf, arch_pf if t == 0 else _SharedArch(arch)))
        if config.share_stages:
            self.stages = self.stages * config.stages
        self.delta_logits = [arch.add(f"delta.{t}", np.zeros(1, dtype=np.float32)) for t in range(config.stages)]

    @property
    def unet(self) -> SearchableUNet:
        return self.stages[0]

    def deltas(self) -> list[Tensor]:
        return [ad.sigmoid(d) for d in self.delta_logits]

    def __call__(self, y: Tensor) -> Tensor:
        if not self.config.unfold:
            return self.stages[0](y)
        return mod_unfold_forward(y, self.stages, self.deltas())

    def mixed_layers(self) -> list[MixedLayer]:
        return [m for st in _unique(self.stages) for b in st.blocks() for m in b.mixed_layers()]

    def set_choice(self, choice: int | None) -> None:
        for m in self.mixed_layers():
            m.choice = choice

    def load_state(self, weights: dict[str, np.ndarray], arch: dict[str, np.ndarray]) -> None:
        for store, arrays in ((self.state.weights, weights), (self.state.arch, arch)):
            for name, tensor in store.items():
                if name not in arrays:
                    raise KeyError(f"missing parameter {name!r}")
                if arrays[name].shape != tensor.shape:
                    raise ValueError(f"shape mismatch for {name!r}")
                tensor.data[...] = arrays[name]

    def stage_weight_count(self, stage: int = 0) -> int:
        prefix = f"s{stage}."
        return sum(t.data.size for n, t in self.state.weights.items() if n.startswith(prefix))


class _SharedArch(ParamFactory):
    """Factory that returns existing architecture tensors instead of creating them."""

    def __init__(self, store: ParamStore, prefix: str = ""):
        super().__init__(store, np.random.default_rng(0), prefix)

    def child(self, name: str) -> _SharedArch:
        return _SharedArch(self.store, f"{self.prefix}{name}.")

    def zeros(self, name: str, n: int) -> Tensor:
        return self.store[self.prefix + name]

    ones = zeros


def _unique(items):
    seen, out = set(), []
    for it in items:
        if id(it) not in seen:
            seen.add(id(it))
            out.append(it)
    return out
