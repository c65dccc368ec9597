"""Image quality (PSNR, SSIM) and efficiency accounting (parameters, MACs)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
import numpy as np

from .optim import ParamStore

PSNR_CAP_DB = 100.0


@dataclass
class MetricsConfig:
    max_value: float = 1.0
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    ref_height: int = 128
    ref_width: int = 128

    def __post_init__(self):
        if min(self.max_value, self.sigma, self.k1, self.k2) <= 0 or self.window < 1:
            raise ValueError("metric constants must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    params: int
    macs: int

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0 + 1e-12:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")
        if self.params < 0 or self.macs < 0:
            raise ValueError("params and macs must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, cfg: MetricsConfig | None = None) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical inputs."""
    cfg = cfg or MetricsConfig()
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(cfg.max_value ** 2 / mse))


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation along the last two axes
    k = g.size
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i : h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j : w - k + 1 + j] for j in range(k))


def ssim(a, b, cfg: MetricsConfig | None = None) -> float:
    """Mean structural similarity over all valid Gaussian-window positions.

    Inputs are 2-D images or stacks whose trailing two axes are spatial; the
    mean is taken over every window of every image in the stack.
    """
    cfg = cfg or MetricsConfig()
    a, b = _pair(a, b)
    if a.ndim < 2 or min(a.shape[-2:]) < cfg.window:
        raise ValueError(f"image {a.shape} is smaller than the {cfg.window}x{cfg.window} window")
    g = gaussian_window(cfg.window, cfg.sigma)
    c1 = (cfg.k1 * cfg.max_value) ** 2
    c2 = (cfg.k2 * cfg.max_value) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


# ---------------------------------------------------------------------------
# efficiency accounting


@dataclass(frozen=True)
class ConvLayer:
    """A plain convolution for cost accounting outside the U-net schema."""

    c_in: int
    c_out: int
    kernel: int = 3
    stride: int = 1
    groups: int = 1
    bias: bool = True


def plain_conv_net(depth: int = 17, width: int = 64, kernel: int = 3, channels: int = 1,
                   bias: bool = False) -> list[ConvLayer]:
    """A straight stack of ``depth`` convolutions (first/last map to/from ``channels``)."""
    if depth < 2:
        raise ValueError("depth must be >= 2")
    layers = [ConvLayer(channels, width, kernel, bias=bias)]
    layers += [ConvLayer(width, width, kernel, bias=bias) for _ in range(depth - 2)]
    layers.append(ConvLayer(width, channels, kernel, bias=bias))
    return layers


def _conv_params(c_in, c_out, k, groups=1, bias=True) -> int:
    return c_out * (c_in // groups) * k * k + (c_out if bias else 0)


def layer_params(layer) -> int:
    """Weight plus bias element count of one derived layer."""
    kind, k, ci, co = layer.op.kind, layer.op.kernel, layer.c_in, layer.c_out
    if kind == "skip":
        return 0
    if kind in ("conv", "dilated_conv", "strided_conv"):
        return _conv_params(ci, co, k)
    if kind == "separable_conv":
        return _conv_params(ci, ci, k, groups=ci) + _conv_params(ci, co, 1)
    if kind == "residual_block":
        return _conv_params(ci, co, k) + _conv_params(co, co, k)
    if kind == "deconv":
        return ci * co * k * k + co
    return _conv_params(ci, co, 1)  # interpolation + 1x1 conv


def layer_macs(layer, h: int, w: int, up: bool = False) -> int:
    """Multiply-accumulates of one layer whose input is ``h`` x ``w``.

    Convolutions count ``C_out * C_in/groups * k^2`` per output position;
    transposed convs are counted at their output resolution; resampling is
    free apart from its trailing 1x1 conv.  ``up`` marks a decoder sampler.
    """
    kind, k, ci, co = layer.op.kind, layer.op.kernel, layer.c_in, layer.c_out
    if kind == "skip":
        return 0
    if kind in ("conv", "dilated_conv"):
        return co * ci * k * k * h * w
    if kind == "strided_conv":
        return co * ci * k * k * (-(-h // 2)) * (-(-w // 2))
    if kind == "separable_conv":
        return ci * k * k * h * w + ci * co * h * w
    if kind == "residual_block":
        return (co * ci + co * co) * k * k * h * w
    if kind == "deconv":
        return co * ci * k * k * (2 * h) * (2 * w)
    oh, ow = (2 * h, 2 * w) if up else (h // 2, w // 2)
    return ci * co * oh * ow


def count_params(obj) -> int:
    """Trainable element count of an architecture, network, store, or conv list.

    For architectures this includes one relaxation scalar per stage.
    """
    from .derivation import DerivedArch

    if isinstance(obj, DerivedArch):
        return sum(layer_params(layer) for st in obj.stages for _, layer in st.layers()) + len(obj.stages)
    if isinstance(obj, ParamStore):
        return obj.numel()
    if hasattr(obj, "params") and isinstance(obj.params, ParamStore):
        return obj.params.numel()
    if hasattr(obj, "state"):
        return obj.state.weights.numel() + obj.state.arch.numel()
    layers = list(obj)
    return sum(_conv_params(l.c_in, l.c_out, l.kernel, l.groups, l.bias) for l in layers)


def count_macs(obj, h_ref: int, w_ref: int) -> int:
    """Multiply-accumulates for one forward pass at ``h_ref`` x ``w_ref``, summed over stages."""
    from .derivation import DerivedArch

    if h_ref % 8 or w_ref % 8:
        raise ValueError(f"reference size {h_ref}x{w_ref} must be divisible by 8")
    if isinstance(obj, DerivedArch):
        total = 0
        for st in obj.stages:
            for blk, layer in st.layers():
                scale = obj.input_size // layer.resolution
                total += layer_macs(layer, h_ref // scale, w_ref // scale, up=blk.kind == "decoder")
        return total
    total = 0
    h, w = h_ref, w_ref
    for l in obj:
        h, w = -(-h // l.stride), -(-w // l.stride)
        total += l.c_out * (l.c_in // l.groups) * l.kernel * l.kernel * h * w
    return total


def report(clean, restored, obj=None, cfg: MetricsConfig | None = None) -> MetricsReport:
    cfg = cfg or MetricsConfig()
    params = count_params(obj) if obj is not None else 0
    macs = count_macs(obj, cfg.ref_height, cfg.ref_width) if obj is not None else 0
    return MetricsReport(psnr(clean, restored, cfg), ssim(clean, restored, cfg), params, macs)
