"""Discrete architecture extraction, the architecture file schema, and derived networks.

Derivation runs in three passes per block: dense paths (gamma) first, then
the operation of every live layer (alpha), then its width (beta of the
selected candidate).  The result is a :class:`DerivedArch`, a flat,
table-like description that can be exported to JSON, re-imported, costed,
and instantiated as a trainable network.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamStore
from .search_space import (
    CandidateSet,
    Conv,
    OpSpec,
    ParamFactory,
    SupernetState,
    instantiate_candidate,
)

FORMAT = "modnas-arch/1"
ROLES = ("stem", "normal", "sampler", "fusion", "head")
BLOCK_KINDS = ("stem", "encoder", "decoder", "head")

_NL_KINDS = {"conv", "separable_conv", "dilated_conv", "residual_block", "skip"}
_DSL_KINDS = {"strided_conv", "interp_nearest", "interp_bilinear", "interp_area"}
_USL_KINDS = {"deconv", "interp_nearest", "interp_bilinear", "interp_area", "pixel_repeat"}


class ArchitectureError(ValueError):
    """An architecture description that is malformed or shape-inconsistent."""


class DegenerateWidthWarning(UserWarning):
    pass


@dataclass(frozen=True)
class WidthDerivationConfig:
    coverage: float = 0.90
    n: int = 3

    def __post_init__(self):
        if not 0 < self.coverage <= 1:
            raise ValueError("coverage must lie in (0, 1]")
        if self.n < 0:
            raise ValueError("n must be non-negative")

    @property
    def quantum(self) -> int:
        return 2 ** self.n


class WidthChoice(NamedTuple):
    width: int
    kept: list[int]


class DepthChoice(NamedTuple):
    input_paths: list[int]  # entry l-1 is the chosen source feature of layer l
    live: list[int]         # 1-based layers whose own operation is on the chain

    @property
    def degenerate(self) -> bool:
        return not self.live


def derive_operation(alpha, candidates: Sequence[OpSpec] | CandidateSet) -> OpSpec:
    """The candidate with the largest logit; ties go to the lowest index."""
    if isinstance(candidates, CandidateSet):
        candidates = candidates.candidates
    a = np.asarray(getattr(alpha, "data", alpha), dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("alpha is empty")
    if a.size != len(candidates):
        raise ValueError(f"{a.size} logits for {len(candidates)} candidates")
    return candidates[int(np.argmax(a))]


def derive_width(beta, cfg: WidthDerivationConfig | None = None) -> WidthChoice:
    """Smallest multiple of ``2**n`` whose top-|beta| channels reach the coverage share.

    An all-zero ``beta`` has no meaningful ranking; it yields the minimum
    width ``2**n`` (channels ``0..2**n-1``) and emits
    :class:`DegenerateWidthWarning`.
    """
    cfg = cfg or WidthDerivationConfig()
    q = cfg.quantum
    mag = np.abs(np.asarray(getattr(beta, "data", beta), dtype=np.float64).ravel())
    c = mag.size
    if c < q or c % q:
        raise ValueError(f"width {c} must be a positive multiple of {q}")
    order = np.argsort(-mag, kind="stable")
    total = float(mag.sum())
    if total == 0.0:
        warnings.warn("all width parameters are zero; keeping the minimum width", DegenerateWidthWarning,
                      stacklevel=2)
        return WidthChoice(q, list(range(q)))
    cum = np.cumsum(mag[order])
    width = c
    for m in range(q, c + 1, q):
        if cum[m - 1] >= cfg.coverage * total:
            width = m
            break
    return WidthChoice(width, sorted(int(i) for i in order[:width]))


def derive_depth(gammas: Sequence, n_layers: int | None = None, required: Sequence[int] | None = None) -> DepthChoice:
    """Pick one input path per layer and find which layers' operations survive.

    ``gammas[l-1]`` has ``l+1`` logits: sources ``L^0..L^{l-1}`` then the self
    path.  The self path wins ties, then the lowest index.  A layer is live
    when its own output is reachable backwards from the ``required``
    features (by default only the last one).
    """
    n = len(gammas) if n_layers is None else n_layers
    if len(gammas) != n:
        raise ValueError(f"{len(gammas)} gamma vectors for {n} layers")
    paths = []
    for ell, g in enumerate(gammas, start=1):
        g = np.asarray(getattr(g, "data", g), dtype=np.float64).ravel()
        if g.size != ell + 1:
            raise ValueError(f"gamma of layer {ell} must have {ell + 1} entries, got {g.size}")
        paths.append(ell if g[ell] == g.max() else int(np.argmax(g)))
    return DepthChoice(paths, _live_layers(paths, required if required is not None else [n]))


def _live_layers(paths: Sequence[int], required: Sequence[int]) -> list[int]:
    live, seen, stack = set(), set(), [r for r in required if r > 0]
    while stack:
        f = stack.pop()
        if f == 0 or f in seen:
            continue
        seen.add(f)
        if paths[f - 1] == f:
            live.add(f)
            stack.append(f - 1)
        else:
            stack.append(paths[f - 1])
    return sorted(live)


# ---------------------------------------------------------------------------
# architecture description


def _expected_stride(role: str, kind: str) -> int | None:
    if kind in ("strided_conv", "deconv"):
        return 2
    if kind == "skip" or kind.startswith("interp") or kind == "pixel_repeat":
        return None
    return 1


@dataclass
class DerivedLayer:
    role: str
    op: OpSpec
    c_in: int
    c_out: int
    resolution: int
    input_path: int | None = None
    kept_channels: list[int] | None = None
    skip_source: tuple[str, int] | None = None
    skip_channels: int | None = None

    @property
    def stride(self) -> int | None:
        return _expected_stride(self.role, self.op.kind)

    def to_dict(self) -> dict:
        d = {"role": self.role, "resolution": self.resolution, "op_kind": self.op.kind,
             "kernel": self.op.kernel, "dilation": self.op.dilation, "c_in": self.c_in,
             "c_out": self.c_out, "stride": self.stride, "input_path": self.input_path}
        if self.kept_channels is not None:
            d["kept_channels"] = list(self.kept_channels)
        if self.skip_source is not None:
            d["skip_source"] = {"block": self.skip_source[0], "feature": self.skip_source[1]}
            d["skip_channels"] = self.skip_channels
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DerivedLayer:
        try:
            op = OpSpec(d["op_kind"], int(d.get("kernel", 1)), int(d.get("dilation", 1)))
            src = d.get("skip_source")
            layer = cls(
                role=d["role"], op=op, c_in=int(d["c_in"]), c_out=int(d["c_out"]),
                resolution=int(d["resolution"]), input_path=d.get("input_path"),
                kept_channels=[int(i) for i in d["kept_channels"]] if d.get("kept_channels") is not None else None,
                skip_source=(str(src["block"]), int(src["feature"])) if src is not None else None,
                skip_channels=int(d["skip_channels"]) if src is not None else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchitectureError(f"bad layer record {d!r}: {exc}") from exc
        if "stride" in d and d["stride"] != layer.stride:
            raise ArchitectureError(f"{op.kind} layer must have stride {layer.stride}, file says {d['stride']}")
        return layer


@dataclass
class DerivedBlock:
    name: str
    kind: str
    layers: list[DerivedLayer]

    @property
    def fusion(self) -> DerivedLayer | None:
        return next((l for l in self.layers if l.role == "fusion"), None)

    @property
    def normal(self) -> list[DerivedLayer]:
        return [l for l in self.layers if l.role == "normal"]

    @property
    def sampler(self) -> DerivedLayer | None:
        return next((l for l in self.layers if l.role == "sampler"), None)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> DerivedBlock:
        try:
            return cls(str(d["name"]), str(d["kind"]), [DerivedLayer.from_dict(l) for l in d["layers"]])
        except (KeyError, TypeError) as exc:
            raise ArchitectureError(f"bad block record: {exc}") from exc


@dataclass
class DerivedStage:
    delta: float
    blocks: list[DerivedBlock]

    def layers(self) -> Iterator[tuple[DerivedBlock, DerivedLayer]]:
        for b in self.blocks:
            for l in b.layers:
                yield b, l

    def block(self, name: str) -> DerivedBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)


@dataclass
class DerivedArch:
    input_size: int
    stages: list[DerivedStage]
    name: str = ""
    notes: list[str] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.stages)

    def to_dict(self) -> dict:
        return {"format": FORMAT, "name": self.name, "input_size": self.input_size,
                "notes": list(self.notes),
                "stages": [{"delta": float(s.delta), "blocks": [b.to_dict() for b in s.blocks]}
                           for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> DerivedArch:
        if not isinstance(d, dict) or d.get("format") != FORMAT:
            raise ArchitectureError(f"not a {FORMAT} document")
        try:
            stages = [DerivedStage(float(s["delta"]), [DerivedBlock.from_dict(b) for b in s["blocks"]])
                      for s in d["stages"]]
            arch = cls(int(d["input_size"]), stages, str(d.get("name", "")), [str(n) for n in d.get("notes", [])])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ArchitectureError):
                raise
            raise ArchitectureError(f"bad architecture document: {exc}") from exc
        arch.validate()
        return arch

    def validate(self) -> None:
        """Check block order, dense paths, resolutions and channel flow end to end."""
        if not self.stages:
            raise ArchitectureError("architecture has no stages")
        for t, st in enumerate(self.stages):
            if not 0.0 < st.delta < 1.0:
                raise ArchitectureError(f"stage {t}: delta {st.delta} outside (0, 1)")
            _validate_stage(st, self.input_size, f"stage {t}")


def _fail(where: str, msg: str):
    raise ArchitectureError(f"{where}: {msg}")


def _validate_stage(st: DerivedStage, input_size: int, where: str) -> None:
    kinds = [b.kind for b in st.blocks]
    n_enc = kinds.count("encoder")
    expect = ["stem"] + ["encoder"] * n_enc + ["decoder"] * (n_enc + 1) + ["head"]
    if kinds != expect or n_enc < 1:
        _fail(where, f"block kinds {kinds} do not form stem, encoders, decoders (+1), head")
    if input_size % (2 ** n_enc):
        _fail(where, f"input size {input_size} not divisible by {2 ** n_enc}")
    for b in st.blocks:
        for l in b.layers:
            if l.role not in ROLES:
                _fail(f"{where}/{b.name}", f"unknown role {l.role!r}")
            if l.c_in < 1 or l.c_out < 1:
                _fail(f"{where}/{b.name}", "channel counts must be positive")
            if l.kept_channels is not None:
                kc = l.kept_channels
                if len(kc) != l.c_out or kc != sorted(set(kc)) or (kc and kc[0] < 0):
                    _fail(f"{where}/{b.name}", "kept_channels must be c_out sorted distinct indices")

    stem = st.blocks[0]
    if [l.role for l in stem.layers] != ["stem", "stem"]:
        _fail(where, "stem must hold exactly two stem layers")
    if stem.layers[0].c_in != 1:
        _fail(where, "stem must take a single-channel input")
    width, res = 1, input_size
    for l in stem.layers:
        _check_plain_conv(l, width, res, f"{where}/stem")
        width = l.c_out

    enc_feats: dict[str, tuple[int, list[int]]] = {}
    enc = st.blocks[1 : 1 + n_enc]
    dec = st.blocks[1 + n_enc : 1 + 2 * n_enc + 1]
    for i, b in enumerate(enc):
        w = f"{where}/{b.name}"
        roles = [l.role for l in b.layers]
        if roles != ["normal"] * (len(roles) - 1) + ["sampler"]:
            _fail(w, f"encoder layers must be normal layers then one sampler, got {roles}")
        feats = _check_normals(b.normal, width, res, w)
        enc_feats[b.name] = (res, feats)
        width, res = _check_sampler(b.sampler, feats[-1], res, _DSL_KINDS, w, down=True)
    for i, b in enumerate(dec):
        w = f"{where}/{b.name}"
        roles = [l.role for l in b.layers]
        want = (["fusion"] if i > 0 else []) + ["normal"] * (len(roles) - (i > 0) - (i < n_enc))
        want += ["sampler"] if i < n_enc else []
        if roles != want:
            _fail(w, f"expected layer roles {want}, got {roles}")
        if i > 0:
            f = b.fusion
            if f.skip_source is None or f.skip_channels is None or f.skip_channels < 1:
                _fail(w, "fusion layer needs skip_source and skip_channels")
            src_name, idx = f.skip_source
            if src_name not in enc_feats:
                _fail(w, f"skip source {src_name!r} is not an encoder block")
            src_res, src_feats = enc_feats[src_name]
            if src_res != res:
                _fail(w, f"skip source {src_name} runs at {src_res}, fusion at {res}")
            if not 0 <= idx < len(src_feats):
                _fail(w, f"skip source feature {idx} out of range")
            _check_plain_conv(f, width + f.skip_channels, res, w)
            width = f.c_out
        feats = _check_normals(b.normal, width, res, w)
        width = feats[-1]
        if i < n_enc:
            width, res = _check_sampler(b.sampler, width, res, _USL_KINDS, w, down=False)
    if res != input_size:
        _fail(where, f"decoder path ends at {res}, expected {input_size}")
    head = st.blocks[-1]
    if len(head.layers) != 1 or head.layers[0].role != "head":
        _fail(where, "head block must hold exactly one head layer")
    h = head.layers[0]
    _check_plain_conv(h, width, res, f"{where}/head")
    if h.c_out != 1:
        _fail(where, "head must produce one channel")


def _check_plain_conv(l: DerivedLayer, c_in: int, res: int, where: str) -> None:
    if l.op.kind != "conv":
        _fail(where, f"{l.role} layer must be a conv, got {l.op.kind}")
    if l.c_in != c_in:
        _fail(where, f"{l.role} conv expects {l.c_in} input channels but receives {c_in}")
    if l.resolution != res:
        _fail(where, f"{l.role} conv at resolution {l.resolution}, expected {res}")


def _check_normals(layers: list[DerivedLayer], width: int, res: int, where: str) -> list[int]:
    feats = [width]
    for ell, l in enumerate(layers, start=1):
        p = l.input_path
        if not isinstance(p, int) or not 0 <= p <= ell:
            _fail(where, f"layer {ell}: input_path {p!r} must be in [0, {ell}]")
        if l.op.kind not in _NL_KINDS:
            _fail(where, f"layer {ell}: {l.op.kind} is not a normal-layer operation")
        if l.resolution != res:
            _fail(where, f"layer {ell}: resolution {l.resolution}, expected {res}")
        src = feats[ell - 1] if p == ell else feats[p]
        if p != ell and l.op.kind != "skip":
            _fail(where, f"layer {ell}: a bypassed layer must be recorded as skip")
        if l.c_in != src:
            _fail(where, f"layer {ell}: c_in {l.c_in} but its input has {src} channels")
        if l.op.kind == "skip" and l.c_out != l.c_in:
            _fail(where, f"layer {ell}: skip must keep the width")
        feats.append(l.c_out)
    return feats


def _check_sampler(l: DerivedLayer, width: int, res: int, allowed: set, where: str, down: bool):
    if l.op.kind not in allowed:
        _fail(where, f"{l.op.kind} cannot {'down' if down else 'up'}sample")
    if l.c_in != width:
        _fail(where, f"sampler c_in {l.c_in} but receives {width} channels")
    if l.resolution != res:
        _fail(where, f"sampler at resolution {l.resolution}, expected {res}")
    if down and res % 2:
        _fail(where, f"cannot halve odd resolution {res}")
    return l.c_out, (res // 2 if down else res * 2)


def export_arch(arch: DerivedArch, path=None) -> str:
    """Serialize to the architecture JSON text; optionally write it to ``path``."""
    arch.validate()
    text = json.dumps(arch.to_dict(), indent=2) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def import_arch(source) -> DerivedArch:
    """Parse an architecture from a path, a JSON string, or an already-decoded dict."""
    if isinstance(source, dict):
        return DerivedArch.from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchitectureError(f"architecture file is not valid JSON: {exc}") from exc
    return DerivedArch.from_dict(doc)


def fixture_path(name: str) -> Path:
    """Location of a bundled architecture (``modnas_b`` or ``modnas_ar``)."""
    stem = name[:-5] if name.endswith(".json") else name
    return Path(str(resources.files("modnas") / "data" / f"{stem}.json"))


def load_fixture(name: str) -> DerivedArch:
    return import_arch(fixture_path(name))


def replicate_stages(arch: DerivedArch, stages: int) -> DerivedArch:
    """Repeat the first stage ``stages`` times (same topology, independent weights)."""
    if stages < 1:
        raise ValueError("stages must be >= 1")
    doc = arch.to_dict()
    doc["stages"] = [doc["stages"][0]] * stages
    return DerivedArch.from_dict(json.loads(json.dumps(doc)))


# ---------------------------------------------------------------------------
# derivation from a trained supernet


def _arch_array(state: SupernetState, name: str) -> np.ndarray:
    if name not in state.arch:
        raise KeyError(f"architecture parameter {name!r} missing from state")
    return np.asarray(state.arch[name].data, dtype=np.float64)


def _round_up(x: int, q: int) -> int:
    return max(q, -(-x // q) * q)


def derive_architecture(state: SupernetState, cfg: WidthDerivationConfig | None = None,
                        input_size: int = 128, name: str = "derived") -> DerivedArch:
    """Turn trained architecture parameters into one validated discrete network.

    All stages share the searched topology; only their relaxation values
    differ.  Fusion convs, which carry no width parameters, get half their
    concatenated input width rounded up to a multiple of ``2**n``.
    """
    cfg = cfg or WidthDerivationConfig()
    spec = state.config.unet
    c, q, levels = spec.init_channels, cfg.quantum, spec.levels
    if c < q or c % q:
        raise ValueError(f"initial width {c} must be a multiple of {q}")
    if input_size % spec.divisor:
        raise ValueError(f"input size {input_size} must be divisible by {spec.divisor}")
    notes: list[str] = []

    def mixed(prefix: str, cands: CandidateSet, c_in: int, role: str, res: int) -> DerivedLayer:
        op = derive_operation(_arch_array(state, f"{prefix}.alpha"), cands)
        if op.kind == "skip":
            return DerivedLayer(role, op, c_in, c_in, res, kept_channels=None)
        idx = cands.candidates.index(op)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateWidthWarning)
            wc = derive_width(_arch_array(state, f"{prefix}.beta.{idx}"), cfg)
        if caught:
            notes.append(f"{prefix}: all width parameters zero, kept minimum width")
        return DerivedLayer(role, op, c_in, wc.width, res, kept_channels=wc.kept)

    def block(bname: str, kind: str, width: int, res: int, fusion: DerivedLayer | None,
              sampler: CandidateSet | None):
        layers = [fusion] if fusion else []
        if fusion:
            width = fusion.c_out
        n = spec.layers_per_block
        if spec.dense:
            gammas = [_arch_array(state, f"{bname}.l{ell}.gamma") for ell in range(1, n + 1)]
            depth = derive_depth(gammas, n, required=[n, 1] if kind == "encoder" else [n])
        else:
            depth = DepthChoice(list(range(1, n + 1)), list(range(1, n + 1)))
        if depth.degenerate:
            notes.append(f"{bname}: every layer bypassed, block reduces to its input")
        feats = [width]
        for ell in range(1, n + 1):
            p = depth.input_paths[ell - 1]
            if p == ell and ell in depth.live:
                layer = mixed(f"{bname}.l{ell}", spec.nl, feats[-1], "normal", res)
            else:
                src = feats[p] if p != ell else feats[-1]
                layer = DerivedLayer("normal", OpSpec("skip", 1), src, src, res)
            layer.input_path = p
            layers.append(layer)
            feats.append(layer.c_out)
        out = feats[-1]
        if sampler is not None:
            s = mixed(f"{bname}.s", sampler, out, "sampler", res)
            layers.append(s)
            out = s.c_out
        return DerivedBlock(bname, kind, layers), feats, out

    blocks = [DerivedBlock("stem", "stem", [
        DerivedLayer("stem", OpSpec("conv", 3), 1, c, input_size),
        DerivedLayer("stem", OpSpec("conv", 3), c, c, input_size),
    ])]
    width, res = c, input_size
    skips = []
    for i in range(levels):
        bname = f"eb{i + 1}"
        blk, feats, width = block(bname, "encoder", width, res, None, spec.dsl)
        skips.append((bname, feats[1]))
        blocks.append(blk)
        res //= 2
    for i in range(levels + 1):
        fusion = None
        if i > 0:
            src, sw = skips[-i]
            fusion = DerivedLayer("fusion", OpSpec("conv", 3), width + sw, _round_up((width + sw) // 2, q),
                                  res, skip_source=(src, 1), skip_channels=sw)
        blk, feats, width = block(f"db{i + 1}", "decoder", width, res, fusion,
                                  spec.usl if i < levels else None)
        blocks.append(blk)
        if i < levels:
            res *= 2
    blocks.append(DerivedBlock("head", "head", [DerivedLayer("head", OpSpec("conv", 1), width, 1, res)]))

    n_stages = state.config.stages
    deltas = [float(1.0 / (1.0 + math.exp(-float(_arch_array(state, f"delta.{t}")[0]))))
              for t in range(n_stages)]
    stages = [DerivedStage(d, blocks if t == 0 else [DerivedBlock.from_dict(b.to_dict()) for b in blocks])
              for t, d in enumerate(deltas)]
    arch = DerivedArch(input_size, stages, name, notes)
    try:
        arch.validate()
    except ArchitectureError as exc:  # pragma: no cover - guarded by construction
        raise AssertionError(f"derivation produced an inconsistent network: {exc}") from exc
    return arch


# ---------------------------------------------------------------------------
# trainable derived network


class _DerivedUNet:
    def __init__(self, stage: DerivedStage, pf: ParamFactory):
        self.stage = stage
        self.mods: dict[tuple[str, int], object] = {}
        for b in stage.blocks:
            bpf = pf.child(b.name)
            for j, l in enumerate(b.layers):
                lpf = bpf.child(f"{j}")
                if l.role in ("stem", "fusion", "head"):
                    pre = l.role == "head" or (l.role == "stem" and l.c_in != 1)
                    mod = Conv(lpf, l.c_in, l.c_out, l.op.kernel, pre_relu=pre, name=l.role)
                elif l.role == "normal":
                    mod = instantiate_candidate(l.op, l.c_in, l.c_out, "NL", lpf)
                else:
                    mod = instantiate_candidate(l.op, l.c_in, l.c_out, "DSL" if b.kind == "encoder" else "USL", lpf)
                self.mods[(b.name, j)] = mod

    def __call__(self, x: Tensor, trace: list | None = None) -> Tensor:
        enc: dict[str, list[Tensor]] = {}
        for b in self.stage.blocks:
            feats: list[Tensor] = []
            for j, l in enumerate(b.layers):
                mod = self.mods[(b.name, j)]
                if l.role == "fusion":
                    src, idx = l.skip_source
                    skip = ad.adjust_channels(enc[src][idx], l.skip_channels)
                    x = ad.concat([x, skip])
                elif l.role == "normal":
                    if not feats:
                        feats.append(x)
                    ell = len(feats)
                    if l.input_path != ell:
                        if trace is not None:
                            trace.append((b.name, j, l, feats[l.input_path].shape))
                        feats.append(feats[l.input_path])
                        x = feats[-1]
                        continue
                    x = feats[-1]
                if trace is not None:
                    trace.append((b.name, j, l, x.shape))
                x = mod(x)
                if l.role == "normal":
                    feats.append(x)
            if b.kind == "encoder":
                enc[b.name] = feats
        return x


class DerivedNet:
    """Trainable realization of a :class:`DerivedArch` with per-stage relaxation logits."""

    def __init__(self, arch: DerivedArch, seed: int = 0):
        arch.validate()
        self.arch = arch
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        self.stages = [_DerivedUNet(st, ParamFactory(self.params, rng, f"s{t}.")) for t, st in enumerate(arch.stages)]
        self.delta_logits = [
            self.params.add(f"delta.{t}", np.array([math.log(st.delta / (1 - st.delta))], dtype=np.float32))
            for t, st in enumerate(arch.stages)
        ]

    def deltas(self) -> list[Tensor]:
        return [ad.sigmoid(d) for d in self.delta_logits]

    def __call__(self, y: Tensor, trace: list | None = None) -> Tensor:
        n, c, h, w = y.shape
        div = 2 ** sum(b.kind == "encoder" for b in self.arch.stages[0].blocks)
        if c != 1:
            raise ValueError(f"expected a single-channel input, got {c} channels")
        if h % div or w % div:
            raise ValueError(f"spatial size {h}x{w} must be divisible by {div}")
        x = y
        for net, d in zip(self.stages, self.deltas()):
            x = ad.blend(y, net(x, trace), d)
        return x

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in arrays:
                raise KeyError(f"weights file is missing {name!r}")
            if arrays[name].shape != t.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arrays[name].shape} vs {t.shape}")
            t.data[...] = arrays[name]


def instantiate_derived(arch: DerivedArch, seed: int = 0) -> DerivedNet:
    return DerivedNet(arch, seed)
