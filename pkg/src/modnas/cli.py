"""Command-line entry point: ``modnas {search,derive,train,eval,count} --config run.json``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .derivation import (
    ArchitectureError,
    WidthDerivationConfig,
    derive_architecture,
    export_arch,
    fixture_path,
    import_arch,
    instantiate_derived,
)
from .engine import (
    SearchConfig,
    TrainConfig,
    checkpoint_load,
    evaluate,
    load_weights,
    run_search,
    save_weights,
    train_log_csv,
    train_network,
)
from .io import bundled_manifest, load_manifest
from .metrics import MetricsConfig, count_macs, count_params
from .optim import CheckpointError

MODES = ("search", "derive", "train", "eval", "count")


@dataclass
class RunConfig:
    """Everything a CLI invocation needs; relative paths resolve against ``base_dir``."""

    mode: str | None = None
    dataset: str | None = None
    holdout: int = 4
    out: str = "modnas-run"
    arch: str | None = None
    checkpoint: str | None = None
    weights: str | None = None
    input_size: int = 128
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    width: WidthDerivationConfig = field(default_factory=WidthDerivationConfig)
    base_dir: str = "."

    def __post_init__(self):
        if self.mode is not None and self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.holdout < 0:
            raise ValueError("holdout must be non-negative")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "dataset": self.dataset, "holdout": self.holdout, "out": self.out,
            "arch": self.arch, "checkpoint": self.checkpoint, "weights": self.weights,
            "input_size": self.input_size, "search": self.search.to_dict(), "train": self.train.to_dict(),
            "metrics": self.metrics.to_dict(),
            "width": {"coverage": self.width.coverage, "n": self.width.n},
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> RunConfig:
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        d["search"] = SearchConfig.from_dict(d.get("search", {}))
        d["train"] = TrainConfig(**d.get("train", {}))
        d["metrics"] = MetricsConfig(**d.get("metrics", {}))
        d["width"] = WidthDerivationConfig(**d.get("width", {}))
        return cls(**d, base_dir=base_dir)

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValueError(f"config {path} must be a JSON object")
        return cls.from_dict(doc, str(path.parent))

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    def out_dir(self) -> Path:
        return Path(self.out)

    def images(self):
        manifest = self.resolve(self.dataset) if self.dataset else bundled_manifest()
        imgs = load_manifest(manifest)
        if self.holdout >= len(imgs):
            raise ValueError(f"holdout {self.holdout} leaves no training images out of {len(imgs)}")
        cut = len(imgs) - self.holdout
        return imgs[:cut], (imgs[cut:] if self.holdout else imgs)

    def arch_path(self) -> Path:
        if self.arch is None:
            return self.out_dir() / "arch.json"
        for cand in (Path(self.arch), self.resolve(self.arch)):
            if cand.exists():
                return cand
        bundled = fixture_path(self.arch)
        return bundled if bundled.exists() else Path(self.arch)


def _with_overrides(cfg: RunConfig, args) -> RunConfig:
    doc = cfg.to_dict()
    if args.seed is not None:
        doc["search"]["seed"] = doc["train"]["seed"] = args.seed
    if args.epochs is not None:
        doc["search"]["epochs"] = args.epochs
        for key in ("opt_w", "opt_a"):
            doc["search"][key]["total_epochs"] = args.epochs
    if args.stages is not None:
        doc["search"]["stages"] = args.stages
    if args.sigma is not None:
        doc["search"]["sigma_8bit"] = doc["train"]["sigma_8bit"] = args.sigma
    for key in ("out", "arch", "checkpoint", "weights"):
        if getattr(args, key) is not None:
            doc[key] = getattr(args, key)
    doc["mode"] = args.mode
    return RunConfig.from_dict(doc, cfg.base_dir)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modnas", description="Architecture search for unfolded U-net denoisers.")
    sub = p.add_subparsers(dest="mode", required=True, metavar="{" + ",".join(MODES) + "}")
    helps = {
        "search": "run the alternating search, write search.ckpt and search_log.csv",
        "derive": "extract arch.json from a search checkpoint",
        "train": "train a derived architecture, write weights.ckpt and train_log.csv",
        "eval": "evaluate trained weights on held-out images, write eval.json",
        "count": "print parameter and multiply-accumulate counts of an architecture",
    }
    for mode in MODES:
        sp = sub.add_parser(mode, help=helps[mode])
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--stages", type=int)
        sp.add_argument("--sigma", type=float)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--arch", help="architecture JSON (file path or bundled fixture name)")
        sp.add_argument("--checkpoint", help="search checkpoint for derive")
        sp.add_argument("--weights", help="trained weights for eval")
    return p


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _run(cfg: RunConfig, out=None) -> None:
    out = out or sys.stdout
    mode, od = cfg.mode, cfg.out_dir()
    if mode in ("search", "derive", "train", "eval"):
        od.mkdir(parents=True, exist_ok=True)
    if mode == "search":
        train_imgs, _ = cfg.images()
        _, log = run_search(train_imgs, cfg.search, out_dir=od)
        last = log.records[-1]
        print(f"searched {len(log)} epochs; noisy {log.noisy_psnr:.2f} dB -> supernet {last.val_psnr:.2f} dB; "
              f"wrote {od / 'search.ckpt'}", file=out)
    elif mode == "derive":
        ckpt = cfg.resolve(cfg.checkpoint) if cfg.checkpoint else od / "search.ckpt"
        arch = derive_architecture(checkpoint_load(ckpt), cfg.width, cfg.input_size)
        export_arch(arch, od / "arch.json")
        print(f"derived {count_params(arch)} parameters over {arch.T} stages; wrote {od / 'arch.json'}", file=out)
    elif mode == "train":
        arch = import_arch(cfg.arch_path())
        train_imgs, _ = cfg.images()
        net = instantiate_derived(arch, cfg.train.seed)
        rows = train_network(net, train_imgs, cfg.train)
        save_weights(net, od / "weights.ckpt", {"arch": arch.to_dict()})
        train_log_csv(rows, od / "train_log.csv")
        print(f"trained {len(rows)} steps, final loss {rows[-1][2]:.6f}; wrote {od / 'weights.ckpt'}", file=out)
    elif mode == "eval":
        arch = import_arch(cfg.arch_path())
        net = instantiate_derived(arch, cfg.train.seed)
        load_weights(net, cfg.resolve(cfg.weights) if cfg.weights else od / "weights.ckpt")
        _, test_imgs = cfg.images()
        rep = evaluate(net, test_imgs, cfg.train.sigma_8bit, cfg.train.seed, cfg.metrics, arch)
        _dump(od / "eval.json", rep)
        a = rep["average"]
        print(f"eval on {len(test_imgs)} images: noisy {a['noisy_psnr_db']:.2f} dB -> {a['psnr_db']:.2f} dB, "
              f"SSIM {a['ssim']:.4f}", file=out)
    elif mode == "count":
        arch = import_arch(cfg.arch_path())
        h, w = cfg.metrics.ref_height, cfg.metrics.ref_width
        print(f"stages: {arch.T}", file=out)
        print(f"params: {count_params(arch)}", file=out)
        print(f"macs: {count_macs(arch, h, w)} (at {h}x{w})", file=out)


def cli_main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        base = RunConfig.load(args.config) if args.config else RunConfig()
        cfg = _with_overrides(base, args)
        _run(cfg)
    except (ValueError, KeyError, OSError, ArchitectureError, CheckpointError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"modnas: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:  # console-script shim
    sys.exit(cli_main())
