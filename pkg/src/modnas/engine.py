"""Alternating weight/architecture search, checkpoints, and plain training/evaluation loops."""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .io import ImageU8, noisy_pairs, sample_patches
from .metrics import MetricsConfig, MetricsReport, count_macs, count_params, psnr, ssim
from .optim import (
    OptimizerConfig,
    ParamStore,
    adam_update,
    cosine_lr,
    read_container,
    write_container,
)
from .search_space import Supernet, SupernetConfig, SupernetState, UNetSpec

_VAL_STREAM = 2 ** 32 - 1  # seed-sequence key reserved for frozen validation noise


def _opt_from(d) -> OptimizerConfig | None:
    if d is None or isinstance(d, OptimizerConfig):
        return d
    return OptimizerConfig(**d)


@dataclass
class SearchConfig:
    epochs: int = 140
    warmup_epochs: int = 40
    batch: int = 12
    patch: int = 64
    sigma_8bit: float = 25.0
    stages: int = 2
    channels: int = 48
    seed: int = 0
    opt_w: OptimizerConfig | None = None
    opt_a: OptimizerConfig | None = None
    learn_arch: bool = True
    checkpoint_every: int = 0
    n_val: int = 0
    dense: bool = True
    unfold: bool = True
    share_stages: bool = False

    def __post_init__(self):
        self.opt_w = _opt_from(self.opt_w) or OptimizerConfig(total_epochs=self.epochs)
        self.opt_a = _opt_from(self.opt_a) or OptimizerConfig(total_epochs=self.epochs)
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} must lie in [0, epochs)")
        if self.patch < 8 or self.patch % 8:
            raise ValueError(f"patch {self.patch} must be a positive multiple of 8")
        if self.batch < 1 or self.stages < 1 or self.channels < 1 or self.sigma_8bit <= 0:
            raise ValueError("batch, stages, channels and sigma must be positive")
        if self.checkpoint_every < 0 or self.n_val < 0:
            raise ValueError("checkpoint_every and n_val must be non-negative")
        for o in (self.opt_w, self.opt_a):
            if o.total_epochs != self.epochs:
                raise ValueError("optimizer schedules must span exactly `epochs` epochs")

    def supernet_config(self) -> SupernetConfig:
        return SupernetConfig(self.stages, UNetSpec(init_channels=self.channels, dense=self.dense),
                              self.share_stages, self.unfold)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SearchConfig:
        d = dict(d)
        epochs = d.get("epochs", cls.epochs)
        for key in ("opt_w", "opt_a"):
            if isinstance(d.get(key), dict):
                d[key] = OptimizerConfig(**{"total_epochs": epochs, **d[key]})
        return cls(**d)


@dataclass
class DatasetSplit:
    train_w: list[ImageU8]
    train_a: list[ImageU8]
    val: list[ImageU8]


def split_dataset(images: Sequence[ImageU8], seed: int, n_val: int = 0) -> DatasetSplit:
    """Shuffle once, optionally hold out ``n_val`` images, halve the rest.

    Without a held-out part the architecture half doubles as the validation set.
    """
    n = len(images)
    if n - n_val < 2:
        raise ValueError(f"need at least 2 images to split, got {n - n_val}")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx, rest = sorted(perm[:n_val]), perm[n_val:]
    half = (len(rest) + 1) // 2
    w_idx, a_idx = sorted(rest[:half]), sorted(rest[half:])
    train_w = [images[i] for i in w_idx]
    train_a = [images[i] for i in a_idx]
    val = [images[i] for i in val_idx] if n_val else list(train_a)
    return DatasetSplit(train_w, train_a, val)


@dataclass
class SearchRecord:
    epoch: int
    lr_w: float
    lr_a: float
    loss: float
    val_psnr: float


CSV_HEADER = ("epoch", "lr_w", "lr_a", "loss", "val_psnr")


@dataclass
class SearchLog:
    records: list[SearchRecord] = field(default_factory=list)
    noisy_psnr: float | None = None

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path=None) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([r.epoch, repr(r.lr_w), repr(r.lr_a), repr(r.loss), repr(r.val_psnr)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, text: str) -> SearchLog:
        rows = list(csv.reader(_io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise ValueError("not a search log")
        return cls([SearchRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in rows[1:]])

    def max_drawdown(self, tail_fraction: float = 1 / 3) -> float:
        """Largest drop below the running maximum within the final ``tail_fraction`` of epochs."""
        vals = [r.val_psnr for r in self.records]
        if not vals:
            return 0.0
        start = len(vals) - max(1, math.ceil(len(vals) * tail_fraction))
        best, worst = -math.inf, 0.0
        for i, v in enumerate(vals):
            best = max(best, v)
            if i >= start:
                worst = max(worst, best - v)
        return worst


def iterations_per_epoch(images: Sequence[ImageU8], patch: int, batch: int) -> int:
    patches = sum((im.height // patch) * (im.width // patch) for im in images)
    return max(1, math.ceil(patches / batch))


def _seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1, dtype=np.uint64)[0])


def _stack(pairs) -> tuple[Tensor, Tensor]:
    clean = np.stack([c for c, _ in pairs])[:, None]
    noisy = np.stack([n for _, n in pairs])[:, None]
    return Tensor(clean), Tensor(noisy)


def mean_psnr(net: Callable, pairs, max_value: float = 1.0) -> float:
    """Average per-image PSNR of ``net`` applied to the noisy half of each pair."""
    if not pairs:
        raise ValueError("no evaluation pairs")
    cfg = MetricsConfig(max_value=max_value)
    by_shape: dict[tuple, list[int]] = {}
    for i, (c, _) in enumerate(pairs):
        by_shape.setdefault(c.shape, []).append(i)
    scores = [0.0] * len(pairs)
    with ad.no_grad():
        for idx in by_shape.values():
            clean, noisy = _stack([pairs[i] for i in idx])
            out = net(noisy).data
            for j, i in enumerate(idx):
                scores[i] = psnr(clean.data[j, 0], out[j, 0], cfg)
    return float(np.mean(scores))


def _step(net: Callable, store: ParamStore, clean: Tensor, noisy: Tensor, lr: float, opt: OptimizerConfig) -> float:
    loss = ad.mse_loss(net(noisy), clean)
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite training loss {value}")
    ad.backward(loss)
    adam_update(store, lr, opt)
    store.zero_grad()
    return value


def search_epoch(net: Supernet, split: DatasetSplit, cfg: SearchConfig, epoch: int,
                 val_pairs=None) -> SearchRecord:
    """One epoch of alternating descent: weights on ``train_w``, then (after warm-up) architecture on ``train_a``.

    Each step touches exactly one parameter group; the other is frozen so it
    neither receives gradients nor moves.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    arch_phase = cfg.learn_arch and epoch >= cfg.warmup_epochs
    if not split.train_w or (arch_phase and not split.train_a):
        raise ValueError("dataset split has an empty partition")
    weights, arch = net.state.weights, net.state.arch
    pairs_w = noisy_pairs(split.train_w, cfg.sigma_8bit, [cfg.seed, epoch, 0])
    pairs_a = noisy_pairs(split.train_a, cfg.sigma_8bit, [cfg.seed, epoch, 1]) if arch_phase else None
    lr_w = cosine_lr(epoch, cfg.opt_w)
    lr_a = cosine_lr(epoch, cfg.opt_a) if arch_phase else 0.0
    rng = np.random.default_rng([cfg.seed, epoch, 2])
    losses = []
    try:
        for _ in range(iterations_per_epoch(split.train_w, cfg.patch, cfg.batch)):
            sw, sa = (int(s) for s in rng.integers(0, 2 ** 63, size=2))
            weights.set_requires_grad(True)
            arch.set_requires_grad(False)
            clean, noisy = sample_patches(pairs_w, cfg.patch, cfg.batch, sw)
            losses.append(_step(net, weights, clean, noisy, lr_w, cfg.opt_w))
            if arch_phase:
                weights.set_requires_grad(False)
                arch.set_requires_grad(True)
                clean, noisy = sample_patches(pairs_a, cfg.patch, cfg.batch, sa)
                _step(net, arch, clean, noisy, lr_a, cfg.opt_a)
    finally:
        weights.set_requires_grad(True)
        arch.set_requires_grad(True)
    if val_pairs is None:
        val_pairs = validation_pairs(split, cfg)
    return SearchRecord(epoch, lr_w, lr_a, float(np.mean(losses)), mean_psnr(net, val_pairs))


def validation_pairs(split: DatasetSplit, cfg: SearchConfig):
    """Noisy/clean validation pairs with noise frozen for the whole run."""
    return noisy_pairs(split.val, cfg.sigma_8bit, [cfg.seed, _VAL_STREAM])


def noisy_baseline(pairs, max_value: float = 1.0) -> float:
    cfg = MetricsConfig(max_value=max_value)
    return float(np.mean([psnr(c, n, cfg) for c, n in pairs]))


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_save(state: SupernetState, path, meta: dict | None = None) -> None:
    """Write weights, architecture parameters and all optimizer moments."""
    wa, ws = state.weights.to_arrays("w/")
    aa, as_ = state.arch.to_arrays("a/")
    write_container(path, {**wa, **aa},
                    {"kind": "supernet", "config": state.config.to_dict(), "steps": {**ws, **as_},
                     **(meta or {})})


def load_supernet(path) -> tuple[Supernet, dict]:
    arrays, meta = read_container(path)
    if meta.get("kind") != "supernet":
        raise ValueError(f"{path} is not a supernet checkpoint")
    net = Supernet(SupernetConfig.from_dict(meta["config"]))
    steps = meta.get("steps", {})
    net.state.weights.load_arrays(arrays, steps, "w/")
    net.state.arch.load_arrays(arrays, steps, "a/")
    return net, meta


def checkpoint_load(path) -> SupernetState:
    return load_supernet(path)[0].state


def run_search(images: Sequence[ImageU8], cfg: SearchConfig, out_dir=None, resume_from=None,
               stop_after: int | None = None,
               progress: Callable[[SearchRecord], None] | None = None) -> tuple[SupernetState, SearchLog]:
    """Run (or resume) the full alternating search; see :func:`search`."""
    net, log = search(images, cfg, out_dir, resume_from, stop_after, progress)
    return net.state, log


def search(images: Sequence[ImageU8], cfg: SearchConfig, out_dir=None, resume_from=None,
           stop_after: int | None = None, progress: Callable[[SearchRecord], None] | None = None,
           net: Supernet | None = None) -> tuple[Supernet, SearchLog]:
    """Run (or resume) the full alternating search and return the live supernet.

    With ``out_dir`` set, ``search.ckpt`` and ``search_log.csv`` are written
    at the end and a checkpoint every ``checkpoint_every`` epochs.
    ``stop_after`` ends the run early (after that many total epochs), which
    together with ``resume_from`` allows interrupted runs.
    """
    if not images:
        raise ValueError("no images")
    split = split_dataset(images, cfg.seed, cfg.n_val)
    val_pairs = validation_pairs(split, cfg)
    log = SearchLog(noisy_psnr=noisy_baseline(val_pairs))
    start = 0
    if resume_from is not None:
        net, meta = load_supernet(resume_from)
        log.records = [SearchRecord(**r) for r in meta.get("log", [])]
        start = int(meta.get("epochs_done", len(log.records)))
    elif net is None:
        net = Supernet(cfg.supernet_config(), cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    def save(name: str, done: int) -> None:
        checkpoint_save(net.state, out / name, {"epochs_done": done, "search": cfg.to_dict(),
                                                  "log": [asdict(r) for r in log.records]})

    for epoch in range(start, end):
        rec = search_epoch(net, split, cfg, epoch, val_pairs)
        log.records.append(rec)
        if progress:
            progress(rec)
        if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save(f"search_epoch{epoch + 1:04d}.ckpt", epoch + 1)
    if out is not None:
        save("search.ckpt", end)
        log.to_csv(out / "search_log.csv")
    return net, log


# ---------------------------------------------------------------------------
# training and evaluation of fixed networks


@dataclass
class TrainConfig:
    steps: int = 200
    batch: int = 12
    patch: int = 32
    sigma_8bit: float = 25.0
    seed: int = 0
    lr_max: float = 1e-3
    lr_min: float = 1e-5

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or self.sigma_8bit <= 0:
            raise ValueError("steps, batch and sigma must be positive")
        if self.patch < 8 or self.patch % 8:
            raise ValueError(f"patch {self.patch} must be a positive multiple of 8")
        self.optimizer()

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(lr_max=self.lr_max, lr_min=self.lr_min, total_epochs=self.steps)

    def to_dict(self) -> dict:
        return asdict(self)


def train_network(net, images: Sequence[ImageU8], cfg: TrainConfig,
                  progress: Callable[[int, float], None] | None = None) -> list[tuple[int, float, float]]:
    """Plain MSE training with ADAM and a per-step cosine schedule; returns ``(step, lr, loss)`` rows."""
    if not images:
        raise ValueError("no training images")
    opt = cfg.optimizer()
    rows = []
    for step in range(cfg.steps):
        pairs = noisy_pairs(images, cfg.sigma_8bit, [cfg.seed, step, 0])
        clean, noisy = sample_patches(pairs, cfg.patch, cfg.batch, _seed(cfg.seed, step, 1))
        lr = cosine_lr(step, opt)
        loss = _step(net, net.params, clean, noisy, lr, opt)
        rows.append((step, lr, loss))
        if progress:
            progress(step, loss)
    return rows


def train_log_csv(rows, path=None) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "lr", "loss"))
    for s, lr, loss in rows:
        w.writerow([s, repr(lr), repr(loss)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def save_weights(net, path, meta: dict | None = None) -> None:
    arrays = {name: t.data for name, t in net.params.items()}
    write_container(path, arrays, {"kind": "weights", **(meta or {})})


def load_weights(net, path) -> None:
    arrays, meta = read_container(path)
    if meta.get("kind") != "weights":
        raise ValueError(f"{path} is not a weights file")
    net.load_arrays(arrays)


def evaluate(net, images: Sequence[ImageU8], sigma_8bit: float, seed: int,
             cfg: MetricsConfig | None = None, arch=None, names: Sequence[str] | None = None) -> dict:
    """Per-image and average quality of ``net`` on noisy versions of ``images``."""
    cfg = cfg or MetricsConfig()
    pairs = noisy_pairs(images, sigma_8bit, [seed, _VAL_STREAM, 1])
    params = count_params(arch) if arch is not None else count_params(net)
    macs = count_macs(arch, cfg.ref_height, cfg.ref_width) if arch is not None else 0
    per = []
    with ad.no_grad():
        for i, (clean, noisy) in enumerate(pairs):
            out = net(Tensor(noisy[None, None])).data[0, 0]
            rep = MetricsReport(psnr(clean, out, cfg), ssim(clean, out, cfg), params, macs)
            per.append({"image": names[i] if names else f"image_{i:02d}",
                        "noisy_psnr_db": psnr(clean, noisy, cfg), **rep.to_dict()})
    avg = {k: float(np.mean([p[k] for p in per])) for k in ("noisy_psnr_db", "psnr_db", "ssim")}
    return {"images": per, "average": {**avg, "params": params, "macs": macs},
            "sigma_8bit": sigma_8bit, "ref_size": [cfg.ref_height, cfg.ref_width]}
