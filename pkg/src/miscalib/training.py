"""Two-stage training: contrastive pretext for the encoders, then the classifier head."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import INPUT_SIZE, Batch, ConfigError, Frame, build_epoch, collate, eval_pairs
from .faults import BUILTIN_CONFIGS, ErrorRangeConfig, get_config
from .model import (ClassifierHead, MiscalibrationDetector, atomic_write_bytes, bce_loss, contrastive_loss,
                    file_hash, load_checkpoint, save_checkpoint, state_hash)

log = logging.getLogger(__name__)

STAGES = ("pretext", "classifier")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr_initial: float = 1e-3
    lr_after_drop: float = 1e-4
    lr_drop_epoch: int = 30
    weight_decay: float = 0.05
    epochs: int = 50
    margin: float = 4.0
    seed: int = 0
    stage: str = "pretext"
    variant: str = "resnet18_small"
    val_fraction: float = 0.05
    grad_clip: float = 0.0  # 0 disables clipping
    workers: int = 0
    negative_config: str = "Calibrated"
    positive_config: str = "Miscalibrated"
    input_width: int = INPUT_SIZE[0]
    input_height: int = INPUT_SIZE[1]

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr_initial <= 0 or self.lr_after_drop <= 0:
            raise ConfigError("learning rates must be positive")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")

    @property
    def input_size(self) -> tuple[int, int]:
        return (self.input_width, self.input_height)

    def configs(self, table: dict[str, ErrorRangeConfig] | None = None):
        return get_config(self.negative_config, table), get_config(self.positive_config, table)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> TrainConfig:
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            conv = {"int": int, "float": float, "str": str}[types[key]]
            try:
                kw[key] = conv(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key!r}: {val!r}") from None
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> TrainConfig:
        return cls.from_text(Path(path).read_text(), **overrides)


@dataclass
class TrainState:
    epoch: int = 0  # epochs completed
    step: int = 0
    running_loss: float = 0.0
    best_metric: float = -math.inf
    checkpoint_path: str = ""
    history: list = field(default_factory=list)

    def advance(self, epoch: int, step: int) -> None:
        if epoch < self.epoch or step < self.step:
            raise ValueError("training counters must not decrease")
        self.epoch, self.step = epoch, step


def lr_schedule(epoch: int, cfg: TrainConfig | None = None) -> float:
    """Step schedule: initial rate, dropped tenfold from ``lr_drop_epoch`` on."""
    cfg = cfg or TrainConfig()
    return cfg.lr_initial if epoch < cfg.lr_drop_epoch else cfg.lr_after_drop


def split_validation(frames: Sequence[Frame], fraction: float, seed: int):
    n_val = int(round(len(frames) * fraction))
    if n_val == 0:
        return list(frames), []
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x7a1])).permutation(len(frames))
    val = set(order[:n_val].tolist())
    return ([f for i, f in enumerate(frames) if i not in val],
            [f for i, f in enumerate(frames) if i in val])


def to_tensors(batch: Batch):
    return (torch.from_numpy(batch.images), torch.from_numpy(batch.depths),
            torch.from_numpy(batch.labels))


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _write_metrics(run_dir: Path, history: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["epoch", "lr", "loss", "val_metric"], lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: row.get(k, "") for k in writer.fieldnames})
    atomic_write_bytes(run_dir / "metrics.csv", buf.getvalue().encode())


def _save_resume(run_dir: Path, model, opt, state: TrainState) -> None:
    buf = io.BytesIO()
    torch.save({"model": model.state_dict(), "optimizer": opt.state_dict(),
                "state": dataclasses.asdict(state),
                "torch_rng": torch.get_rng_state()}, buf)
    atomic_write_bytes(run_dir / "resume.pt", buf.getvalue())


def _load_resume(run_dir: Path, model, opt) -> TrainState:
    blob = torch.load(run_dir / "resume.pt", weights_only=False)
    model.load_state_dict(blob["model"])
    opt.load_state_dict(blob["optimizer"])
    torch.set_rng_state(blob["torch_rng"])
    return TrainState(**blob["state"])


def _check_finite(loss: torch.Tensor, epoch: int, step: int, batch: Batch) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss at epoch {epoch} step {step}; "
                            f"batch: {', '.join(batch.manifest())}")


def _prepare_run(run_dir, cfg: TrainConfig) -> Path:
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(run_dir / "config.txt", cfg.to_text().encode())
    return run_dir


def train_pretext(frames: Sequence[Frame], cfg: TrainConfig, run_dir: str | Path, *,
                  resume: bool = False, stop_after: int | None = None,
                  on_epoch: Callable[[dict], None] | None = None) -> Path:
    """Train both encoders with the pixel-wise contrastive loss.

    Writes per-epoch checkpoints, ``metrics.csv`` and ``final.npz`` (the last
    epoch).  ``stop_after`` ends the run early after that many completed
    epochs, leaving it resumable with ``resume=True``.
    """
    if cfg.stage != "pretext":
        cfg = dataclasses.replace(cfg, stage="pretext")
    run_dir = _prepare_run(run_dir, cfg)
    torch.manual_seed(cfg.seed)
    model = MiscalibrationDetector(cfg.variant)
    params = [p for enc in model.encoders() for p in enc.parameters()]
    opt = torch.optim.AdamW(params, lr=cfg.lr_initial, weight_decay=cfg.weight_decay)
    state = _load_resume(run_dir, model, opt) if resume else TrainState()
    train_frames, _ = split_validation(frames, cfg.val_fraction, cfg.seed)
    configs = cfg.configs()

    for epoch in range(state.epoch, cfg.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        lr = lr_schedule(epoch, cfg)
        _set_lr(opt, lr)
        model.train()
        total, n = 0.0, 0
        t0 = time.perf_counter()
        step = state.step
        for batch in build_epoch(train_frames, configs, cfg.batch_size, cfg.seed, epoch, cfg.workers,
                                 input_size=cfg.input_size):
            images, depths, labels = to_tensors(batch)
            if int(labels.sum()) * 2 != len(labels):
                raise AssertionError("unbalanced batch")
            e_img, e_lid = model.embed(images, depths)
            loss = contrastive_loss(e_img, e_lid, labels, cfg.margin)
            _check_finite(loss, epoch, step, batch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            step += 1
            total += loss.item() * len(labels)
            if step % 10 == 0:
                log.debug("step %d loss %.5f", step, loss.item())
            n += len(labels)
        if n == 0:
            raise ConfigError("not enough frames for a single balanced batch")
        mean_loss = total / n
        state.advance(epoch + 1, step)
        state.running_loss = mean_loss
        ckpt = run_dir / "checkpoints" / f"epoch_{epoch + 1:03d}.npz"
        save_checkpoint(ckpt, model, stage="pretext", input_size=cfg.input_size, margin=cfg.margin,
                        extra={"epoch": epoch + 1, "seed": cfg.seed})
        state.checkpoint_path = str(ckpt)
        row = {"epoch": epoch + 1, "lr": lr, "loss": mean_loss, "val_metric": ""}
        state.history.append(row)
        _write_metrics(run_dir, state.history)
        _save_resume(run_dir, model, opt, state)
        log.info("pretext epoch %d/%d loss %.5f (%.0fs)", epoch + 1, cfg.epochs, mean_loss,
                 time.perf_counter() - t0)
        if on_epoch:
            on_epoch(row)

    final = run_dir / "final.npz"
    if state.epoch >= cfg.epochs:
        save_checkpoint(final, model, stage="pretext", input_size=cfg.input_size, margin=cfg.margin,
                        extra={"epoch": state.epoch, "seed": cfg.seed})
    return final


@torch.no_grad()
def predict(model: MiscalibrationDetector, pairs, batch_size: int = 16) -> np.ndarray:
    """Miscalibration probabilities for a list of SamplePairs (eval mode)."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(pairs), batch_size):
        images, depths, _ = to_tensors(collate(pairs[i:i + batch_size]))
        out.append(model(images, depths).numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def train_classifier(encoder_checkpoint: str | Path, frames: Sequence[Frame], cfg: TrainConfig,
                     run_dir: str | Path, *,
                     on_epoch: Callable[[dict], None] | None = None) -> Path:
    """Train the head on frozen encoders with binary cross-entropy.

    Keeps the checkpoint with the best validation accuracy as ``best.npz``.
    """
    if cfg.stage != "classifier":
        cfg = dataclasses.replace(cfg, stage="classifier")
    run_dir = _prepare_run(run_dir, cfg)
    model, header = load_checkpoint(encoder_checkpoint, variant=cfg.variant)
    enc_hash = file_hash(encoder_checkpoint)
    torch.manual_seed(cfg.seed)
    model.head = ClassifierHead(_head_in(model), single_conv=cfg.variant == "resnet18_all")
    model.freeze_encoders()
    frozen_before = [state_hash(e) for e in model.encoders()]
    opt = torch.optim.AdamW(model.head.parameters(), lr=cfg.lr_initial, weight_decay=cfg.weight_decay)
    state = TrainState()
    train_frames, val_frames = split_validation(frames, cfg.val_fraction, cfg.seed)
    configs = cfg.configs()
    val_pairs = (eval_pairs(val_frames, configs[1], configs[0], cfg.seed + 1, cfg.input_size)
                 if val_frames else [])
    best = run_dir / "best.npz"
    extra = {"encoder_checkpoint_sha256": enc_hash, "seed": cfg.seed}

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        _set_lr(opt, lr)
        model.train()
        total, n = 0.0, 0
        step = state.step
        for batch in build_epoch(train_frames, configs, cfg.batch_size, cfg.seed, epoch, cfg.workers,
                                 input_size=cfg.input_size):
            images, depths, labels = to_tensors(batch)
            if int(labels.sum()) * 2 != len(labels):
                raise AssertionError("unbalanced batch")
            with torch.no_grad():
                e_img, e_lid = model.embed(images, depths)
            prob = torch.sigmoid(model.head(e_img, e_lid))
            loss = bce_loss(prob, labels)
            _check_finite(loss, epoch, step, batch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if any(p.grad is not None for e in model.encoders() for p in e.parameters()):
                raise AssertionError("gradient reached a frozen encoder")
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.head.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            total += loss.item() * len(labels)
            if step % 10 == 0:
                log.debug("step %d loss %.5f", step, loss.item())
            n += len(labels)
        if n == 0:
            raise ConfigError("not enough frames for a single balanced batch")
        state.advance(epoch + 1, step)
        state.running_loss = total / n
        if val_pairs:
            probs = predict(model, val_pairs)
            labels = np.array([p.label for p in val_pairs])
            val_acc = float(((probs >= 0.5) == labels).mean())
        else:
            val_acc = float("nan")
        ckpt = run_dir / "checkpoints" / f"epoch_{epoch + 1:03d}.npz"
        save_checkpoint(ckpt, model, stage="classifier", input_size=cfg.input_size, margin=cfg.margin,
                        extra={**extra, "epoch": epoch + 1, "val_accuracy": val_acc})
        # without a validation split the last epoch wins
        if not val_pairs or val_acc >= state.best_metric:
            state.best_metric = val_acc if val_pairs else state.best_metric
            save_checkpoint(best, model, stage="classifier", input_size=cfg.input_size, margin=cfg.margin,
                            extra={**extra, "epoch": epoch + 1, "val_accuracy": val_acc})
        row = {"epoch": epoch + 1, "lr": lr, "loss": state.running_loss, "val_metric": val_acc}
        state.history.append(row)
        _write_metrics(run_dir, state.history)
        log.info("classifier epoch %d/%d loss %.5f val acc %.4f", epoch + 1, cfg.epochs,
                 state.running_loss, val_acc)
        if on_epoch:
            on_epoch(row)

    if [state_hash(e) for e in model.encoders()] != frozen_before:
        raise AssertionError("encoder weights changed during classifier training")
    return best


def _head_in(model: MiscalibrationDetector) -> int:
    return 2 * model.image_encoder.config.out_channels
