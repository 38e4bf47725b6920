"""Detection metrics per test configuration and inference benchmarking."""

from __future__ import annotations

import csv
import io
import platform
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import INPUT_SIZE, Frame, SamplePair, eval_pairs
from .faults import BUILTIN_CONFIGS, EVAL_CONFIGS, INTRINSIC_BANDS, get_config
from .model import MiscalibrationDetector, count_parameters, load_checkpoint
from .training import predict

UNDEFINED = "undefined"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @classmethod
    def from_predictions(cls, probs, labels, threshold: float = 0.5) -> ConfusionCounts:
        pred = np.asarray(probs) >= threshold
        y = np.asarray(labels).astype(bool)
        return cls(int((pred & y).sum()), int((pred & ~y).sum()),
                   int((~pred & ~y).sum()), int((~pred & y).sum()))


def _ratio(num: int, den: int):
    return Fraction(num, den) if den else UNDEFINED


@dataclass
class MetricsEntry:
    config: str
    counts: ConfusionCounts
    threshold: float = 0.5
    accuracy: Fraction | str = field(init=False)
    precision: Fraction | str = field(init=False)
    recall: Fraction | str = field(init=False)

    def __post_init__(self):
        c = self.counts
        self.accuracy = _ratio(c.tp + c.tn, c.total)
        self.precision = _ratio(c.tp, c.tp + c.fp)
        self.recall = _ratio(c.tp, c.tp + c.fn)

    def as_floats(self) -> dict:
        def f(x):
            return float(x) if isinstance(x, Fraction) else None
        return {"accuracy": f(self.accuracy), "precision": f(self.precision), "recall": f(self.recall)}


def compute_metrics(counts: ConfusionCounts, config: str = "", threshold: float = 0.5) -> MetricsEntry:
    """Accuracy, precision and recall as exact fractions; ``"undefined"`` on 0/0."""
    return MetricsEntry(config, counts, threshold)


def evaluation_pairs(frames: Sequence[Frame], config_name: str, seed: int,
                     input_size: tuple[int, int] = INPUT_SIZE) -> list[SamplePair]:
    """Noise-config negatives and ``config_name`` positives, one of each per frame.

    ``config_name`` is a test configuration name or an intrinsic difficulty
    (``easy``/``medium``/``hard``, optionally prefixed with ``intrinsic``).
    """
    key = config_name.lower().replace("intrinsic", "").strip()
    if key in INTRINSIC_BANDS:
        positive = f"intrinsic {key}"
    else:
        positive = get_config(config_name)
        if positive.label != 1:
            raise KeyError(f"{config_name!r} is not a miscalibrated test configuration")
    return eval_pairs(frames, positive, get_config("Noise"), seed, input_size)


def evaluate_config(model: MiscalibrationDetector | str | Path, frames: Sequence[Frame],
                    config_name: str, threshold: float = 0.5, seed: int = 0,
                    return_probs: bool = False, input_size: tuple[int, int] | None = None):
    """Metrics for one test configuration; ``input_size`` defaults to the checkpoint's."""
    if not isinstance(model, MiscalibrationDetector):
        model, header = load_checkpoint(model)
        input_size = input_size or tuple(header["input_size"])
    pairs = evaluation_pairs(frames, config_name, seed, input_size or INPUT_SIZE)
    probs = predict(model, pairs)
    labels = np.array([p.label for p in pairs])
    entry = compute_metrics(ConfusionCounts.from_predictions(probs, labels, threshold),
                            config_name, threshold)
    if return_probs:
        return entry, probs, labels
    return entry


@dataclass
class MetricsReport:
    """Metrics entries for several test configurations at one threshold."""
    entries: list[MetricsEntry]

    def __getitem__(self, config: str) -> MetricsEntry:
        for e in self.entries:
            if e.config == config:
                return e
        raise KeyError(config)

    def to_csv(self) -> str:
        return report_csv(self.entries)

    def table(self) -> str:
        return report_table(self.entries)

    def write(self, out_dir: str | Path, stem: str = "metrics") -> None:
        write_report(self.entries, out_dir, stem)


def evaluate_configs(model: MiscalibrationDetector | str | Path, frames: Sequence[Frame],
                     config_names: Sequence[str], threshold: float = 0.5, seed: int = 0,
                     input_size: tuple[int, int] | None = None) -> MetricsReport:
    if not isinstance(model, MiscalibrationDetector):
        model, header = load_checkpoint(model)
        input_size = input_size or tuple(header["input_size"])
    return MetricsReport([evaluate_config(model, frames, n, threshold, seed, input_size=input_size)
                          for n in config_names])


def _fmt(x) -> str:
    return f"{100 * float(x):.2f}%" if isinstance(x, Fraction) else UNDEFINED


def report_csv(entries: Sequence[MetricsEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "threshold", "samples", "tp", "fp", "tn", "fn",
                "accuracy", "precision", "recall"])
    for e in entries:
        vals = e.as_floats()
        w.writerow([e.config, e.threshold, e.counts.total, e.counts.tp, e.counts.fp, e.counts.tn,
                    e.counts.fn] + ["" if vals[k] is None else f"{vals[k]:.6f}"
                                    for k in ("accuracy", "precision", "recall")])
    return buf.getvalue()


def report_table(entries: Sequence[MetricsEntry]) -> str:
    """Metrics as rows, configurations as columns."""
    names = [e.config for e in entries]
    width = max([10] + [len(n) for n in names]) + 2
    lines = ["Metrics".ljust(11) + "".join(n.rjust(width) for n in names)]
    for metric in ("accuracy", "precision", "recall"):
        lines.append(metric.capitalize().ljust(11)
                     + "".join(_fmt(getattr(e, metric)).rjust(width) for e in entries))
    return "\n".join(lines) + "\n"


def write_report(entries: Sequence[MetricsEntry], out_dir: str | Path, stem: str = "metrics") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.csv").write_text(report_csv(entries))
    (out_dir / f"{stem}.txt").write_text(report_table(entries))


# --------------------------------------------------------------------------- benchmarking


def hardware_info() -> str:
    cpu = platform.processor() or platform.machine()
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("model name"):
                cpu = line.split(":", 1)[1].strip()
                break
    except OSError:
        pass
    dev = torch.cuda.get_device_name(0) if torch.cuda.is_available() else "cpu"
    return (f"{platform.system()} {platform.release()}; {cpu}; device={dev}; "
            f"torch={torch.__version__}; threads={torch.get_num_threads()}")


@dataclass
class BenchResult:
    variant: str
    input_size: tuple[int, int]
    latencies_ms: list[float]
    parameters: dict
    hardware: str

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.latencies_ms)

    @property
    def median_ms(self) -> float:
        return statistics.median(self.latencies_ms)

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.latencies_ms, 95))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# hardware: {self.hardware}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "width", "height", "iterations", "mean_ms", "median_ms", "p95_ms",
                    "params_image_encoder", "params_lidar_encoder", "params_head", "params_total"])
        p = self.parameters
        w.writerow([self.variant, *self.input_size, len(self.latencies_ms), f"{self.mean_ms:.3f}",
                    f"{self.median_ms:.3f}", f"{self.p95_ms:.3f}", p["image_encoder"],
                    p["lidar_encoder"], p["head"], p["total"]])
        return buf.getvalue()


@torch.no_grad()
def bench(model: MiscalibrationDetector | str | Path, input_size: tuple[int, int] = INPUT_SIZE,
          n_warmup: int = 5, n_iter: int = 20, seed: int = 0) -> BenchResult:
    """Single-pair forward latency (eval mode) after warm-up."""
    if not isinstance(model, MiscalibrationDetector):
        model, _ = load_checkpoint(model)
    model.eval()
    width, height = input_size
    gen = torch.Generator().manual_seed(seed)
    image = torch.rand(1, 3, height, width, generator=gen)
    depth = torch.rand(1, 1, height, width, generator=gen)
    for _ in range(n_warmup):
        model(image, depth)
    times = []
    for _ in range(n_iter):
        t0 = time.perf_counter()
        model(image, depth)
        if torch.cuda.is_available() and image.is_cuda:
            torch.cuda.synchronize()
        times.append((time.perf_counter() - t0) * 1000.0)
    return BenchResult(model.variant, input_size, times, count_parameters(model), hardware_info())
