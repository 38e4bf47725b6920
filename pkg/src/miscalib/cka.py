"""Layer-wise linear Centered Kernel Alignment between the two encoders."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .model import Encoder, MiscalibrationDetector

MAX_FEATURES = 16384
SUBSAMPLE_STRIDE = 4


@dataclass
class ActivationTrace:
    layers: dict[str, np.ndarray]  # name -> samples x features, in depth order
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = {m.shape[0] for m in self.layers.values()}
        if len(counts) > 1:
            raise ValueError("all layers must have the same sample count")

    @property
    def names(self) -> list[str]:
        return list(self.layers)

    @property
    def n_samples(self) -> int:
        return next(iter(self.layers.values())).shape[0] if self.layers else 0


@dataclass
class CKAMatrix:
    values: np.ndarray  # rows: image layers, columns: lidar layers
    image_layers: list[str]
    lidar_layers: list[str]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_layer \\ lidar_layer"] + self.lidar_layers)
        for name, row in zip(self.image_layers, self.values):
            w.writerow([name] + [f"{v:.10f}" for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> CKAMatrix:
        rows = list(csv.reader(io.StringIO(text)))
        return cls(np.array([[float(v) for v in r[1:]] for r in rows[1:]]),
                   [r[0] for r in rows[1:]], rows[0][1:])

    def deepest_block(self, k: int = 2) -> np.ndarray:
        return self.values[-k:, -k:]


def _centered_gram(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    return x @ x.T


def _cka_from_grams(kx: np.ndarray, ky: np.ndarray) -> float:
    nx, ny = np.linalg.norm(kx), np.linalg.norm(ky)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    val = float(np.sum(kx * ky) / (nx * ny))
    return min(max(val, 0.0), 1.0)


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between two representations of the same samples (rows).

    Uses the sample Gram form ``<K_x, K_y>_F / (|K_x|_F |K_y|_F)`` of the
    column-centered inputs, equal to the feature form
    ``|Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F)``.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("inputs must be 2-D (samples x features)")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    return _cka_from_grams(_centered_gram(x), _centered_gram(y))


def _flatten(act: torch.Tensor, offset: tuple[int, int]) -> np.ndarray:
    n, c, h, w = act.shape
    if c * h * w > MAX_FEATURES:
        act = act[:, :, offset[0]::SUBSAMPLE_STRIDE, offset[1]::SUBSAMPLE_STRIDE]
    return act.reshape(n, -1).numpy().astype(np.float32)


@torch.no_grad()
def capture_encoder(encoder: Encoder, inputs: torch.Tensor, layers: Sequence[str] | None = None,
                    batch_size: int = 16, seed: int = 0) -> ActivationTrace:
    """Record post-activation outputs of the stem and every basic block."""
    points = dict(encoder.capture_points())
    wanted = list(points) if layers is None else list(layers)
    unknown = [n for n in wanted if n not in points]
    if unknown:
        raise KeyError(f"unknown layer(s) {unknown}; available: {list(points)}")
    offset = tuple(int(v) for v in np.random.default_rng(seed).integers(0, SUBSAMPLE_STRIDE, 2))
    chunks: dict[str, list[np.ndarray]] = {n: [] for n in wanted}
    current: dict[str, torch.Tensor] = {}
    hooks = [points[n].register_forward_hook(
        lambda _m, _i, out, name=n: current.__setitem__(name, out)) for n in wanted]
    was_training = encoder.training
    encoder.eval()
    try:
        for i in range(0, len(inputs), batch_size):
            current.clear()
            encoder(inputs[i:i + batch_size])
            for n in wanted:
                chunks[n].append(_flatten(current[n], offset))
    finally:
        for h in hooks:
            h.remove()
        encoder.train(was_training)
    return ActivationTrace({n: np.concatenate(chunks[n]) for n in wanted},
                           {"subsample_seed": seed, "subsample_offset": offset,
                            "subsample_stride": SUBSAMPLE_STRIDE, "max_features": MAX_FEATURES})


def capture(model: MiscalibrationDetector, images: torch.Tensor, depths: torch.Tensor,
            layers: Sequence[str] | None = None, seed: int = 0) -> tuple[ActivationTrace, ActivationTrace]:
    return (capture_encoder(model.image_encoder, images, layers, seed=seed),
            capture_encoder(model.lidar_encoder, depths, layers, seed=seed))


def cka_grid(trace_img: ActivationTrace, trace_lidar: ActivationTrace) -> CKAMatrix:
    if trace_img.n_samples != trace_lidar.n_samples:
        raise ValueError("traces come from batches of different size")
    grams_i = [_centered_gram(m) for m in trace_img.layers.values()]
    grams_l = [_centered_gram(m) for m in trace_lidar.layers.values()]
    vals = np.array([[_cka_from_grams(a, b) for b in grams_l] for a in grams_i])
    return CKAMatrix(vals, trace_img.names, trace_lidar.names)


def render_heatmap(matrix: CKAMatrix, path: str | Path, title: str = "") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(matrix.values, origin="lower", vmin=0.0, vmax=1.0, cmap="magma")
    ax.set_xticks(range(len(matrix.lidar_layers)), matrix.lidar_layers, rotation=45, ha="right")
    ax.set_yticks(range(len(matrix.image_layers)), matrix.image_layers)
    ax.set_xlabel("LiDAR encoder layer")
    ax.set_ylabel("image encoder layer")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="CKA")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def export(matrix: CKAMatrix, out_dir: str | Path, condition: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"cka_{condition}.csv"
    png_path = out_dir / f"cka_{condition}.png"
    csv_path.write_text(matrix.to_csv())
    render_heatmap(matrix, png_path, f"CKA, {condition} inputs")
    return csv_path, png_path
