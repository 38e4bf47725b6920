"""Frames, labeled sample pairs and balanced epoch streams.

A *frame* is one (image, point cloud, calibration) triple, either read from a
KITTI odometry directory or produced by :func:`synth_scene`.  A *sample
pair* is a frame after fault injection: the RGB image next to the LiDAR
depth map rendered through a (possibly perturbed) calibration.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .faults import (CALIBRATED, MISCALIBRATED, ErrorRangeConfig, IntrinsicError,
                     Perturbation, apply_extrinsic, sample_intrinsic_perturbation,
                     sample_perturbation)
from .geometry import (DEFAULT_MAX_RANGE, CalibrationSet, DepthMap, ExtrinsicTransform,
                       PointCloud, depth_image, euler_to_rotation)

log = logging.getLogger(__name__)

INPUT_SIZE = (512, 256)  # (width, height) fed to the encoders


class CalibParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Frame:
    image: np.ndarray  # H x W x 3, uint8 or float in [0, 1]
    cloud: PointCloud
    calib: CalibrationSet
    frame_id: str = ""


@dataclass
class SamplePair:
    image: np.ndarray = field(repr=False)
    depth: DepthMap = field(repr=False)
    label: int
    perturbation: Perturbation
    frame_id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.depth.shape:
            raise ValueError(f"image {self.image.shape[:2]} and depth {self.depth.shape} differ")
        if self.label != self.perturbation.label:
            raise ValueError("label does not match perturbation label")


@dataclass(frozen=True)
class SplitSpec:
    train_sequences: tuple[str, ...]
    test_sequence: str
    frame_counts: dict | None = None

    def __post_init__(self):
        if self.test_sequence in self.train_sequences:
            raise ConfigError(f"sequence {self.test_sequence} is in both train and test")


KITTI_SPLIT = SplitSpec(tuple(f"{i:02d}" for i in range(1, 21)), "00",
                        {"train": 39011, "test": 4541})


# --------------------------------------------------------------------------- KITTI


def parse_calib_file(path: str | Path, camera: int = 2,
                     image_size: tuple[int, int] = (1241, 376)) -> CalibrationSet:
    """Parse a KITTI odometry ``calib.txt`` into a CalibrationSet for ``P<camera>``.

    ``R0_rect`` is used when present (raw/object layout); odometry files are
    already rectified so the rectifying rotation defaults to identity.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"calibration file not found: {path}")
    values: dict[str, np.ndarray] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if ":" not in line:
            raise CalibParseError(f"{path}:{lineno}: missing ':' separator")
        key, rest = line.split(":", 1)
        key = key.strip()
        try:
            values[key] = np.array([float(x) for x in rest.split()], dtype=np.float64)
        except ValueError:
            raise CalibParseError(f"{path}:{lineno}: non-numeric value for key {key!r}") from None

    def need(key: str, n: int) -> np.ndarray:
        if key not in values:
            raise CalibParseError(f"{path}: missing key {key!r}")
        if values[key].size != n:
            raise CalibParseError(f"{path}: key {key!r} has {values[key].size} values, expected {n}")
        return values[key]

    proj = need(f"P{camera}", 12).reshape(3, 4)
    tr_key = "Tr_velo_to_cam" if "Tr_velo_to_cam" in values else "Tr"
    tr = need(tr_key, 12).reshape(3, 4)
    rect = need("R0_rect", 9).reshape(3, 3) if "R0_rect" in values else np.eye(3)
    try:
        # KITTI stores rotations at ~1e-7 precision; snap to the nearest rotation
        u, _, vt = np.linalg.svd(tr[:, :3])
        rot = u @ vt
        u, _, vt = np.linalg.svd(rect)
        rect = u @ vt
        return CalibrationSet(ExtrinsicTransform(rot, tr[:, 3]), rect, proj, image_size)
    except ValueError as exc:
        raise CalibParseError(f"{path}: {exc}") from None


def read_velodyne(path: str | Path) -> PointCloud:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"velodyne scan not found: {path}")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"{path}: size {raw.size * 4} bytes is not a multiple of 16")
    scan = raw.reshape(-1, 4)
    return PointCloud(scan[:, :3], scan[:, 3])


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_kitti_frame(root_path: str | Path, sequence: str | int, frame: int | str,
                     camera: int = 2) -> tuple[np.ndarray, PointCloud, CalibrationSet]:
    seq_dir = Path(root_path) / "sequences" / f"{int(sequence):02d}"
    name = f"{int(frame):06d}"
    image = read_image(seq_dir / f"image_{camera}" / f"{name}.png")
    cloud = read_velodyne(seq_dir / "velodyne" / f"{name}.bin")
    calib = parse_calib_file(seq_dir / "calib.txt", camera,
                             image_size=(image.shape[1], image.shape[0]))
    return image, cloud, calib


def list_kitti_frames(root_path: str | Path, sequences: Sequence[str]) -> list[tuple[str, int]]:
    out = []
    for seq in sequences:
        vel = Path(root_path) / "sequences" / f"{int(seq):02d}" / "velodyne"
        if not vel.is_dir():
            raise FileNotFoundError(f"sequence directory not found: {vel}")
        out.extend((f"{int(seq):02d}", int(p.stem)) for p in sorted(vel.glob("*.bin")))
    return out


def load_kitti_split(root_path: str | Path, split: SplitSpec = KITTI_SPLIT,
                     limit: int | None = None) -> tuple[list[Frame], list[Frame]]:
    """Load train and test frames, re-checking sequence disjointness."""
    SplitSpec(split.train_sequences, split.test_sequence)

    def load(keys):
        frames = []
        for seq, idx in keys[:limit]:
            img, cloud, calib = load_kitti_frame(root_path, seq, idx)
            frames.append(Frame(img, cloud, calib, f"{seq}/{idx:06d}"))
        return frames

    return (load(list_kitti_frames(root_path, split.train_sequences)),
            load(list_kitti_frames(root_path, [split.test_sequence])))


def write_kitti_frame(root_path: str | Path, sequence: str, frame: int, image: np.ndarray,
                      cloud: PointCloud, calib: CalibrationSet, camera: int = 2) -> None:
    """Write a frame in KITTI odometry layout (used for fixtures and round trips)."""
    seq_dir = Path(root_path) / "sequences" / f"{int(sequence):02d}"
    (seq_dir / "velodyne").mkdir(parents=True, exist_ok=True)
    (seq_dir / f"image_{camera}").mkdir(parents=True, exist_ok=True)
    name = f"{int(frame):06d}"
    img = image if image.dtype == np.uint8 else np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(seq_dir / f"image_{camera}" / f"{name}.png")
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    scan = np.column_stack([cloud.points, inten]).astype("<f4")
    scan.tofile(seq_dir / "velodyne" / f"{name}.bin")
    tr = calib.extrinsic.matrix()[:3]
    lines = []
    for i in range(4):
        proj = calib.projection if i == camera else np.eye(3, 4)
        lines.append(f"P{i}: " + " ".join(f"{x:.12e}" for x in proj.ravel()))
    lines.append("Tr: " + " ".join(f"{x:.12e}" for x in tr.ravel()))
    if not np.array_equal(calib.rect_rotation, np.eye(3)):
        lines.append("R0_rect: " + " ".join(f"{x:.12e}" for x in calib.rect_rotation.ravel()))
    (seq_dir / "calib.txt").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- cropping


def crop_to_input(image: np.ndarray, calib: CalibrationSet,
                  size: tuple[int, int] = INPUT_SIZE) -> tuple[np.ndarray, CalibrationSet]:
    """Center-crop (or zero-pad) ``image`` to ``size`` and shift the principal point."""
    width, height = size
    h, w = image.shape[:2]
    if (w, h) == (width, height):
        return image, calib.replace(image_size=(width, height))
    out = np.zeros((height, width) + image.shape[2:], dtype=image.dtype)
    # offsets of the output window inside the source; negative means padding
    ox, oy = (w - width) // 2, (h - height) // 2
    sx0, sy0 = max(ox, 0), max(oy, 0)
    sx1, sy1 = min(ox + width, w), min(oy + height, h)
    out[sy0 - oy:sy1 - oy, sx0 - ox:sx1 - ox] = image[sy0:sy1, sx0:sx1]
    proj = np.array(calib.projection)
    # shifting pixels by (-ox, -oy) is P' = [[1,0,-ox],[0,1,-oy],[0,0,1]] @ P
    proj[0] -= ox * proj[2]
    proj[1] -= oy * proj[2]
    return out, calib.replace(projection=proj, image_size=(width, height))


def _to_float_image(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return np.asarray(image, dtype=np.float32)


# --------------------------------------------------------------------------- samples


def render_pair(image: np.ndarray, cloud: PointCloud, calib: CalibrationSet,
                perturbation: Perturbation, frame_id: str = "",
                input_size: tuple[int, int] = INPUT_SIZE,
                max_range: float = DEFAULT_MAX_RANGE) -> SamplePair:
    """Apply a known perturbation and render the pair."""
    bad = apply_extrinsic(calib, perturbation)
    img, _ = crop_to_input(image, calib, input_size)
    _, bad_cropped = crop_to_input(image, bad, input_size)
    depth = depth_image(cloud, bad_cropped, max_range)
    return SamplePair(_to_float_image(img), depth, perturbation.label, perturbation, frame_id)


def make_sample(image: np.ndarray, cloud: PointCloud, calib: CalibrationSet,
                config: ErrorRangeConfig | str, seed, frame_id: str = "",
                input_size: tuple[int, int] = INPUT_SIZE,
                max_range: float = DEFAULT_MAX_RANGE) -> SamplePair:
    """Sample a fault from ``config`` and render the labeled pair.

    ``config`` may also be ``"intrinsic <easy|medium|hard>"`` for an
    intrinsic-only fault.
    """
    if isinstance(config, str):
        difficulty = config.split()[-1]
        pert = sample_intrinsic_perturbation(difficulty, seed, calib.fu)
    else:
        pert = sample_perturbation(config, seed)
    return render_pair(image, cloud, calib, pert, frame_id, input_size, max_range)


def sample_from_frame(frame: Frame, config, seed, **kw) -> SamplePair:
    """:func:`make_sample` on a :class:`Frame`."""
    return make_sample(frame.image, frame.cloud, frame.calib, config, seed, frame.frame_id, **kw)


# --------------------------------------------------------------------------- synthetic scenes


SYNTH_F = 718.0  # KITTI focal length, kept by a 512 px center crop; scales with width


def _synth_focal(width: int) -> float:
    return SYNTH_F * width / INPUT_SIZE[0]

SYNTH_CAMERA_HEIGHT = 1.65
# KITTI-like LiDAR axes (x forward, y left, z up) to camera axes (x right, y down, z forward)
_LIDAR_TO_CAM_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass
class _Scene:
    ground_y: float
    wall_z: float
    boxes: list  # (lo[3], hi[3])
    panels: list  # (center[3], normal[3], tangent[3], half_width, y_top, y_bottom)
    colors: np.ndarray  # per surface id, RGB
    texture: np.ndarray  # per surface id (kind, frequency, phase)


def _random_scene(rng: np.random.Generator, n_planes: int) -> _Scene:
    ground_y = SYNTH_CAMERA_HEIGHT
    wall_z = rng.uniform(25.0, 40.0)
    boxes, panels = [], []
    for _ in range(n_planes):
        z = rng.uniform(4.0, 20.0)
        x = rng.uniform(-0.4, 0.4) * z
        if rng.random() < 0.5:
            w, h, d = rng.uniform(0.8, 3.0), rng.uniform(0.8, 2.8), rng.uniform(0.8, 3.0)
            lo = np.array([x - w / 2, ground_y - h, z])
            hi = np.array([x + w / 2, ground_y, z + d])
            boxes.append((lo, hi))
        else:
            yaw = rng.uniform(-1.0, 1.0)
            normal = np.array([math.sin(yaw), 0.0, -math.cos(yaw)])
            tangent = np.array([math.cos(yaw), 0.0, math.sin(yaw)])
            half_w = rng.uniform(0.5, 2.0)
            bottom = ground_y - rng.choice([0.0, rng.uniform(0.5, 2.0)])
            top = bottom - rng.uniform(1.0, 3.0)
            panels.append((np.array([x, 0.0, z]), normal, tangent, half_w, top, bottom))
    # ids: 0 ground, 1 wall, then 3 per box (x/y/z faces), then panels
    n_ids = 2 + 3 * len(boxes) + len(panels)
    colors = rng.uniform(0.1, 0.95, size=(n_ids, 3))
    colors[0] = rng.uniform(0.25, 0.45) * np.ones(3) + rng.uniform(-0.03, 0.03, 3)
    for b in range(len(boxes)):
        base = rng.uniform(0.1, 0.95, 3)
        for k, shade in enumerate((0.7, 1.0, 0.85)):
            colors[2 + 3 * b + k] = base * shade
    texture = np.column_stack([rng.integers(0, 3, n_ids), rng.uniform(1.0, 4.0, n_ids),
                               rng.uniform(0.0, 2 * np.pi, n_ids)])
    return _Scene(ground_y, wall_z, boxes, panels, colors, texture)


def _raycast(scene: _Scene, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit along each ray: (t, surface id, 2-D texture coords)."""
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)
    tex = np.zeros((n, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        def take(t, sid, s, r):
            better = np.isfinite(t) & (t > 1e-9) & (t < best_t)
            best_t[better] = t[better]
            best_id[better] = sid if np.isscalar(sid) else sid[better]
            tex[better, 0] = s[better]
            tex[better, 1] = r[better]

        t = (scene.ground_y - origin[1]) / dirs[:, 1]
        p = origin + t[:, None] * dirs
        take(np.where(dirs[:, 1] > 0, t, np.inf), 0, p[:, 0], p[:, 2])

        t = (scene.wall_z - origin[2]) / dirs[:, 2]
        p = origin + t[:, None] * dirs
        take(np.where(dirs[:, 2] > 0, t, np.inf), 1, p[:, 0], p[:, 1])

        for b, (lo, hi) in enumerate(scene.boxes):
            t0 = (lo - origin) / dirs
            t1 = (hi - origin) / dirs
            tnear = np.minimum(t0, t1)
            tfar = np.maximum(t0, t1)
            tnear = np.nan_to_num(tnear, nan=-np.inf)
            tfar = np.nan_to_num(tfar, nan=np.inf)
            entry = tnear.max(axis=1)
            axis = tnear.argmax(axis=1)
            exit_ = tfar.min(axis=1)
            hit = (entry <= exit_) & (entry > 0)
            t = np.where(hit, entry, np.inf)
            p = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
            # texture coords: the two axes spanning the hit face
            s = np.where(axis == 0, p[:, 2], p[:, 0])
            r = np.where(axis == 1, p[:, 2], p[:, 1])
            take(t, 2 + 3 * b + axis, s, r)

        base = 2 + 3 * len(scene.boxes)
        for k, (center, normal, tangent, half_w, top, bottom) in enumerate(scene.panels):
            denom = dirs @ normal
            t = ((center - origin) @ normal) / denom
            p = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
            s = (p - center) @ tangent
            inside = (np.abs(s) <= half_w) & (p[:, 1] >= top) & (p[:, 1] <= bottom)
            take(np.where(inside, t, np.inf), base + k, s, p[:, 1])
    return best_t, best_id, tex


def _shade(scene: _Scene, ids: np.ndarray, tex: np.ndarray) -> np.ndarray:
    kind, freq, phase = (scene.texture[ids, i] for i in range(3))
    s, r = tex[:, 0], tex[:, 1]
    stripes = np.sin(freq * s + phase)
    checker = np.sign(np.sin(freq * s + phase) * np.sin(freq * r + phase))
    pattern = np.select([kind == 0, kind == 1], [stripes, checker], 0.0)
    return np.clip(scene.colors[ids] * (1.0 + 0.12 * pattern[:, None]), 0.0, 1.0)


def synth_calibration(rng: np.random.Generator,
                      image_size: tuple[int, int] = INPUT_SIZE) -> CalibrationSet:
    width, height = image_size
    f = _synth_focal(width)
    proj = np.array([[f, 0.0, width / 2.0, 0.0],
                     [0.0, f, height / 2.0, 0.0],
                     [0.0, 0.0, 1.0, 0.0]])
    rect = euler_to_rotation(*np.radians(rng.uniform(-0.5, 0.5, 3)))
    rot = euler_to_rotation(*np.radians(rng.uniform(-2.0, 2.0, 3))) @ _LIDAR_TO_CAM_AXES
    trans = np.array([0.0, -0.08, -0.27]) + rng.uniform(-0.05, 0.05, 3)
    return CalibrationSet(ExtrinsicTransform(rot, trans), rect, proj, image_size)


def _lidar_directions(n_points: int, image_size: tuple[int, int], n_beams: int) -> np.ndarray:
    """Scan-pattern ray directions in the LiDAR frame covering the camera view."""
    width, height = image_size
    f = _synth_focal(width)
    half_h = math.atan(width / 2 / f) + math.radians(4.0)
    half_v = math.atan(height / 2 / f) + math.radians(3.0)
    rows = min(n_beams, n_points)
    cols = math.ceil(n_points / rows)
    elev = np.linspace(half_v, -half_v, rows) if rows > 1 else np.zeros(1)
    azim = np.linspace(half_h, -half_h, cols) if cols > 1 else np.zeros(1)
    el, az = np.meshgrid(elev, azim, indexing="ij")
    el, az = el.ravel()[:n_points], az.ravel()[:n_points]
    return np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def synth_scene(seed, n_planes: int = 6, n_points: int = 24000, *,
                image_size: tuple[int, int] = INPUT_SIZE, n_beams: int = 48,
                return_ids: bool = False):
    """Render a random scene of boxes and panels seen by a camera and a LiDAR.

    The returned calibration is exactly the one used to generate the data, so
    every visible in-image LiDAR point lands on a pixel showing the surface it
    was sampled from.  With ``return_ids`` the per-pixel and per-point
    surface ids are returned as a fourth element.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    calib = synth_calibration(rng, image_size)
    scene = _random_scene(rng, n_planes)
    width, height = image_size

    # render in the rectified camera frame; P = [K | 0]
    k_mat = calib.projection[:, :3]
    uu, vv = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    pix = np.column_stack([uu.ravel(), vv.ravel(), np.ones(uu.size)])
    dirs = np.linalg.solve(k_mat, pix.T).T
    _, pix_ids, tex = _raycast(scene, np.zeros(3), dirs)
    image = _shade(scene, pix_ids, tex).reshape(height, width, 3)
    image = np.clip(image + rng.normal(0.0, 0.01, image.shape), 0.0, 1.0)
    image = (np.rint(image * 255) / 255).astype(np.float32)
    pix_ids = pix_ids.reshape(height, width)

    # LiDAR: rect frame <- lidar frame is x_rect = M x + c
    m_rot = calib.rect_rotation @ calib.extrinsic.rotation
    c_off = calib.rect_rotation @ calib.extrinsic.translation
    ldirs = _lidar_directions(n_points, image_size, n_beams)
    t, ids, _ = _raycast(scene, c_off, ldirs @ m_rot.T)
    hit = np.isfinite(t)
    p_rect = c_off + t[hit, None] * (ldirs[hit] @ m_rot.T)
    ids = ids[hit]

    # drop points the camera cannot see: their pixel shows another surface
    uvw = p_rect @ k_mat.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = uvw[:, 0] / uvw[:, 2]
        v = uvw[:, 1] / uvw[:, 2]
    in_img = (p_rect[:, 2] > 1e-6) & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    col = np.rint(np.nan_to_num(u)).astype(np.int64)
    row = np.rint(np.nan_to_num(v)).astype(np.int64)
    # points rounding onto the border row/column past the image never rasterize
    in_img &= (col < width) & (row < height)
    visible = np.ones(len(ids), dtype=bool)
    visible[in_img] = pix_ids[row[in_img], col[in_img]] == ids[in_img]
    p_rect, ids = p_rect[visible], ids[visible]

    points = (p_rect - c_off) @ m_rot
    intensity = scene.colors[ids].mean(axis=1)
    cloud = PointCloud(points, intensity)
    if return_ids:
        return image, cloud, calib, (pix_ids, ids)
    return image, cloud, calib


def synth_frames(n: int, seed: int, n_planes: int = 6, n_points: int = 24000,
                 prefix: str = "synth", image_size: tuple[int, int] = INPUT_SIZE) -> list[Frame]:
    """``n`` synthetic frames, images stored as uint8 to bound memory."""
    frames = []
    seeds = np.random.SeedSequence(seed).spawn(n)
    for i, ss in enumerate(seeds):
        img, cloud, calib = synth_scene(np.random.default_rng(ss), n_planes, n_points,
                                        image_size=image_size)
        # drop points that can never project to keep memory down
        front = np.asarray(depth_mask(cloud, calib))
        cloud = PointCloud(cloud.points[front], cloud.intensity[front])
        frames.append(Frame(np.rint(img * 255).astype(np.uint8), cloud, calib, f"{prefix}/{i:06d}"))
    return frames


def depth_mask(cloud: PointCloud, calib: CalibrationSet, margin: float = 0.1) -> np.ndarray:
    """Points within a generous margin of the camera frustum."""
    cam = cloud.points @ calib.extrinsic.rotation.T + calib.extrinsic.translation
    z = cam[:, 2]
    width, _ = calib.image_size
    half = math.atan(width / 2 / calib.fu) + margin + math.radians(15)
    return (z > 0.5) & (np.abs(np.arctan2(cam[:, 0], z)) < half)


# --------------------------------------------------------------------------- epochs


@dataclass
class Batch:
    images: np.ndarray  # N x 3 x H x W float32
    depths: np.ndarray  # N x 1 x H x W float32
    labels: np.ndarray  # N int64
    pairs: list

    def __len__(self) -> int:
        return len(self.labels)

    def manifest(self) -> list[str]:
        return [f"{p.frame_id}:{p.perturbation.source_config}" for p in self.pairs]


def collate(pairs: Sequence[SamplePair]) -> Batch:
    images = np.stack([np.transpose(p.image, (2, 0, 1)) for p in pairs]).astype(np.float32)
    depths = np.stack([p.depth.values[None] for p in pairs]).astype(np.float32)
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    return Batch(images, depths, labels, list(pairs))


def sample_seed(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator; independent of worker layout."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def build_epoch(frames: Sequence[Frame], configs: tuple[ErrorRangeConfig, ErrorRangeConfig],
                batch_size: int, seed: int, epoch: int = 0, workers: int = 0,
                check_every: int = 8, input_size: tuple[int, int] = INPUT_SIZE) -> Iterator[Batch]:
    """Balanced, deterministically shuffled batches for one epoch.

    ``configs`` is ``(calibrated_config, miscalibrated_config)``.  Frames are
    shuffled, the first half is paired with the calibrated config and the
    second half with the miscalibrated one; each batch takes half of its
    samples from each side and incomplete batches are dropped.
    """
    if batch_size < 2 or batch_size % 2:
        raise ConfigError(f"batch_size must be a positive even number, got {batch_size}")
    neg_cfg, pos_cfg = configs
    if neg_cfg.label != CALIBRATED or pos_cfg.label != MISCALIBRATED:
        raise ConfigError("configs must be (calibrated, miscalibrated)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x5eed]))
    order = rng.permutation(len(frames))
    half = len(frames) // 2
    neg_idx, pos_idx = order[:half], order[half:2 * half]
    per_side = batch_size // 2
    n_batches = half // per_side

    jobs = []
    for b in range(n_batches):
        items = [(int(i), neg_cfg) for i in neg_idx[b * per_side:(b + 1) * per_side]]
        items += [(int(i), pos_cfg) for i in pos_idx[b * per_side:(b + 1) * per_side]]
        perm = rng.permutation(len(items))
        jobs.append([items[k] for k in perm])

    def make(job_item):
        slot, (frame_idx, cfg) = job_item
        return sample_from_frame(frames[frame_idx], cfg, sample_seed(seed, epoch, slot),
                                 input_size=input_size)

    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    try:
        for b, job in enumerate(jobs):
            slots = [(b * batch_size + k, item) for k, item in enumerate(job)]
            pairs = list(pool.map(make, slots)) if pool else [make(s) for s in slots]
            labels = [p.label for p in pairs]
            if labels.count(CALIBRATED) != per_side:
                raise AssertionError("unbalanced batch")
            if check_every and b % check_every == 0:
                for p in pairs:
                    check_pair(p)
            yield collate(pairs)
    finally:
        if pool:
            pool.shutdown()


def check_pair(p: SamplePair) -> None:
    if p.image.shape[:2] != p.depth.shape:
        raise AssertionError(f"{p.frame_id}: image/depth shape mismatch")
    vals = p.depth.values
    if vals.min() < 0 or vals.max() > 1:
        raise AssertionError(f"{p.frame_id}: depth outside [0, 1]")
    if p.image.min() < 0 or p.image.max() > 1:
        raise AssertionError(f"{p.frame_id}: image outside [0, 1]")
    if p.label != p.perturbation.label:
        raise AssertionError(f"{p.frame_id}: label mismatch")


def eval_pairs(frames: Sequence[Frame], positive, negative: ErrorRangeConfig,
               seed: int, input_size: tuple[int, int] = INPUT_SIZE) -> list[SamplePair]:
    """Balanced evaluation set: every frame once as a negative, once as a positive.

    ``positive`` is an ErrorRangeConfig or ``"intrinsic <difficulty>"``.
    """
    pairs = []
    for i, fr in enumerate(frames):
        pairs.append(sample_from_frame(fr, negative, sample_seed(seed, 0, 2 * i), input_size=input_size))
        pairs.append(sample_from_frame(fr, positive, sample_seed(seed, 0, 2 * i + 1),
                                       input_size=input_size))
    return pairs


# --------------------------------------------------------------------------- export

MANIFEST_FIELDS = ["frame_id", "label", "source_config", "rot1_deg", "rot2_deg", "rot3_deg",
                   "trans1_m", "trans2_m", "trans3_m", "intrinsic", "image", "depth"]


def export_pairs(pairs: Sequence[SamplePair], out_dir: str | Path, split: str = "train") -> Path:
    """Write images, 16-bit depth PNGs and a CSV manifest under ``out_dir/split``."""
    split_dir = Path(out_dir) / split
    (split_dir / "image").mkdir(parents=True, exist_ok=True)
    (split_dir / "depth").mkdir(parents=True, exist_ok=True)
    manifest = split_dir / "manifest.csv"
    tmp = manifest.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for i, p in enumerate(pairs):
            stem = f"{i:06d}"
            img = np.clip(np.rint(p.image * 255), 0, 255).astype(np.uint8)
            Image.fromarray(img).save(split_dir / "image" / f"{stem}.png")
            dep = np.rint(p.depth.values.astype(np.float64) * 65535).astype(np.uint16)
            Image.fromarray(dep).save(split_dir / "depth" / f"{stem}.png")
            pert = p.perturbation
            intr = json.dumps(vars(pert.intrinsic_error)) if pert.intrinsic_error else ""
            writer.writerow([p.frame_id, p.label, pert.source_config, *pert.rot_errors,
                             *pert.trans_error, intr, f"image/{stem}.png", f"depth/{stem}.png"])
    os.replace(tmp, manifest)
    return manifest


def load_exported(split_dir: str | Path) -> list[SamplePair]:
    split_dir = Path(split_dir)
    pairs = []
    with open(split_dir / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            with Image.open(split_dir / row["image"]) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            with Image.open(split_dir / row["depth"]) as im:
                dep = (np.asarray(im, dtype=np.float64) / 65535).astype(np.float32)
            intr = IntrinsicError(**json.loads(row["intrinsic"])) if row["intrinsic"] else None
            pert = Perturbation(
                tuple(float(row[f"rot{k}_deg"]) for k in (1, 2, 3)),
                tuple(float(row[f"trans{k}_m"]) for k in (1, 2, 3)),
                int(row["label"]), row["source_config"], intr)
            pairs.append(SamplePair(img, DepthMap(dep), int(row["label"]), pert, row["frame_id"]))
    return pairs
