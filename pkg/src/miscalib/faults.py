"""Calibration fault injection.

Extrinsic faults perturb roll/pitch/yaw and the translation of the
LiDAR-to-camera transform; intrinsic faults rescale focal lengths and the
principal point and add axis skew.  Magnitudes are drawn per component from
named error bands; the sign of every component is drawn independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CalibrationSet, ExtrinsicTransform, rot_x, rot_y, rot_z

CALIBRATED = 0
MISCALIBRATED = 1


@dataclass(frozen=True)
class ErrorRangeConfig:
    name: str
    trans_range: tuple[float, float]
    rot_range: tuple[float, float]
    label: int

    def __post_init__(self):
        for band in (self.trans_range, self.rot_range):
            lo, hi = band
            if not 0 <= lo <= hi:
                raise ValueError(f"{self.name}: invalid band {band}")
        if self.label not in (CALIBRATED, MISCALIBRATED):
            raise ValueError(f"{self.name}: label must be 0 or 1")
        object.__setattr__(self, "trans_range", tuple(float(x) for x in self.trans_range))
        object.__setattr__(self, "rot_range", tuple(float(x) for x in self.rot_range))


# (trans [m], rot [deg], label)
_BUILTIN = {
    "Calibrated": ((0.0, 0.02), (0.0, 0.3), CALIBRATED),
    "Miscalibrated": ((0.04, 0.1), (0.5, 5.0), MISCALIBRATED),
    "Noise": ((0.0, 0.005), (0.0, 0.1), CALIBRATED),
    "Unseen": ((0.1, 0.2), (5.0, 10.0), MISCALIBRATED),
    "All Errors": ((0.1, 0.2), (0.5, 1.0), MISCALIBRATED),
    "Rot hard": ((0.0, 0.0), (0.5, 1.0), MISCALIBRATED),
    "Rot easy": ((0.0, 0.0), (1.0, 5.0), MISCALIBRATED),
    "Trans hard": ((0.04, 0.1), (0.0, 0.0), MISCALIBRATED),
    "Trans easy": ((0.1, 0.2), (0.0, 0.0), MISCALIBRATED),
}

BUILTIN_CONFIGS: dict[str, ErrorRangeConfig] = {
    name: ErrorRangeConfig(name, t, r, lab) for name, (t, r, lab) in _BUILTIN.items()
}

# percentage bands n for intrinsic errors
INTRINSIC_BANDS: dict[str, tuple[float, float]] = {
    "easy": (10.0, 20.0),
    "medium": (5.0, 10.0),
    "hard": (3.0, 5.0),
}

EVAL_CONFIGS = ("Miscalibrated", "Unseen", "All Errors", "Rot easy", "Rot hard",
                "Trans easy", "Trans hard")


def _norm(name: str) -> str:
    return "".join(name.lower().replace("_", " ").replace("-", " ").split())


def get_config(name: str, table: dict[str, ErrorRangeConfig] | None = None) -> ErrorRangeConfig:
    """Look up a config by name, ignoring case, spaces, dashes and underscores."""
    table = BUILTIN_CONFIGS if table is None else table
    wanted = _norm(name)
    for key, cfg in table.items():
        if _norm(key) == wanted:
            return cfg
    raise KeyError(f"unknown error-range config {name!r}; known: {', '.join(table)}")


def load_configs(path: str | Path) -> dict[str, ErrorRangeConfig]:
    """Read configs from a text file.

    One config per line: ``name = trans_lo trans_hi rot_lo rot_hi label``.
    Blank lines and ``#`` comments are ignored.
    """
    table = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'name = values'")
        name, values = (s.strip() for s in line.split("=", 1))
        parts = values.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: {name!r} needs 5 values, got {len(parts)}")
        try:
            t_lo, t_hi, r_lo, r_hi = (float(p) for p in parts[:4])
            label = int(parts[4])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {name!r}: {exc}") from None
        table[name] = ErrorRangeConfig(name, (t_lo, t_hi), (r_lo, r_hi), label)
    return table


def dump_configs(table: dict[str, ErrorRangeConfig]) -> str:
    lines = ["# name = trans_lo trans_hi rot_lo rot_hi label   (meters, degrees)"]
    for cfg in table.values():
        lines.append(f"{cfg.name} = {cfg.trans_range[0]:g} {cfg.trans_range[1]:g} "
                     f"{cfg.rot_range[0]:g} {cfg.rot_range[1]:g} {cfg.label}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class IntrinsicError:
    focal_scale_u: float
    focal_scale_v: float
    principal_scale_u: float
    principal_scale_v: float
    skew_value: float
    difficulty: str


@dataclass(frozen=True)
class Perturbation:
    rot_errors: tuple[float, float, float]  # degrees
    trans_error: tuple[float, float, float]  # meters
    label: int
    source_config: str
    intrinsic_error: IntrinsicError | None = None

    @classmethod
    def zero(cls, label: int = CALIBRATED, source_config: str = "zero") -> Perturbation:
        return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), label, source_config)

    @property
    def is_zero(self) -> bool:
        return (not any(self.rot_errors) and not any(self.trans_error)
                and self.intrinsic_error is None)

    def to_dict(self) -> dict:
        out = {
            "rot_errors_deg": list(self.rot_errors),
            "trans_error_m": list(self.trans_error),
            "label": self.label,
            "source_config": self.source_config,
        }
        if self.intrinsic_error is not None:
            out["intrinsic_error"] = vars(self.intrinsic_error).copy()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> Perturbation:
        intr = d.get("intrinsic_error")
        return cls(tuple(d["rot_errors_deg"]), tuple(d["trans_error_m"]), int(d["label"]),
                   d["source_config"], IntrinsicError(**intr) if intr else None)


def _signed_band(rng: np.random.Generator, band: tuple[float, float], n: int) -> np.ndarray:
    lo, hi = band
    mag = rng.uniform(lo, hi, size=n)
    sign = rng.choice((-1.0, 1.0), size=n)
    if hi == 0.0:
        return np.zeros(n)
    return mag * sign


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_perturbation(config: ErrorRangeConfig, rng_seed) -> Perturbation:
    """Draw one extrinsic fault from ``config``; deterministic in ``rng_seed``."""
    rng = _as_rng(rng_seed)
    rot = _signed_band(rng, config.rot_range, 3)
    trans = _signed_band(rng, config.trans_range, 3)
    return Perturbation(tuple(float(x) for x in rot), tuple(float(x) for x in trans),
                        config.label, config.name)


def sample_intrinsic_error(difficulty: str, rng_seed, fu: float) -> IntrinsicError:
    """Draw an intrinsic fault: every parameter gets its own n and sign.

    The skew is ``n%`` of the focal length ``fu`` of the calibration it will
    be applied to, in pixels.
    """
    try:
        band = INTRINSIC_BANDS[difficulty]
    except KeyError:
        raise KeyError(f"unknown intrinsic difficulty {difficulty!r}") from None
    rng = _as_rng(rng_seed)
    pct = _signed_band(rng, band, 5) / 100.0
    return IntrinsicError(
        focal_scale_u=float(1.0 + pct[0]),
        focal_scale_v=float(1.0 + pct[1]),
        principal_scale_u=float(1.0 + pct[2]),
        principal_scale_v=float(1.0 + pct[3]),
        skew_value=float(pct[4] * fu),
        difficulty=difficulty,
    )


def sample_intrinsic_perturbation(difficulty: str, rng_seed, fu: float) -> Perturbation:
    """Intrinsic-only fault, labeled miscalibrated, extrinsics exact."""
    err = sample_intrinsic_error(difficulty, rng_seed, fu)
    return Perturbation((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), MISCALIBRATED,
                        f"intrinsic {difficulty}", err)


def apply_extrinsic(calib: CalibrationSet, p: Perturbation) -> CalibrationSet:
    """Right-multiply the per-axis rotation errors and add the translation error.

    Applies ``p.intrinsic_error`` too, when present.
    """
    out = calib
    if any(p.rot_errors) or any(p.trans_error):
        a1, a2, a3 = (math.radians(a) for a in p.rot_errors)
        rot = calib.extrinsic.rotation @ rot_x(a1) @ rot_y(a2) @ rot_z(a3)
        trans = calib.extrinsic.translation + np.asarray(p.trans_error)
        out = calib.replace(extrinsic=ExtrinsicTransform(rot, trans))
    if p.intrinsic_error is not None:
        out = apply_intrinsic(out, p.intrinsic_error)
    return out


def apply_intrinsic(calib: CalibrationSet, e: IntrinsicError) -> CalibrationSet:
    """Scale f_u, f_v, c_u, c_v and set the skew to ``e.skew_value``."""
    proj = np.array(calib.projection)
    fu = proj[0, 0] * e.focal_scale_u
    fv = proj[1, 1] * e.focal_scale_v
    if fu <= 0 or fv <= 0:
        raise ValueError("intrinsic error drives a focal length non-positive")
    proj[0, 0] = fu
    proj[1, 1] = fv
    proj[0, 2] *= e.principal_scale_u
    proj[1, 2] *= e.principal_scale_v
    proj[0, 1] = e.skew_value
    return calib.replace(projection=proj)
