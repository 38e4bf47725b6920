"""Command-line entry point: ``miscalib <command> [options]``.

Every command writes ``run_manifest.json`` into its output directory before
doing any work and marks it complete at the end.  Failures print one JSON
line on stderr followed by a human-readable detail line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import stat
import subprocess
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import torch

from .dataset import (INPUT_SIZE, KITTI_SPLIT, CalibParseError, ConfigError, SplitSpec,
                      export_pairs, load_kitti_split, make_sample, sample_seed,
                      synth_frames)
from .faults import INTRINSIC_BANDS, get_config, load_configs

log = logging.getLogger("miscalib")

DATA_ROOT_ENV = "MISCALIB_DATA_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------- manifest


def _version() -> str:
    try:
        ver = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        ver = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{ver}+{rev}" if rev else ver


class RunManifest:
    """Provenance record for one command invocation."""

    def __init__(self, out_dir: Path, command: str, argv: list[str], config: dict, seed,
                 inputs: list[str], outputs: list[str]):
        self.path = Path(out_dir) / MANIFEST_NAME
        self.data = {"command": command, "argv": argv, "config": config, "seed": seed,
                     "inputs": inputs, "outputs": outputs, "version": _version(),
                     "started": datetime.now(timezone.utc).isoformat(), "completed": None,
                     "wall_clock_s": None, "status": "running"}
        self._t0 = time.perf_counter()

    def _write(self) -> None:
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.data, indent=2, default=str) + "\n")
        os.replace(tmp, self.path)

    def start(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists() and json.loads(self.path.read_text()).get("status") == "complete":
            raise UsageError(f"{self.path} belongs to a completed run; choose a fresh output directory")
        self._write()

    def complete(self, **results) -> None:
        if self.data["status"] == "complete":
            raise RuntimeError("manifest already completed")
        self.data.update(status="complete", completed=datetime.now(timezone.utc).isoformat(),
                         wall_clock_s=round(time.perf_counter() - self._t0, 3), results=results)
        self._write()
        self.path.chmod(stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    return json.loads((path / MANIFEST_NAME if path.is_dir() else path).read_text())


# --------------------------------------------------------------------------- data arguments


def _add_data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data-root", default=None,
                   help=f"KITTI odometry root (default: ${DATA_ROOT_ENV})")
    g.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic scenes instead of KITTI")
    g.add_argument("--synth-seed", type=int, default=None, help="seed for synthetic scenes")
    g.add_argument("--limit", type=int, default=None, help="cap the number of KITTI frames per split")
    g.add_argument("--train-sequences", default=None, help="comma-separated KITTI training sequences")
    g.add_argument("--test-sequence", default=None, help="KITTI test sequence")


def _data_root(args) -> str | None:
    return args.data_root or os.environ.get(DATA_ROOT_ENV)


def _check_data_args(args) -> None:
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise UsageError("--synthetic must be >= 1")
    elif not _data_root(args):
        raise UsageError(f"give --synthetic N, --data-root or set {DATA_ROOT_ENV}")


def _split(args) -> SplitSpec:
    train = tuple(args.train_sequences.split(",")) if args.train_sequences else KITTI_SPLIT.train_sequences
    return SplitSpec(train, args.test_sequence or KITTI_SPLIT.test_sequence)


def _frames(args, which: str, input_size: tuple[int, int], default_seed: int):
    """Frames for ``which`` in {"train", "test"} from KITTI or the synthetic generator."""
    if args.synthetic is not None:
        seed = default_seed if args.synth_seed is None else args.synth_seed
        scale = input_size[0] * input_size[1] / (INPUT_SIZE[0] * INPUT_SIZE[1])
        return synth_frames(args.synthetic, seed, n_points=max(1000, int(24000 * scale)),
                            prefix=f"synth{seed}", image_size=input_size)
    root = Path(_data_root(args))
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    train, test = load_kitti_split(root, _split(args), args.limit)
    frames = train if which == "train" else test
    if not frames:
        raise DataError(f"no {which} frames under {root}")
    return frames


def _data_inputs(args) -> list[str]:
    return [f"synthetic:{args.synthetic}"] if args.synthetic is not None else [str(_data_root(args))]


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    if w < 32 or h < 32 or w % 32 or h % 32:
        raise argparse.ArgumentTypeError("width and height must be multiples of 32")
    return w, h


def _config_names(text: str, table=None) -> list[str]:
    """Split a comma list and resolve every name up front so nothing is written on a typo."""
    names = [n.strip() for n in text.split(",") if n.strip()]
    if not names:
        raise UsageError("empty configuration list")
    out = []
    for n in names:
        key = n.lower().replace("intrinsic", "").strip()
        if n.lower().startswith("intrinsic") and key in INTRINSIC_BANDS:
            out.append(f"intrinsic {key}")
        else:
            out.append(get_config(n, table).name)
    return out


# --------------------------------------------------------------------------- commands


def cmd_generate(args) -> dict:
    table = load_configs(args.ranges) if args.ranges else None
    names = _config_names(args.config, table)
    _check_data_args(args)
    out = Path(args.out)
    manifest = RunManifest(out, "generate", args.argv, {"configs": names, "size": args.size},
                           args.seed, _data_inputs(args),
                           [str(out / n.replace(" ", "_")) for n in names])
    manifest.start()
    frames = _frames(args, args.split, args.size, 0 if args.split == "train" else 1)
    counts = {}
    for ci, name in enumerate(names):
        cfg = name if name.startswith("intrinsic") else get_config(name, table)
        pairs = [make_sample(f.image, f.cloud, f.calib, cfg, sample_seed(args.seed, ci, i),
                             f.frame_id, args.size)
                 for i, f in enumerate(frames)]
        export_pairs(pairs, out, name.replace(" ", "_"))
        counts[name] = {"pairs": len(pairs), "positives": sum(p.label for p in pairs)}
        print(f"{name}: {len(pairs)} pairs -> {out / name.replace(' ', '_')}")
    manifest.complete(counts=counts)
    return counts


def _train_config(args, stage: str):
    from .training import TrainConfig
    overrides = {k: v for k, v in {"epochs": args.epochs, "batch_size": args.batch_size,
                                   "seed": args.seed, "variant": args.variant,
                                   "workers": args.workers}.items() if v is not None}
    if args.size:
        overrides.update(input_width=args.size[0], input_height=args.size[1])
    overrides["stage"] = stage
    if args.train_config:
        return TrainConfig.from_file(args.train_config, **overrides)
    return TrainConfig(**overrides)


def cmd_train_pretext(args) -> dict:
    from .training import train_pretext
    cfg = _train_config(args, "pretext")
    cfg.configs()
    _check_data_args(args)
    out = Path(args.out)
    manifest = RunManifest(out, "train-pretext", args.argv, vars(cfg).copy(), cfg.seed,
                           _data_inputs(args), [str(out / "checkpoints"), str(out / "metrics.csv")])
    manifest.start()
    frames = _frames(args, "train", cfg.input_size, 0)
    ckpt = train_pretext(frames, cfg, out, resume=args.resume)
    print(f"checkpoint: {ckpt}")
    manifest.complete(checkpoint=str(ckpt))
    return {"checkpoint": str(ckpt)}


def cmd_train_classifier(args) -> dict:
    from .model import read_header
    from .training import train_classifier
    if not Path(args.encoder).is_file():
        raise DataError(f"encoder checkpoint not found: {args.encoder}")
    header = read_header(args.encoder)
    if args.variant is None:
        args.variant = header["variant"]
    if args.size is None:
        args.size = tuple(header["input_size"])
    cfg = _train_config(args, "classifier")
    _check_data_args(args)
    out = Path(args.out)
    manifest = RunManifest(out, "train-classifier", args.argv, vars(cfg).copy(), cfg.seed,
                           _data_inputs(args) + [str(args.encoder)],
                           [str(out / "checkpoints"), str(out / "metrics.csv")])
    manifest.start()
    frames = _frames(args, "train", cfg.input_size, 0)
    ckpt = train_classifier(args.encoder, frames, cfg, out)
    print(f"checkpoint: {ckpt}")
    manifest.complete(checkpoint=str(ckpt))
    return {"checkpoint": str(ckpt)}


def _load_model(path: str):
    from .model import load_checkpoint
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_evaluate(args) -> dict:
    from .evaluation import evaluate_configs
    names = _config_names(args.configs)
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    _check_data_args(args)
    model, header = _load_model(args.checkpoint)
    size = tuple(header["input_size"])
    out = Path(args.out)
    manifest = RunManifest(out, "evaluate", args.argv,
                           {"configs": names, "threshold": args.threshold, "input_size": size},
                           args.seed, _data_inputs(args) + [args.checkpoint],
                           [str(out / "metrics.csv"), str(out / "metrics.txt")])
    manifest.start()
    frames = _frames(args, "test", size, 1)
    report = evaluate_configs(model, frames, names, args.threshold, args.seed, input_size=size)
    report.write(out)
    print(report.table(), end="")
    results = {e.config: e.as_floats() for e in report.entries}
    manifest.complete(metrics=results)
    return results


def cmd_cka(args) -> dict:
    from .cka import capture, cka_grid, export
    from .dataset import collate
    _check_data_args(args)
    model, header = _load_model(args.checkpoint)
    size = tuple(header["input_size"])
    cfg = get_config("Calibrated" if args.condition == "calibrated" else "Miscalibrated")
    out = Path(args.out)
    manifest = RunManifest(out, "cka", args.argv, {"condition": args.condition, "input_size": size},
                           args.seed, _data_inputs(args) + [args.checkpoint],
                           [str(out / f"cka_{args.condition}.csv"), str(out / f"cka_{args.condition}.png")])
    manifest.start()
    frames = _frames(args, "test", size, 1)
    pairs = [make_sample(f.image, f.cloud, f.calib, cfg, sample_seed(args.seed, 0, i), f.frame_id, size)
             for i, f in enumerate(frames)]
    batch = collate(pairs)
    trace_i, trace_l = capture(model, torch.from_numpy(batch.images), torch.from_numpy(batch.depths),
                               seed=args.seed)
    matrix = cka_grid(trace_i, trace_l)
    csv_path, png_path = export(matrix, out, args.condition)
    deep = float(matrix.deepest_block().mean())
    print(f"deepest-block mean CKA ({args.condition}): {deep:.4f}")
    manifest.complete(deepest_block_mean=deep, csv=str(csv_path), heatmap=str(png_path))
    return {"deepest_block_mean": deep}


def cmd_bench(args) -> dict:
    from .evaluation import bench
    if args.iters < 1 or args.warmup < 0:
        raise UsageError("--iters must be >= 1 and --warmup >= 0")
    model, header = _load_model(args.checkpoint)
    size = args.size or tuple(header["input_size"])
    out = Path(args.out)
    manifest = RunManifest(out, "bench", args.argv,
                           {"iters": args.iters, "warmup": args.warmup, "input_size": size},
                           args.seed, [args.checkpoint], [str(out / "bench.csv")])
    manifest.start()
    res = bench(model, size, args.warmup, args.iters, args.seed)
    (out / "bench.csv").write_text(res.to_csv())
    print(res.to_csv(), end="")
    manifest.complete(mean_ms=res.mean_ms, median_ms=res.median_ms, parameters=res.parameters)
    return {"mean_ms": res.mean_ms, "parameters": res.parameters}


# --------------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _report(EXIT_USAGE, "usage", message, self.format_usage().strip())
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="miscalib", description="LiDAR-camera miscalibration detection pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="materialize a labeled dataset of perturbed pairs")
    _add_data_args(g)
    g.add_argument("--config", required=True, help="comma-separated configuration names")
    g.add_argument("--ranges", help="text file with extra error-range configurations")
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--size", type=_size, default=INPUT_SIZE, help="WIDTHxHEIGHT (default 512x256)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    for name, func in (("train-pretext", cmd_train_pretext), ("train-classifier", cmd_train_classifier)):
        t = sub.add_parser(name, help=f"{name.split('-')[1]} training stage")
        _add_data_args(t)
        if name == "train-classifier":
            t.add_argument("--encoder", required=True, help="stage-1 checkpoint")
        else:
            t.add_argument("--resume", action="store_true", help="continue from the run directory")
        t.add_argument("--train-config", help="key = value config file (defaults to the reference recipe)")
        t.add_argument("--epochs", type=int)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--seed", type=int)
        t.add_argument("--workers", type=int)
        t.add_argument("--variant", choices=("resnet18_small", "resnet18_all"))
        t.add_argument("--size", type=_size, help="WIDTHxHEIGHT")
        t.add_argument("--out", required=True, help="run directory")
        t.set_defaults(func=func)

    e = sub.add_parser("evaluate", help="metrics per test configuration")
    _add_data_args(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--configs", required=True, help='e.g. "Rot hard,Trans easy,intrinsic hard"')
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("cka", help="layer-wise CKA between the two encoders")
    _add_data_args(c)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--condition", choices=("calibrated", "miscalibrated"), required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cka)

    b = sub.add_parser("bench", help="inference latency and parameter counts")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--size", type=_size, help="override the checkpoint's input size")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def _report(code: int, kind: str, message: str, detail: str = "") -> None:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    if detail:
        print(detail, file=sys.stderr)


def _classify(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, FloatingPointError):
        return EXIT_NUMERIC, "numeric"
    if isinstance(exc, (UsageError, ConfigError, KeyError)):
        return EXIT_USAGE, "usage"
    if isinstance(exc, (DataError, CalibParseError, OSError, ValueError)):
        return EXIT_DATA, "data"
    raise exc


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code, kind = _classify(exc)
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        manifest = Path(getattr(args, "out", "") or ".") / MANIFEST_NAME
        if getattr(args, "out", None) and manifest.exists():
            data = json.loads(manifest.read_text())
            if data.get("status") == "running":
                data.update(status="failed", error=str(msg))
                manifest.write_text(json.dumps(data, indent=2) + "\n")
        _report(code, kind, str(msg), f"{type(exc).__name__}: {msg}")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
