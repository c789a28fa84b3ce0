"""Command-line entry point: generate, train, eval, render, inspect, map."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import dataset, metrics
from .dataset import CorpusError, SceneSpec
from .model import NamsModel
from .persistence import Checkpoint, CheckpointError, load, save
from .renderer import band_bins, spatial_magnitude_map
from .spectral import GRID
from .trainer import TrainConfig, TrainingAborted, pole_energies, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _vector(text: str, size: int = 3) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected {size} comma-separated numbers, got {text!r}") from exc
    if len(vals) != size:
        raise ConfigError(f"expected {size} comma-separated numbers, got {text!r}")
    return vals


def _write_json(path: Path, obj, sort_keys: bool = True) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=sort_keys) + "\n")


def _load_checkpoint(path) -> Checkpoint:
    try:
        return load(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc


def _load_corpus(path):
    try:
        return dataset.load_corpus(path)
    except CorpusError:
        raise
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"cannot load corpus {path}: {exc}") from exc


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    scene = SceneSpec(receivers=args.receivers, seed=args.seed, t60=args.t60, max_order=args.max_order)
    if args.room:
        scene.dims = _vector(args.room)
    if args.source:
        scene.source = _vector(args.source)
    if args.receivers < 1:
        raise ConfigError("--receivers must be >= 1")
    try:
        dataset.ShoeboxSpec(scene.dims, (scene.beta,) * 6, scene.source, np.asarray(scene.dims) / 2, scene.max_order)
        corpus = dataset.generate_corpus(scene)
    except ValueError as exc:
        raise ConfigError(f"invalid geometry: {exc}") from exc
    path = dataset.write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} RIRs and {path}")
    return EXIT_OK


# ---------------------------------------------------------------- train

RUN_KEYS = {"corpus", "out", "split_seed"}


def resolve_train_config(args) -> dict:
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(TrainConfig)} | RUN_KEYS
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    overrides = {
        "corpus": args.corpus,
        "out": args.out,
        "split_seed": args.split_seed,
        "init": args.init,
        "sh_order": args.sh_order,
        "epochs": args.epochs,
        "seed": args.seed,
        "batch_size": args.batch_size,
    }
    if args.no_prune:
        overrides["pruning"] = False
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    cfg.setdefault("split_seed", 0)
    for key in ("corpus", "out"):
        if not cfg.get(key):
            raise ConfigError(f"missing required setting {key!r}")
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    try:
        tc = TrainConfig(**{k: v for k, v in cfg.items() if k not in RUN_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    resolved = dict(tc.as_dict(), **{k: cfg[k] for k in RUN_KEYS})
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", resolved)
    corpus = _load_corpus(cfg["corpus"])
    try:
        train_set, test_set = dataset.split(corpus, seed=cfg["split_seed"])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    with open(out / "epochs.tsv", "w") as log_file:

        def log(line):
            log_file.write(line + "\n")
            log_file.flush()
            if not args.quiet:
                print(line, flush=True)

        try:
            result = train(tc, train_set, test_set, log=log)
        except TrainingAborted as exc:
            if exc.checkpoint is not None:
                save(exc.checkpoint, out / "best.ckpt")
            print(f"training aborted: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    result.best.meta["room_bounds"] = _room_bounds(corpus)
    save(result.best, out / "best.ckpt")
    _write_json(out / "prune_log.json", [e.as_dict() for e in result.prune_events])
    print(f"best epoch {result.best.best_epoch}, test loss {result.best.best_test_loss:.6g}, "
          f"{result.model.poles.count} poles at the end")
    return EXIT_OK


def _room_bounds(corpus) -> list:
    if corpus.room and "dims" in corpus.room:
        return [[0.0, 0.0, 0.0], [float(v) for v in corpus.room["dims"]]]
    lo, hi = corpus.receivers.min(axis=0), corpus.receivers.max(axis=0)
    return [[float(v) for v in lo], [float(v) for v in hi]]


# ---------------------------------------------------------------- eval


def evaluate(model: NamsModel, corpus) -> tuple:
    """Per-receiver metric reports and mean render time in milliseconds."""
    reports, times = [], []
    for receiver, target in zip(corpus.receivers, corpus.rirs):
        t0 = time.perf_counter()
        pred = model.render_numpy(receiver)
        times.append(time.perf_counter() - t0)
        reports.append(metrics.evaluate_pair(pred, target))
    return reports, 1000 * float(np.mean(times))


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    if not np.allclose(corpus.source, ckpt.source):
        raise DataError(f"corpus source {corpus.source.tolist()} differs from checkpoint source {ckpt.source}")
    if args.split != "all":
        train_set, test_set = dataset.split(corpus, seed=args.split_seed)
        corpus = test_set if args.split == "test" else train_set
    model = ckpt.to_model()
    reports, ms = evaluate(model, corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(metrics.COLUMNS)
    lines = ["\t".join(["x", "y", "z"] + [metrics.COLUMNS[k] for k in keys])]
    for pos, rep in zip(corpus.receivers, reports):
        vals = ["nan" if getattr(rep, k) is None else repr(getattr(rep, k)) for k in keys]
        lines.append("\t".join([repr(float(v)) for v in pos] + vals))
    (out / "per_receiver.tsv").write_text("\n".join(lines) + "\n")
    agg = metrics.aggregate(reports)
    summary = {
        "columns": {metrics.COLUMNS[k]: agg[k] for k in keys},
        "counts": {metrics.COLUMNS[k]: agg[f"{k}_count"] for k in keys},
        "receivers": len(reports),
        "inference_ms_per_rir": ms,
        "poles": len(ckpt.pole_ids),
    }
    _write_json(out / "summary.json", summary, sort_keys=False)
    print(json.dumps(summary["columns"], sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- render / inspect / map


def cmd_render(args) -> int:
    model = _load_checkpoint(args.checkpoint).to_model()
    h = model.render_numpy(np.asarray(_vector(args.receiver)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(out, GRID.sample_rate, h.astype(np.float32))
    print(f"wrote {out} ({len(h)} samples)")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    energy = pole_energies(model)
    pos = model.poles.positions.value
    lines = ["id\tx\ty\tz\tenergy"]
    for pid, p, e in zip(model.poles.ids, pos, energy):
        lines.append("\t".join([str(pid)] + [repr(float(v)) for v in (*p, e)]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print(f"{len(energy)} alive poles of {ckpt.total_poles}")
    return EXIT_OK


def magnitude_map(model: NamsModel, height: float, band_hz: float, res: int, bounds) -> tuple:
    """Band-mean magnitude over a res x res grid on the plane z = height."""
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    xs = np.linspace(lo[0], hi[0], res)
    ys = np.linspace(lo[1], hi[1], res)
    signals = model.signal_head()
    grid = spatial_magnitude_map(lambda r: model.render_spectrum(r, signals), xs, ys, height, band_hz)
    return xs, ys, grid


def cmd_map(args) -> int:
    axis, _, value = args.plane.partition("=")
    if axis != "z":
        raise ConfigError("only horizontal planes 'z=H' are supported")
    try:
        height = float(value)
    except ValueError as exc:
        raise ConfigError(f"bad plane height {value!r}") from exc
    if args.res < 2:
        raise ConfigError("--res must be >= 2")
    try:
        band_bins(args.band)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    bounds = ckpt.meta.get("room_bounds")
    if bounds is None:
        c, s = np.asarray(model.config.center), model.config.scale / np.sqrt(3)
        bounds = [c - s, c + s]
    xs, ys, grid = magnitude_map(model, height, args.band, args.res, bounds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["x\ty\tmagnitude"]
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            lines.append(f"{float(x)!r}\t{float(y)!r}\t{float(grid[i, j])!r}")
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {args.res}x{args.res} map to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nams", description="Multipole RIR field synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write an image-source shoebox corpus")
    p.add_argument("--room", help="Lx,Ly,Lz in meters (default 6,4,3)")
    p.add_argument("--source", help="x,y,z in meters (default 1.5,1.0,1.4)")
    p.add_argument("--receivers", type=int, default=200)
    p.add_argument("--t60", type=float, default=0.3, help="Eyring target for the wall reflection coefficient")
    p.add_argument("--max-order", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit a model to a corpus")
    p.add_argument("--config", help="JSON file with training and run settings")
    p.add_argument("--corpus", help="corpus directory or manifest")
    p.add_argument("--init", help="dense or sparse:N")
    p.add_argument("--sh-order", type=int, choices=range(4))
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric report on a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="synthesize one RIR as a WAV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--receiver", required=True, help="x,y,z in meters")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("inspect", help="per-pole positions and signal energies")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("map", help="band magnitude over a horizontal plane")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plane", default="z=1.2")
    p.add_argument("--band", type=float, default=4000.0)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CorpusError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
