"""Command line front end: ``echocotr {synth,train,eval,flops,sample}``.

Settings come from an optional ``--config`` file of ``key=value`` lines
(``#`` starts a comment) and are overridden by explicit flags. Exit codes:
0 success, 2 usage error, 3 data or format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import (Split, SynthSpec, load_manifest, load_video, synth_generate, write_dataset)
from .errors import ConfigError, DataError, NumericalError
from .flops import count_flops
from .model import ModelConfig, load_weights, parse_config_value, preset, save_weights
from .sampling import Mode, SampleSpec, mirrored_indices, uniform_indices
from .train import TrainConfig, evaluate, stream, train, write_epoch_log

log = logging.getLogger("echocotr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

MODEL_KEYS = ("stage_depths", "stage_dims", "head_dim", "ffn_ratio", "drop_path_max",
              "dpe_kernel", "local_window")

# key -> (type, default); None defaults mean "unset"
RUN_KEYS = {
    "preset": (str, "S"),
    "frames": (int, 36),
    "freq": (int, 4),
    "mode": (str, "uniform"),
    "batch": (int, None),
    "epochs": (int, 45),
    "lr": (float, 1e-4),
    "wd": (float, 1e-4),
    "seed": (int, 0),
    "workers": (int, 1),
    "out": (str, "runs/latest"),
    "manifest": (str, None),
    "videos": (str, None),
    "es_ed": (str, None),
    "norm_mean": (float, 0.5),
    "norm_std": (float, 0.25),
    **{k: (str, None) for k in MODEL_KEYS},
}
DEFAULT_BATCH = {"S": 25, "B": 16}


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    values = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        if key not in RUN_KEYS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}; valid keys: {', '.join(RUN_KEYS)}")
        values[key] = value.strip()
    return values


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then config file, then explicitly passed flags."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, (kind, default) in RUN_KEYS.items():
        value = getattr(args, key, None)
        if value is None:
            value = file_values.get(key, default)
        try:
            resolved[key] = None if value is None else kind(value)
        except ValueError:
            raise UsageError(f"bad value {value!r} for {key}") from None
    if resolved["batch"] is None:
        resolved["batch"] = DEFAULT_BATCH.get(resolved["preset"].upper(), 16)
    return resolved


def model_config(values: dict) -> ModelConfig:
    cfg = preset(values["preset"])
    overrides = {k: parse_config_value(k, values[k]) for k in MODEL_KEYS if values.get(k)}
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def sample_spec(values: dict, start: Optional[int] = None) -> SampleSpec:
    try:
        mode = Mode(values["mode"])
    except ValueError:
        raise UsageError(f"unknown mode {values['mode']!r}; use uniform, es_ed or mirrored") from None
    return SampleSpec(values["frames"], values["freq"], mode, start)


def write_resolved(values: dict, model_cfg: ModelConfig, path: Path) -> None:
    lines = [f"# echocotr {__version__} resolved configuration"]
    for key in RUN_KEYS:
        if key in MODEL_KEYS:
            v = getattr(model_cfg, key)
            v = ",".join(map(str, v)) if isinstance(v, tuple) else v
        else:
            v = values[key]
        if v is not None:
            lines.append(f"{key}={v}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_videos(manifest, records, workers: int) -> dict:
    def one(rec):
        path = manifest.video_path(rec)
        if not path.exists():
            raise DataError(f"missing video file {path}")
        return rec.file_name, load_video(path, rec.file_name)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return dict(pool.map(one, records))


def _manifest(values: dict):
    if not values["manifest"]:
        raise UsageError("--manifest is required")
    mpath = Path(values["manifest"])
    if not mpath.exists():
        raise DataError(f"manifest {mpath} not found")
    es_ed = values["es_ed"]
    if es_ed is None and (mpath.parent / "es_ed.csv").exists():
        es_ed = mpath.parent / "es_ed.csv"
    return load_manifest(mpath, values["videos"], es_ed)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    spec = SynthSpec(height=args.height or args.size, width=args.width or args.size,
                     frames_per_cycle=args.frames_per_cycle, num_cycles=args.cycles,
                     ef_range=(args.ef_min, args.ef_max), noise_sigma=args.noise)
    videos, records = synth_generate(args.count, spec, args.seed)
    path = write_dataset(args.out, videos, records)
    print(f"wrote {len(records)} studies to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    values = resolve(args)
    mcfg = model_config(values)
    spec = sample_spec(values)
    manifest = _manifest(values)
    train_recs, val_recs = manifest.split(Split.TRAIN), manifest.split(Split.VAL)
    if not train_recs or not val_recs:
        raise DataError("manifest needs non-empty TRAIN and VAL splits")
    videos = _load_videos(manifest, train_recs + val_recs, values["workers"])
    first = videos[train_recs[0].file_name].frames.shape
    mcfg = dataclasses.replace(mcfg, input_size=(spec.num_frames,) + first[1:])
    cfg = TrainConfig(epochs=values["epochs"], batch_size=values["batch"], lr=values["lr"],
                      weight_decay=values["wd"], seed=values["seed"], spec=spec, model=mcfg,
                      norm_mean=values["norm_mean"], norm_std=values["norm_std"])
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(values, mcfg, out / "resolved_config.txt")
    model, history = train(train_recs, val_recs, videos, cfg)
    save_weights(model, out / "weights.ecw")
    write_epoch_log(out / "epoch_log.csv", history)
    if history:
        best = min(history, key=lambda e: e.val.mae)
        print(f"best epoch {best.epoch}: {best.val.line()}")
    print(f"weights: {out / 'weights.ecw'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    values = resolve(args)
    model = load_weights(args.weights)
    spec = sample_spec(values)
    manifest = _manifest(values)
    split = Split.parse(args.split)
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split.value} has no studies in {values['manifest']}")
    videos = _load_videos(manifest, records, values["workers"])
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, records, videos, spec, values["norm_mean"], values["norm_std"],
                      predictions_path=out / f"predictions_{split.value.lower()}.csv")
    print(report.line())
    return EXIT_OK


def cmd_flops(args) -> int:
    values = resolve(args)
    cfg = model_config(values)
    h = args.height or args.size
    w = args.width or args.size
    count = count_flops(cfg, (values["frames"], h, w))
    label = values["preset"].upper() if not any(values.get(k) for k in MODEL_KEYS) else "custom"
    print(f"{label} {values['frames']}x{h}x{w} {count}")
    return EXIT_OK


def cmd_sample(args) -> int:
    values = resolve(args)
    clip = load_video(args.video)
    T = clip.num_frames
    spec = sample_spec(values, args.start)
    padded_from = None
    if spec.mode is Mode.UNIFORM:
        idx, start, t_pad = uniform_indices(T, spec, stream(values["seed"], "sampling"))
        stride = spec.frequency
        padded_from = T if t_pad > T else None
    else:
        if args.es is None or args.ed is None:
            raise UsageError(f"--es and --ed are required for {spec.mode.value} mode")
        for i in (args.es, args.ed):
            if not 0 <= i < T:
                raise DataError(f"frame index {i} outside video of {T} frames")
        if args.es == args.ed:
            raise DataError("ES and ED frames must differ")
        if spec.mode is Mode.ES_ED:
            idx = np.array(sorted((args.es, args.ed)))
            stride = int(idx[1] - idx[0])
        else:
            idx = mirrored_indices(args.es, args.ed, spec.num_frames)
            stride = 1
        start = int(idx[0])
    print(",".join([clip.source_id, str(start), str(stride), str(len(idx))] + [str(i) for i in idx]))
    if padded_from is not None:
        print(f"# padded_from={padded_from}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_run_flags(p: argparse.ArgumentParser, *, data: bool = True, training: bool = False) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--preset", choices=["S", "B", "s", "b"])
    p.add_argument("--frames", type=int)
    p.add_argument("--freq", type=int)
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--seed", type=int)
    for key in MODEL_KEYS:
        p.add_argument("--" + key.replace("_", "-"), dest=key)
    if data:
        p.add_argument("--manifest")
        p.add_argument("--videos", help="video directory (default: next to the manifest)")
        p.add_argument("--es-ed", dest="es_ed", help="FileName,ESFrame,EDFrame sidecar")
        p.add_argument("--workers", type=int)
        p.add_argument("--out")
        p.add_argument("--norm-mean", dest="norm_mean", type=float)
        p.add_argument("--norm-std", dest="norm_std", type=float)
    if training:
        p.add_argument("--batch", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--wd", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echocotr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic beating-ellipse dataset")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--frames-per-cycle", type=int, default=16)
    p.add_argument("--cycles", type=int, default=3)
    p.add_argument("--ef-min", type=float, default=20.0)
    p.add_argument("--ef-max", type=float, default=80.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and save the best-validation weights")
    _add_run_flags(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved weights on one split")
    _add_run_flags(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="count multiply-accumulates of one forward pass")
    _add_run_flags(p, data=False)
    p.add_argument("--size", type=int, default=112)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("sample", help="print the frame indices a clip would use")
    _add_run_flags(p, data=False)
    p.add_argument("--video", required=True)
    p.add_argument("--start", type=int, help="fixed clip start (default: seeded random)")
    p.add_argument("--es", type=int)
    p.add_argument("--ed", type=int)
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"echocotr: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"echocotr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"echocotr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
