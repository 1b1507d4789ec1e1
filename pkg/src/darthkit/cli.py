"""Command-line driver: synth, pretrain, adapt, sfod, track, eval, compare.

Every verb reads one YAML run config (``--config``), honours ``--seed`` and
``--out``, writes its resolved config next to its outputs and exits with a
documented status code.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from . import __version__
from .mot_io import LabeledVideo, Video, atomic_write, read_mot, write_mot
from .metrics import METRIC_ORDER, evaluate

log = logging.getLogger("darthkit")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_SEQUENCES = 4
EXIT_CLASSES = 5


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- configuration


def _plain(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _tupled(v: Any) -> Any:
    if isinstance(v, list):
        return tuple(_tupled(x) for x in v)
    return v


def _section(obj, exclude: Sequence[str] = ()) -> dict:
    return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj) if f.name not in exclude}


def default_config() -> dict:
    """The complete run config with every key at its default."""
    from .adapt import AdaptConfig, PretrainConfig
    from .model import DetectConfig, ModelConfig
    from .synthbench import SOURCE_STYLE, TARGET_STYLE
    from .tracker import TrackerConfig
    from .views import AugConfig

    def style(prefix, s):
        return {
            f"{prefix}_background": s.background_intensity,
            f"{prefix}_noise_sigma": s.noise_sigma,
            f"{prefix}_hue_shift": s.global_hue_shift,
            f"{prefix}_blur_radius": s.blur_radius,
        }

    return {
        "seed": 0,
        "synth": {
            "source_sequences": 6,
            "target_sequences": 4,
            "num_frames": 30,
            "width": 128,
            "height": 96,
            "objects_min": 2,
            "objects_max": 4,
            **style("source", SOURCE_STYLE),
            **style("target", TARGET_STYLE),
        },
        "model": _section(ModelConfig()),
        "augment": _section(AugConfig()),
        "pretrain": _section(PretrainConfig(), exclude=("seed", "aug", "model")),
        "adapt": {**_section(AdaptConfig(), exclude=("seed", "aug", "detect")), "sfod_conf_thr": 0.7},
        "detect": _section(DetectConfig()),
        "tracker": _section(TrackerConfig()),
        "eval": {"iou_thr": 0.5},
        "paths": {"data": "data", "runs": "runs"},
    }


def check_keys(doc: Any, reference: dict, where: str = "") -> None:
    """Reject unknown and missing keys (recursively through sections)."""
    if not isinstance(doc, dict):
        raise CliError(f"config section {where or '<root>'!r} must be a mapping", EXIT_CONFIG)
    for key in doc:
        if key not in reference:
            raise CliError(f"unknown config key: {where}{key}", EXIT_CONFIG)
    for key, ref in reference.items():
        if key not in doc:
            raise CliError(f"missing config key: {where}{key}", EXIT_CONFIG)
        if isinstance(ref, dict):
            check_keys(doc[key], ref, f"{where}{key}.")


def load_config(path: Optional[str], seed: Optional[int] = None) -> dict:
    if path is None:
        cfg = default_config()
    else:
        try:
            cfg = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}", EXIT_CONFIG)
        except yaml.YAMLError as exc:
            raise CliError(f"cannot parse config {path}: {exc}", EXIT_CONFIG)
        check_keys(cfg, default_config())
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _build(cls, section: dict, **extra):
    try:
        return cls(**{k: _tupled(v) for k, v in section.items()}, **extra)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid {cls.__name__} settings: {exc}", EXIT_CONFIG)


def benchmark_config(cfg: dict):
    from .synthbench import BenchmarkConfig, DomainStyle

    s = cfg["synth"]

    def style(prefix):
        return _build(DomainStyle, {
            "background_intensity": s[f"{prefix}_background"],
            "noise_sigma": s[f"{prefix}_noise_sigma"],
            "global_hue_shift": s[f"{prefix}_hue_shift"],
            "blur_radius": s[f"{prefix}_blur_radius"],
        })

    return BenchmarkConfig(
        seed=cfg["seed"],
        source_sequences=s["source_sequences"],
        target_sequences=s["target_sequences"],
        num_frames=s["num_frames"],
        width=s["width"],
        height=s["height"],
        objects_range=(s["objects_min"], s["objects_max"]),
        source_style=style("source"),
        target_style=style("target"),
    )


def model_config(cfg: dict):
    from .model import ModelConfig

    return _build(ModelConfig, cfg["model"])


def aug_config(cfg: dict):
    from .views import AugConfig

    return _build(AugConfig, cfg["augment"])


def pretrain_config(cfg: dict):
    from .adapt import PretrainConfig

    return _build(PretrainConfig, cfg["pretrain"], seed=cfg["seed"], aug=aug_config(cfg), model=model_config(cfg))


def detect_config(cfg: dict):
    from .model import DetectConfig

    return _build(DetectConfig, cfg["detect"])


def adapt_config(cfg: dict):
    from .adapt import AdaptConfig

    section = {k: v for k, v in cfg["adapt"].items() if k != "sfod_conf_thr"}
    return _build(AdaptConfig, section, seed=cfg["seed"], aug=aug_config(cfg), detect=detect_config(cfg))


def tracker_config(cfg: dict):
    from .tracker import TrackerConfig

    return _build(TrackerConfig, cfg["tracker"])


# ---------------------------------------------------------------- data and outputs


def _sequence_dirs(split_dir: Path) -> list[Path]:
    if not split_dir.is_dir():
        raise CliError(f"dataset directory not found: {split_dir}")
    return sorted(p for p in split_dir.iterdir() if (p / "img1").is_dir())


def load_videos(split_dir: Path) -> list[Video]:
    """Frames only: nothing under ``gt/`` is read."""
    from .synthbench import load_video

    return [load_video(p) for p in _sequence_dirs(split_dir)]


def load_labeled(split_dir: Path) -> list[LabeledVideo]:
    from .synthbench import load_video

    out = []
    for p in _sequence_dirs(split_dir):
        gt = read_mot(p / "gt" / "gt.txt")
        video = load_video(p)
        out.append(LabeledVideo(video, type(gt)(gt.rows, len(video))))
    return out


def data_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_run_files(out: Path, cfg: dict, verb: str, inputs: Optional[dict] = None) -> None:
    """Resolved config and a manifest (config hash, seed, input content hashes)."""
    atomic_write(out / "config.yaml", yaml.safe_dump(cfg, sort_keys=True))
    manifest = {
        "verb": verb,
        "version": __version__,
        "seed": cfg["seed"],
        "config_sha256": config_hash(cfg),
        "inputs": inputs or {},
    }
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_weights(path: Path):
    from .model import load_checkpoint

    if not path.is_file() or not Path(str(path) + ".json").is_file():
        raise CliError(f"checkpoint not found: {path}", EXIT_CHECKPOINT)
    return load_checkpoint(path)


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- verbs


def cmd_synth(cfg: dict, out: Path) -> int:
    from .synthbench import make_benchmark, save_sequence, scene_specs

    bc = benchmark_config(cfg)
    bench = make_benchmark(bc)
    for split, data, style in (("source", bench.source, bc.source_style), ("target", bench.target, bc.target_style)):
        specs = scene_specs(bc, split, len(data))
        for lv, spec in zip(data, specs):
            save_sequence(lv, out / split, spec, style)
    write_run_files(out, cfg, "synth")
    log.info("wrote %d source and %d target sequences to %s", len(bench.source), len(bench.target), out)
    return EXIT_OK


def cmd_pretrain(cfg: dict, data: Path, out: Path) -> int:
    from .adapt import pretrain_source
    from .model import save_checkpoint

    dataset = load_labeled(data / "source")
    if not dataset:
        raise CliError(f"no source sequences under {data / 'source'}")
    trace = []
    w = pretrain_source(dataset, pretrain_config(cfg), progress=lambda i, v: trace.append({"iteration": i, "loss": v}))
    save_checkpoint(w, out / "checkpoint.npz")
    atomic_write(out / "loss_trace.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in trace))
    write_run_files(out, cfg, "pretrain", {"data_sha256": data_hash(data / "source")})
    return EXIT_OK


def _adapt_like(cfg: dict, data: Path, checkpoint: Path, out: Path, verb: str) -> int:
    from .adapt import adapt_run, sfod_baseline
    from .model import save_checkpoint

    source = _load_weights(checkpoint)
    videos = load_videos(data / "target")
    if verb == "adapt":
        lines: list[str] = []
        w = adapt_run(source, videos, adapt_config(cfg), on_step=lambda r: lines.append(r.to_json() + "\n"))
    else:
        trace: list[float] = []
        w = sfod_baseline(source, videos, cfg["adapt"]["sfod_conf_thr"], adapt_config(cfg), trace=trace)
        lines = [json.dumps({"step": i, "total": v}, sort_keys=True) + "\n" for i, v in enumerate(trace)]
    save_checkpoint(w, out / "checkpoint.npz")
    atomic_write(out / "loss_trace.jsonl", "".join(lines))
    write_run_files(out, cfg, verb, {
        "checkpoint_sha256": _file_hash(checkpoint),
        "data_sha256": data_hash(data / "target"),
    })
    return EXIT_OK


def cmd_track(cfg: dict, data: Path, split: str, checkpoint: Path, out: Path) -> int:
    from .tracker import track_sequence

    w = _load_weights(checkpoint)
    tcfg, dcfg = tracker_config(cfg), detect_config(cfg)
    for video in load_videos(data / split):
        write_mot(track_sequence(w, video, tcfg, dcfg), out / f"{video.name}.txt")
    write_run_files(out, cfg, "track", {"checkpoint_sha256": _file_hash(checkpoint), "split": split})
    return EXIT_OK


def cmd_eval(cfg: dict, gt_dir: Path, pred_dir: Path, out: Path) -> int:
    gt = {p.name: read_mot(p / "gt" / "gt.txt") for p in _sequence_dirs(gt_dir)}
    if not pred_dir.is_dir():
        raise CliError(f"prediction directory not found: {pred_dir}")
    pred = {p.stem: read_mot(p) for p in sorted(pred_dir.glob("*.txt"))}
    if set(gt) != set(pred):
        missing, extra = sorted(set(gt) - set(pred)), sorted(set(pred) - set(gt))
        raise CliError(f"sequence mismatch: missing predictions {missing}, unexpected {extra}", EXIT_SEQUENCES)
    report = evaluate(gt, pred, iou_thr=cfg["eval"]["iou_thr"])
    atomic_write(out / "metrics.json", report.to_json())
    write_run_files(out, cfg, "eval")
    avg = report.to_dict()["average"]
    log.info("  ".join(f"{k} {avg[k]}" for k in METRIC_ORDER))
    return EXIT_OK


def _fmt(v: Optional[float]) -> str:
    return "nan" if v is None else f"{v:.2f}"


def cmd_compare(cfg: dict, reports: Sequence[Path], names: Optional[Sequence[str]], out: Path) -> int:
    if len(reports) < 2:
        raise CliError("compare needs at least two reports")
    if names and len(names) != len(reports):
        raise CliError("--names must match the number of reports")
    loaded = []
    for p in reports:
        if not p.is_file():
            raise CliError(f"report not found: {p}")
        loaded.append(json.loads(p.read_text()))
    labels = list(names) if names else [p.parent.name if p.name == "metrics.json" else p.stem for p in reports]
    classes = [tuple(d["classes"]) for d in loaded]
    if len(set(classes)) != 1:
        raise CliError(f"inconsistent class sets across reports: {sorted(set(classes))}", EXIT_CLASSES)
    rows = [[d["average"][k] for k in METRIC_ORDER] for d in loaded]
    base = rows[0]

    def delta(a, b):
        return None if a is None or b is None else round(a - b, 6)

    header = ["method", *METRIC_ORDER, *(f"d{k}" for k in METRIC_ORDER)]
    csv_lines = [",".join(header)]
    for label, r in zip(labels, rows):
        d = [delta(a, b) for a, b in zip(r, base)]
        csv_lines.append(",".join([label, *map(_fmt, r), *map(_fmt, d)]))
    atomic_write(out / "comparison.csv", "\n".join(csv_lines) + "\n")

    width = max(len(x) for x in labels + ["method"])
    text = [f"{'method':<{width}}  " + "  ".join(f"{k:>7}" for k in METRIC_ORDER)]
    for label, r in zip(labels, rows):
        text.append(f"{label:<{width}}  " + "  ".join(f"{_fmt(v):>7}" for v in r))
    atomic_write(out / "comparison.txt", "\n".join(text) + "\n")

    _bar_charts(labels, rows, out)
    write_run_files(out, cfg, "compare", {"reports": [_file_hash(p) for p in reports]})
    print("\n".join(text))
    return EXIT_OK


def _bar_charts(labels: Sequence[str], rows: Sequence[Sequence[Optional[float]]], out: Path) -> None:
    import io

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for j, metric in enumerate(METRIC_ORDER):
        values = [r[j] if r[j] is not None else 0.0 for r in rows]
        fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
        ax.bar(range(len(labels)), values, color="tab:blue")
        ax.set_xticks(range(len(labels)), labels, rotation=20)
        ax.set_ylabel(metric)
        ax.set_title(metric)
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="png", metadata={"Software": None})
        plt.close(fig)
        atomic_write(out / f"{metric}.png", buf.getvalue())


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="override the config's global seed")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="darthkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--print-config", action="store_true", help="print the default config and exit")
    sub = p.add_subparsers(dest="verb")

    sub.add_parser("synth", parents=[common], help="render the source/target benchmark")
    sp = sub.add_parser("pretrain", parents=[common], help="supervised training on the source split")
    sp.add_argument("--data", help="dataset root written by synth")
    for verb in ("adapt", "sfod"):
        sp = sub.add_parser(verb, parents=[common], help=f"{verb} on the unlabeled target split")
        sp.add_argument("--data")
        sp.add_argument("--checkpoint", required=True)
    sp = sub.add_parser("track", parents=[common], help="track every sequence of a split")
    sp.add_argument("--data")
    sp.add_argument("--split", default="target", choices=("source", "target"))
    sp.add_argument("--checkpoint", required=True)
    sp = sub.add_parser("eval", parents=[common], help="score tracking output against ground truth")
    sp.add_argument("--gt", required=True, help="split directory holding <seq>/gt/gt.txt")
    sp.add_argument("--pred", required=True, help="directory holding <seq>.txt tracking results")
    sp = sub.add_parser("compare", parents=[common], help="tabulate and plot several metric reports")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--names", nargs="+")
    return p


def _threads() -> None:
    value = os.environ.get("DARTHKIT_THREADS")
    if value:
        import torch

        n = max(1, int(value))
        torch.set_num_threads(n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    if args.print_config:
        sys.stdout.write(yaml.safe_dump(default_config(), sort_keys=True))
        return EXIT_OK
    if not args.verb:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        _threads()
        cfg = load_config(args.config, args.seed)
        runs = Path(cfg["paths"]["runs"])
        data = Path(getattr(args, "data", None) or cfg["paths"]["data"])
        out = Path(args.out) if args.out else (data if args.verb == "synth" else runs / args.verb)
        out.mkdir(parents=True, exist_ok=True)
        if args.verb == "synth":
            return cmd_synth(cfg, out)
        if args.verb == "pretrain":
            return cmd_pretrain(cfg, data, out)
        if args.verb in ("adapt", "sfod"):
            return _adapt_like(cfg, data, Path(args.checkpoint), out, args.verb)
        if args.verb == "track":
            return cmd_track(cfg, data, args.split, Path(args.checkpoint), out)
        if args.verb == "eval":
            return cmd_eval(cfg, Path(args.gt), Path(args.pred), out)
        return cmd_compare(cfg, [Path(r) for r in args.reports], args.names, out)
    except CliError as exc:
        log.error("error: %s", exc)
        return exc.code
    except OSError as exc:
        log.error("error: %s", exc)
        return EXIT_ERROR
