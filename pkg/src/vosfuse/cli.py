"""Command-line entry point.

Subcommands: ``evaluate``, ``fuse``, ``select``, ``pipeline``, ``synth`` and
``report``. Exit status is 0 on success, 1 on a data or validation error (one
diagnostic line on stderr) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from vosfuse import __version__
from vosfuse.errors import ConfigInvalid, MissingFile, VosError
from vosfuse.fusion import FusionMethod, PseudoLabelSet, build_pseudo_labels
from vosfuse.mask_io import (
    LAYOUT_KINDS,
    PredictionSet,
    atomic_directory,
    load_ground_truth,
    load_prediction_set,
    load_sequences,
    save_prediction_set,
    save_sequences,
    validate_against_ground_truth,
    write_json,
    write_text,
)
from vosfuse.metrics import MetricConfig, ScoreTable, evaluate_dataset, format_score, round_half_up
from vosfuse.selection import (
    Granularity,
    PerformanceDB,
    assemble_final,
    recommend,
    record_scores,
)
from vosfuse.synth import BENCHMARK_PROFILES, NoiseProfile, SynthConfig, generate_sequence, synthesize_predictions

logger = logging.getLogger("vosfuse")

REPORT_NAME = "run_report.json"


def _models(value: str | None) -> list[str] | None:
    if not value:
        return None
    models = [m.strip() for m in value.split(",") if m.strip()]
    return models or None


def _size(value: str) -> tuple[int, int]:
    try:
        w, h = value.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {value!r}") from None


def _objects(value: str) -> tuple[int, int]:
    try:
        lo, _, hi = value.partition("-")
        return int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN-MAX, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker threads per stage")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file whose keys override flags")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="vosfuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--config", default=None)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def metric_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--j-weight", type=float, default=0.5, help="J weight in J&F; F gets the rest")
        p.add_argument("--include-first-frame", action="store_true", help="also score the annotated frame 0")

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    p.add_argument("--pred-root", required=True)
    p.add_argument("--gt-root", required=True)
    p.add_argument("--models", type=_models, default=None)
    p.add_argument("--out", required=True, help="directory for <model>.json / <model>.csv")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    metric_flags(p)

    p = sub.add_parser("fuse", parents=[common], help="fuse model predictions into pseudo-labels")
    p.add_argument("--pred-root", required=True)
    p.add_argument("--models", type=_models, default=None)
    p.add_argument("--method", choices=[m.value for m in FusionMethod], default=FusionMethod.PGMR.value)
    p.add_argument("--db", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("select", parents=[common], help="pick a model per video against pseudo-labels")
    p.add_argument("--pred-root", required=True)
    p.add_argument("--models", type=_models, default=None)
    p.add_argument("--pseudo-root", required=True)
    p.add_argument("--db", default=None)
    p.add_argument("--db-out", default=None, help="write the updated performance db here")
    p.add_argument("--granularity", choices=[g.value for g in Granularity], default=Granularity.VIDEO.value)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    metric_flags(p)

    p = sub.add_parser("pipeline", parents=[common], help="fuse, select, assemble and optionally evaluate")
    p.add_argument("--pred-root", required=True)
    p.add_argument("--models", type=_models, default=None)
    p.add_argument("--gt-root", default=None)
    p.add_argument("--method", choices=[m.value for m in FusionMethod], default=FusionMethod.PGMR.value)
    p.add_argument("--granularity", choices=[g.value for g in Granularity], default=Granularity.VIDEO.value)
    p.add_argument("--db", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--timings", action="store_true", help="record stage timings (makes the report non-reproducible)")
    metric_flags(p)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic benchmark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=4)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--size", type=_size, default=(96, 96), metavar="WxH")
    p.add_argument("--objects", type=_objects, default=(1, 4), metavar="MIN-MAX")
    p.add_argument("--occlusion-rate", type=float, default=0.1)
    p.add_argument("--disappear-rate", type=float, default=0.2)
    p.add_argument("--profiles", default=None, help="JSON list of noise profiles")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", parents=[common], help="render a run report")
    p.add_argument("--input", required=True, help=f"a {REPORT_NAME} or the run directory holding it")
    p.add_argument("--format", choices=("json", "csv", "text"), default="text")
    p.add_argument("--out", default=None, help="output file (default: stdout)")
    return parser


def _apply_config(args: argparse.Namespace) -> None:
    if not args.config:
        return
    path = Path(args.config)
    if not path.is_file():
        raise MissingFile(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigInvalid(f"{path}: expected a JSON object")
    for key, value in payload.items():
        dest = key.replace("-", "_")
        if dest in ("command", "config") or not hasattr(args, dest):
            raise ConfigInvalid(f"{path}: unknown option {key!r} for '{args.command}'")
        if dest == "models" and isinstance(value, str):
            value = _models(value)
        elif dest == "size" and isinstance(value, str):
            value = _size(value)
        elif dest in ("size", "objects") and isinstance(value, list):
            value = tuple(value)
        setattr(args, dest, value)


def _metric_config(args: argparse.Namespace) -> MetricConfig:
    try:
        return MetricConfig(
            j_weight=args.j_weight,
            f_weight=1.0 - args.j_weight,
            skip_first_frame=not args.include_first_frame,
        )
    except ValueError as exc:
        raise ConfigInvalid(str(exc)) from exc


def _require_dir(path: str | None, what: str) -> None:
    if path is not None and not Path(path).is_dir():
        raise MissingFile(f"{what} not found: {path}")


def _require_file(path: str | None, what: str) -> None:
    if path is not None and not Path(path).is_file():
        raise MissingFile(f"{what} not found: {path}")


def _load_db(path: str | None) -> PerformanceDB | None:
    if path is None:
        return None
    try:
        return PerformanceDB.load(path)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{path}: unreadable performance db ({exc})") from exc


def _check_layout(preds: PredictionSet, gt: dict) -> None:
    report = validate_against_ground_truth(preds, gt)
    for finding in report.of_kind("UnknownObject", "ExtraVideo"):
        logger.warning("%s", finding)
    blocking = report.of_kind(*LAYOUT_KINDS)
    if blocking:
        more = f" (+{len(blocking) - 1} more)" if len(blocking) > 1 else ""
        raise VosError(f"{blocking[0]}{more}")


def _write_table(table: ScoreTable, path: Path, fmt: str) -> None:
    if fmt == "csv":
        write_text(path, table.to_csv())
    else:
        write_json(path, table.to_dict())


def _summary_line(name: str, table: ScoreTable) -> str:
    j, f, jf = table.global_score
    return f"{name}\tJ={format_score(j)}\tF={format_score(f)}\tJ&F={format_score(jf)}"


# -- subcommands --------------------------------------------------------------


def cmd_evaluate(args: argparse.Namespace) -> int:
    _require_dir(args.pred_root, "prediction root")
    _require_dir(args.gt_root, "ground-truth root")
    cfg = _metric_config(args)
    preds = load_prediction_set(args.pred_root, args.models, jobs=args.jobs)
    gt = load_ground_truth(args.gt_root, jobs=args.jobs)
    _check_layout(preds, gt)
    out = Path(args.out)
    for model in preds.models:
        table = evaluate_dataset(preds.videos[model], gt, cfg, jobs=args.jobs)
        _write_table(table, out / f"{model}.{args.format}", args.format)
        print(_summary_line(model, table))
    return 0


def _write_pseudo(pseudo: PseudoLabelSet, out: Path) -> None:
    with atomic_directory(out / "pseudo") as tmp:
        save_sequences(pseudo.videos, tmp)
    if pseudo.consistency:
        with atomic_directory(out / "consistency") as tmp:
            for video in sorted(pseudo.consistency):
                write_json(tmp / f"{video}.json", pseudo.consistency_summary(video))


def cmd_fuse(args: argparse.Namespace) -> int:
    _require_dir(args.pred_root, "prediction root")
    _require_file(args.db, "performance db")
    db = _load_db(args.db)
    preds = load_prediction_set(args.pred_root, args.models, jobs=args.jobs)
    pseudo = build_pseudo_labels(preds, db, args.method, jobs=args.jobs)
    _write_pseudo(pseudo, Path(args.out))
    logger.info("fused %d videos with %s", len(pseudo.videos), args.method)
    return 0


def _select(preds: PredictionSet, pseudo: PseudoLabelSet, db: PerformanceDB | None, args, cfg):
    choice = recommend(preds, pseudo, db, args.granularity, cfg)
    final = assemble_final(preds, choice)
    new_db = record_scores(db, preds, pseudo, cfg)
    return choice, final, new_db


def cmd_select(args: argparse.Namespace) -> int:
    _require_dir(args.pred_root, "prediction root")
    _require_dir(args.pseudo_root, "pseudo-label root")
    _require_file(args.db, "performance db")
    cfg = _metric_config(args)
    db = _load_db(args.db)
    preds = load_prediction_set(args.pred_root, args.models, jobs=args.jobs)
    pseudo = PseudoLabelSet(load_sequences(args.pseudo_root, jobs=args.jobs), FusionMethod.PGMR)
    choice, final, new_db = _select(preds, pseudo, db, args, cfg)
    with atomic_directory(args.out) as tmp:
        save_sequences(final, tmp)
    if args.report:
        write_json(args.report, choice.to_dict())
    if args.db_out:
        new_db.save(args.db_out)
    for video in sorted(choice.assignments):
        assigned = choice.assignments[video]
        print(f"{video}\t{assigned if isinstance(assigned, str) else ','.join(assigned)}")
    return 0


def _consistency_overview(pseudo: PseudoLabelSet) -> dict:
    out = {}
    for video in sorted(pseudo.consistency):
        frames = pseudo.consistency_summary(video)
        out[video] = {
            k: round(sum(fr[k] for fr in frames) / len(frames), 6) for k in ("unanimous", "majority", "conflict")
        }
    return out


def _config_echo(args: argparse.Namespace) -> dict:
    skip = {"func", "verbose", "timings", "config"}
    echo = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        echo[key] = list(value) if isinstance(value, tuple) else value
    return echo


def cmd_pipeline(args: argparse.Namespace) -> int:
    _require_dir(args.pred_root, "prediction root")
    _require_dir(args.gt_root, "ground-truth root")
    _require_file(args.db, "performance db")
    cfg = _metric_config(args)
    out = Path(args.out)
    timings: dict[str, float] = {}

    def stage(name: str, started: float) -> None:
        timings[name] = round(time.perf_counter() - started, 3)
        logger.info("stage %s took %.2fs", name, timings[name])

    t = time.perf_counter()
    db = _load_db(args.db)
    preds = load_prediction_set(args.pred_root, args.models, jobs=args.jobs)
    gt = load_ground_truth(args.gt_root, jobs=args.jobs) if args.gt_root else None
    if gt is not None:
        _check_layout(preds, gt)
    stage("ingest", t)

    t = time.perf_counter()
    pseudo = build_pseudo_labels(preds, db, args.method, jobs=args.jobs)
    _write_pseudo(pseudo, out)
    stage("fuse", t)

    t = time.perf_counter()
    choice, final, new_db = _select(preds, pseudo, db, args, cfg)
    stage("select", t)

    t = time.perf_counter()
    with atomic_directory(out / "final") as tmp:
        save_sequences(final, tmp)
    write_json(out / "selection.json", choice.to_dict())
    new_db.save(out / "performance_db.json")
    stage("assemble", t)

    report: dict = {
        "tool": "vosfuse",
        "version": __version__,
        "config": _config_echo(args),
        "metric_config": asdict(cfg),
        "models": list(preds.models),
        "videos": preds.video_ids,
        "consistency": _consistency_overview(pseudo),
        "selection": choice.to_dict(),
    }
    if gt is not None:
        t = time.perf_counter()
        table = evaluate_dataset(final, gt, cfg, jobs=args.jobs)
        _write_table(table, out / f"scores.{args.format}", args.format)
        report["scores"] = table.to_dict()
        report["model_scores"] = {
            m: dict(zip(("J", "F", "JF"), map(round_half_up, evaluate_dataset(preds.videos[m], gt, cfg).global_score)))
            for m in preds.models
        }
        print(_summary_line("final", table))
        stage("evaluate", t)
    if args.timings:
        report["timings"] = timings
    write_json(out / REPORT_NAME, report)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    if args.profiles:
        _require_file(args.profiles, "profiles file")
        try:
            raw = json.loads(Path(args.profiles).read_text(encoding="utf-8"))
            profiles = [NoiseProfile.from_dict(p) for p in raw]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid(f"{args.profiles}: {exc}") from exc
    else:
        profiles = list(BENCHMARK_PROFILES)
    width, height = args.size
    cfg = SynthConfig(
        seed=args.seed, videos=args.videos, frames_per_video=args.frames, width=width, height=height,
        objects_per_video=tuple(args.objects), occlusion_rate=args.occlusion_rate,
        disappear_rate=args.disappear_rate,
    )
    gt = generate_sequence(cfg)
    preds = synthesize_predictions(gt, profiles, args.seed)
    out = Path(args.out)
    with atomic_directory(out / "gt") as tmp:
        save_sequences(gt, tmp / "Annotations")
    with atomic_directory(out / "predictions") as tmp:
        save_prediction_set(preds, tmp)
    write_json(out / "profiles.json", [p.to_dict() for p in profiles])
    logger.info("wrote %d videos x %d frames for %d models to %s", cfg.videos, cfg.frames_per_video, len(profiles), out)
    return 0


def render_report(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    scores = report.get("scores")
    if fmt == "csv":
        lines = ["video,object,J,F,JF"]
        if scores:
            for video, entry in sorted(scores["videos"].items()):
                for obj, s in sorted(entry["objects"].items(), key=lambda kv: int(kv[0])):
                    lines.append(f"{video},{obj},{s['J']:.4f},{s['F']:.4f},{s['JF']:.4f}")
            g = scores["global"]
            lines.append(f"GLOBAL,,{g['J']:.4f},{g['F']:.4f},{g['JF']:.4f}")
        return "\n".join(lines) + "\n"
    selection = report.get("selection", {})
    lines = [f"vosfuse {report.get('version', '?')}  method={report.get('config', {}).get('method', '?')}"
             f"  granularity={selection.get('granularity', '?')}"]
    for video, assigned in sorted(selection.get("assignments", {}).items()):
        if not isinstance(assigned, str):
            assigned = ",".join(sorted(set(assigned)))
        score = selection.get("scores", {}).get(video, {})
        best = max(score.values()) if score else float("nan")
        lines.append(f"{video}\t{assigned}\tpseudo J&F={best:.4f}")
    for model, s in sorted(report.get("model_scores", {}).items()):
        lines.append(f"model {model}\tJ={s['J']:.4f}\tF={s['F']:.4f}\tJ&F={s['JF']:.4f}")
    if scores:
        g = scores["global"]
        lines.append(f"final\tJ={g['J']:.4f}\tF={g['F']:.4f}\tJ&F={g['JF']:.4f}")
    return "\n".join(lines) + "\n"


def cmd_report(args: argparse.Namespace) -> int:
    path = Path(args.input)
    if path.is_dir():
        path = path / REPORT_NAME
    _require_file(str(path), "run report")
    try:
        report = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from exc
    text = render_report(report, args.format)
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "evaluate": cmd_evaluate,
    "fuse": cmd_fuse,
    "select": cmd_select,
    "pipeline": cmd_pipeline,
    "synth": cmd_synth,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _apply_config(args)
        if args.jobs < 1:
            raise ConfigInvalid("--jobs must be >= 1")
        return COMMANDS[args.command](args)
    except VosError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
