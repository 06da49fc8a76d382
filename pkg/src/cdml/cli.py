"""Command-line entry point: ``cdml {prepare,train,grid,eval,embed,stream,score}``.

Exit codes: 0 success, 1 training abort, 2 input error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from cdml import nn, stream
from cdml.data import (CLASSES3, LABELS5, NormStats, build_windows, normalize_apply, normalize_fit,
                       parse_log, read_windows, split_dataset, stack, write_windows)
from cdml.errors import CDMLError, TrainingAbort
from cdml.eval import (ARCH_TITLES, LOSS_TITLES, compare_table, confusion_csv, confusion_text, embed,
                       evaluate, export_embeddings, knn_accuracy)
from cdml.train import (LOSSES, SplitArrays, TrainConfig, TrainReport, config_text, epochs_jsonl, load_config,
                        reports_csv, run_grid, train_cell)

log = logging.getLogger("cdml")

MANIFEST_VERSION = 1
EXIT_OK, EXIT_ABORT, EXIT_INPUT = 0, 1, 2


class InputError(CDMLError):
    """Missing or unusable upstream artifact."""


# ----------------------------------------------------------------- artifacts


def _require(path: Path) -> Path:
    if not path.exists():
        raise InputError(f"missing input file: {path}")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def load_prepared(data_dir) -> tuple[SplitArrays, dict, NormStats, tuple]:
    """Reload a ``prepare`` output directory as normalised train/test arrays.

    Returns ``(arrays, manifest, norm, (y5_train, y5_test))``.
    """
    d = Path(data_dir)
    manifest = json.loads(_require(d / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise InputError(f"{d / 'manifest.json'}: unsupported manifest version {manifest.get('version')}")
    norm = NormStats.load(_require(d / "norm.json"))
    windows = read_windows(_require(d / "windows.csv"))
    test_ids = set(manifest["split"]["test"])
    tr = [w for w in windows if w.record_id not in test_ids]
    te = [w for w in windows if w.record_id in test_ids]
    Xtr, ytr, y5tr = stack(tr)
    Xte, yte, y5te = stack(te)
    arrays = SplitArrays(normalize_apply(norm, Xtr), ytr, normalize_apply(norm, Xte), yte)
    return arrays, manifest, norm, (y5tr, y5te)


# ------------------------------------------------------------------ commands


def cmd_prepare(args) -> int:
    pairs = parse_log(_require(Path(args.input)))
    records = [r for r, _ in pairs]
    split = split_dataset(records, args.seed)
    test_ids = sorted(r.record_id for r in split.test)
    windows, per_record, skipped = [], {}, []
    for r in records:
        w = build_windows(r, args.stride)
        per_record[r.record_id] = len(w)
        if not w:
            skipped.append(r.record_id)
        windows.extend(w)
    train_windows = [w for w in windows if w.record_id not in set(test_ids)]
    norm = normalize_fit(train_windows)
    out = _out_dir(args)
    write_windows(windows, out / "windows.csv")
    norm.save(out / "norm.json")
    c3 = Counter(CLASSES3[w.label3] for w in windows)
    c5 = Counter(LABELS5[w.label5] for w in windows)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": args.seed,
        "stride": args.stride,
        "records": len(records),
        "windows": len(windows),
        "class_counts": {c: c3.get(c, 0) for c in CLASSES3},
        "label_counts": {c: c5.get(c, 0) for c in LABELS5},
        "windows_per_record": per_record,
        "skipped_records": skipped,
        "split": {"train": sorted(r.record_id for r in split.train), "test": test_ids},
    }
    (out / "manifest.json").write_text(_dump_json(manifest))
    print(f"{len(records)} records -> {len(windows)} windows ({len(skipped)} records skipped); "
          f"{len(split.train)} train / {len(split.test)} test records")
    return EXIT_OK


_CONFIG_FLAGS = ("epochs", "classifier_epochs", "batch_size", "lr", "margin", "alpha", "K", "refresh",
                 "M", "D", "P", "Kp", "seed")


def resolve_config(args, **fixed) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = load_config(_require(Path(args.config))) if args.config else TrainConfig()
    over = {k: getattr(args, k) for k in _CONFIG_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "normalize", False):
        over["normalize"] = True
    over.update({k: v for k, v in fixed.items() if v is not None})
    return dataclasses.replace(cfg, **over)


def cmd_train(args) -> int:
    data, manifest, _, _ = load_prepared(args.data)
    cfg = resolve_config(args, arch=args.arch, loss=args.loss)
    model, report = train_cell(cfg, data)
    if args.no_timestamps:
        report.wall_s = 0.0
    out = _out_dir(args)
    nn.save(model, out / "model.ckpt")
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "reports.csv").write_text(reports_csv([report]))
    (out / "epochs.jsonl").write_text(epochs_jsonl([report]))
    (out / "config.txt").write_text(config_text(cfg))
    print(f"{cfg.arch}/{cfg.loss} seed {cfg.seed}: train acc {report.train_acc:.4f}, "
          f"test acc {report.test_acc:.4f}, test loss {report.test_loss:.4f}")
    return EXIT_OK


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def cmd_grid(args) -> int:
    data, _, _, _ = load_prepared(args.data)
    base = resolve_config(args)
    archs, losses = _csv_list(args.archs), _csv_list(args.losses)
    seeds = [int(s) for s in _csv_list(args.seeds)] if args.seeds else list(base.seeds)
    for a in archs:
        if a not in nn.ARCHITECTURES:
            raise InputError(f"unknown architecture {a!r}")
    for l in losses:
        if l not in LOSSES:
            raise InputError(f"unknown loss {l!r}")
    out = _out_dir(args)
    reports = run_grid(archs, losses, seeds, data, out, base, jobs=args.jobs,
                       record_wall=not args.no_timestamps)
    print((out / "table.txt").read_text(), end="")
    aborted = sorted(p.name for p in (out / "cells").glob("*.abort"))
    print(f"{len(reports)} reports written to {out / 'reports.csv'}")
    if aborted:
        print(f"{len(aborted)} cell(s) aborted: {', '.join(aborted)}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args)
    if args.grid:
        reports = [TrainReport.from_json(p.read_text()) for p in sorted(Path(args.grid).glob("cells/*.json"))]
        table = compare_table(reports)
        (out / "table.txt").write_text(table.text())
        (out / "table.csv").write_text(table.csv())
        print(table.text(), end="")
        return EXIT_OK
    if not (args.data and args.model):
        raise InputError("eval needs --data and --model (or --grid)")
    data, _, _, _ = load_prepared(args.data)
    model = nn.load(_require(Path(args.model)))
    acc, loss, cm = evaluate(model, None, data.X_test, data.y_test)
    result = {"test_acc": acc, "test_loss": loss, "confusion": cm.tolist(), "model": Path(args.model).name}
    arch, loss_fn = _cell_from_name(Path(args.model).name)
    if arch is not None and arch in ARCH_TITLES:
        row = f"{LOSS_TITLES.get(loss_fn, loss_fn):<10}{ARCH_TITLES[arch]:<12}{loss:<10.4f}{acc:.4f}"
    else:
        row = f"{Path(args.model).stem:<22}{loss:<10.4f}{acc:.4f}"
    text = f"{'':<10}{'':<12}{'Loss':<10}Acc\n{row}\n\n" + confusion_text(cm, "Test-set confusion matrix")
    if args.knn:
        emb, _ = nn.split_head(model)
        kacc = knn_accuracy(embed(emb, data.X_train), data.y_train, embed(emb, data.X_test), data.y_test, args.knn)
        result["knn_acc"] = kacc
        text += f"\n{args.knn}-NN embedding accuracy: {kacc:.4f}\n"
    (out / "confusion.csv").write_text(confusion_csv(cm))
    (out / "confusion.txt").write_text(text)
    (out / "eval.json").write_text(_dump_json(result))
    print(text, end="")
    return EXIT_OK


def _cell_from_name(name: str):
    stem = name.rsplit(".", 1)[0]
    parts = stem.split("_")
    if parts[0] == "best" and len(parts) == 3:
        return parts[1], parts[2]
    if len(parts) >= 2 and parts[0] in ARCH_TITLES:
        return parts[0], parts[1]
    return None, None


def cmd_embed(args) -> int:
    data, _, _, (y5tr, y5te) = load_prepared(args.data)
    model = nn.load(_require(Path(args.model)))
    emb_model, _ = nn.split_head(model) if model.output_dim == 3 else (model, None)
    X = data.X_test if args.split == "test" else data.X_train
    y3 = data.y_test if args.split == "test" else data.y_train
    y5 = y5te if args.split == "test" else y5tr
    out = _out_dir(args)
    _, pca, _ = export_embeddings(emb_model, X, y3, y5, 2, out / "embeddings.csv")
    from cdml.eval import silhouette
    proj = np.loadtxt(out / "embeddings.csv", delimiter=",", skiprows=1, usecols=(0, 1), ndmin=2)
    s = silhouette(proj, y3) if len(X) > 1 else float("nan")
    info = {"samples": int(len(X)), "explained_variance": [float(v) for v in pca.variances],
            "degenerate": bool(pca.degenerate), "silhouette_pca2": s}
    (out / "embeddings.json").write_text(_dump_json(info))
    print(f"{len(X)} embeddings projected to 2 components; silhouette {s:.4f}")
    return EXIT_OK


def _frame_source(path: str):
    return sys.stdin if path == "-" else _require(Path(path))


def cmd_stream(args) -> int:
    model = nn.load(_require(Path(args.model)))
    norm = NormStats.load(_require(Path(args.norm))) if args.norm else None
    out = _out_dir(args)
    res = stream.replay(_frame_source(args.log), model, norm, speed=args.speed, hold=args.hold)
    timestamps = not args.no_timestamps
    (out / "predictions.jsonl").write_text(stream.predictions_jsonl(res, timestamps))
    (out / "events.jsonl").write_text("".join(
        json.dumps({"kind": e.kind, "class3": e.class3, "frame": e.frame,
                    "latency_ms": round(e.latency_ms, 4) if timestamps else None}) + "\n"
        for e in res.stream_events))
    stats = {"frames": res.n_frames, "predictions": len(res.predictions), "warmup": res.warmup,
             "dropped": res.dropped, "events": len(res.events)}
    if timestamps:
        stats["latency"] = res.latency()
        if args.speed == "realtime":
            stats["pacing"] = res.pacing()
    (out / "stream.json").write_text(_dump_json(stats))
    lines = [f"{len(res.predictions)} predictions, {len(res.events)} events, {res.warmup} warm-up frames"]
    if timestamps:
        lat = res.latency()
        lines.append(f"median inference {lat['median_ms']:.3f} ms (budget {lat['budget_ms']:.0f} ms)")
    if res.frame_labels and all(l is not None for l in res.frame_labels) and res.predictions:
        score = stream.score_replay(res)
        table = stream.score_table([(Path(args.log).name if args.log != "-" else "stdin", score)])
        (out / "score.txt").write_text(table)
        (out / "score.json").write_text(_dump_json(score.to_dict()))
        lines.append(table.rstrip("\n"))
    print("\n".join(lines))
    return EXIT_OK


def _read_predictions(path: Path) -> list[stream.Prediction]:
    preds = []
    for n, line in enumerate(_require(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            preds.append(stream.Prediction(int(d["frame"]), int(d["class3"]), np.array(d["probs"], float),
                                           float(d.get("infer_ms") or 0.0)))
        except (ValueError, KeyError, TypeError) as e:
            raise InputError(f"{path}: line {n}: bad prediction record ({e})") from None
    return preds


def _score_pair(pred_path, log_path, hold) -> stream.EventScore:
    preds = _read_predictions(Path(pred_path))
    labels = [f.label3 for f in stream.iter_frames(_require(Path(log_path)))]
    if not preds:
        raise InputError(f"{pred_path}: no predictions")
    if any(l is None for l in labels):
        raise InputError(f"{log_path}: frames without labels cannot be scored")
    events = stream.debounce([p.class3 for p in preds], hold)
    segs = stream.ground_truth_segments(labels, preds[0].frame)
    return stream.score_events(stream.event_spans(events, preds), segs, preds[0].frame, preds[-1].frame)


def cmd_score(args) -> int:
    cols = [("Source robot", _score_pair(args.predictions, args.log, args.hold))]
    if args.target_predictions or args.target_log:
        if not (args.target_predictions and args.target_log):
            raise InputError("--target-predictions and --target-log go together")
        cols.append(("Target robot", _score_pair(args.target_predictions, args.target_log, args.hold)))
    out = _out_dir(args)
    table = stream.score_table(cols)
    (out / "score.txt").write_text(table)
    (out / "score.json").write_text(_dump_json({name: s.to_dict() for name, s in cols}))
    print(table, end="")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--config", help="key=value config file (flags override it)")
    p.add_argument("--epochs", type=int, help=f"embedding epochs (default {d.epochs})")
    p.add_argument("--classifier-epochs", dest="classifier_epochs", type=int,
                   help=f"classifier epochs (default {d.classifier_epochs})")
    p.add_argument("--batch-size", dest="batch_size", type=int, help=f"batch size (default {d.batch_size})")
    p.add_argument("--lr", type=float, help=f"Adam learning rate (default {d.lr})")
    p.add_argument("--margin", type=float, help=f"triplet margin (default {d.margin})")
    p.add_argument("--alpha", type=float, help=f"magnet margin alpha (default {d.alpha})")
    p.add_argument("--K", type=int, help=f"magnet clusters per class (default {d.K})")
    p.add_argument("--refresh", type=int, help=f"magnet re-cluster period in steps, 0 = per epoch (default {d.refresh})")
    p.add_argument("--M", type=int, help=f"magnet imposter clusters per batch (default {d.M})")
    p.add_argument("--D", type=int, help=f"magnet samples per cluster (default {d.D})")
    p.add_argument("--P", type=int, help=f"triplet classes per batch (default {d.P})")
    p.add_argument("--Kp", type=int, help=f"triplet samples per class (default {d.Kp})")
    p.add_argument("--normalize", action="store_true", help="L2-normalise embeddings (default off)")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except where the help text already names one or there is none."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or action.default in (None, False, argparse.SUPPRESS):
            return text
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="cdml", description=__doc__, formatter_class=fmt)
    parser.add_argument("--log-level", default="WARNING", help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)
    default_out = os.environ.get("CDML_OUT", "cdml_out")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, formatter_class=fmt)
        p.add_argument("--out", default=default_out, help="output directory (env CDML_OUT)")
        p.add_argument("--no-timestamps", action="store_true", help="omit wall-clock values from outputs")
        return p

    p = add("prepare", "parse a log, build windows, split and fit normalisation")
    p.add_argument("--input", required=True, help="raw log CSV")
    p.add_argument("--stride", type=int, default=14, help="window stride in frames")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.set_defaults(func=cmd_prepare)

    p = add("train", "train one (architecture, loss, seed) cell")
    p.add_argument("--data", required=True, help="prepare output directory")
    p.add_argument("--arch", choices=nn.ARCHITECTURES, help="architecture (default conv1dnet)")
    p.add_argument("--loss", choices=LOSSES, help="objective (default triplet)")
    p.add_argument("--seed", type=int, help="training seed (default 0)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = add("grid", "train an architecture x loss x seed grid (resumable)")
    p.add_argument("--data", required=True, help="prepare output directory")
    p.add_argument("--archs", default=",".join(nn.ARCHITECTURES), help="comma-separated architectures")
    p.add_argument("--losses", default=",".join(LOSSES), help="comma-separated objectives")
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent cells")
    _add_train_flags(p)
    p.set_defaults(func=cmd_grid)

    p = add("eval", "evaluate a checkpoint or summarise a grid")
    p.add_argument("--data", help="prepare output directory")
    p.add_argument("--model", help="composite checkpoint")
    p.add_argument("--grid", help="grid output directory; prints the comparison table")
    p.add_argument("--knn", type=int, default=0, help="also report k-NN embedding accuracy with this k")
    p.set_defaults(func=cmd_eval)

    p = add("embed", "export PCA-2 embedding projections")
    p.add_argument("--data", required=True, help="prepare output directory")
    p.add_argument("--model", required=True, help="composite or embedding checkpoint")
    p.add_argument("--split", choices=("train", "test"), default="test", help="which windows to embed")
    p.set_defaults(func=cmd_embed)

    p = add("stream", "replay a log frame by frame")
    p.add_argument("--model", required=True, help="composite checkpoint")
    p.add_argument("--log", required=True, help="raw log CSV, or - for stdin")
    p.add_argument("--norm", help="norm.json from prepare")
    p.add_argument("--speed", choices=("max", "realtime"), default="max", help="replay pacing")
    p.add_argument("--hold", type=int, default=stream.DEFAULT_HOLD, help="debounce window count")
    p.set_defaults(func=cmd_stream)

    p = add("score", "score stream predictions against a labelled log")
    p.add_argument("--predictions", required=True, help="predictions.jsonl from stream")
    p.add_argument("--log", required=True, help="labelled log CSV the predictions came from")
    p.add_argument("--target-predictions", help="second column: predictions on target logs")
    p.add_argument("--target-log", help="second column: labelled target log")
    p.add_argument("--hold", type=int, default=stream.DEFAULT_HOLD, help="debounce window count")
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except TrainingAbort as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    except (CDMLError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    if not args.no_timestamps:
        print(f"elapsed {time.perf_counter() - t0:.2f} s")
    return code


if __name__ == "__main__":
    sys.exit(main())
