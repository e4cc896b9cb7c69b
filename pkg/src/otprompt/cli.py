"""Command-line entry point: gen-data, train, eval, ablate, dump-plan.

Exit codes: 0 success, 2 usage or configuration error, 3 data/model
incompatibility, 4 numeric failure.

A JSON config file (``--config``) may hold the sections ``data`` (corpus
generation), ``train`` (training), ``eval`` (``thresholds``) and a top-level
``out``.  Unknown keys are rejected.  Command-line flags override config
values, and the effective configuration is written next to the outputs as
``config.resolved.json``.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields

import numpy as np

from .datagen import GenSpec, generate_corpus, read_corpus, write_corpus
from .errors import (ConfigError, DataError, DegenerateError, NonFiniteError, OTPromptError, ShapeError,
                     SinkhornUnderflowError)
from .evalkit import DEFAULT_THRESHOLDS, evaluate
from .localizer import ActionInstance
from .model import STRATEGIES, TrainConfig, forward, load_model, predict, save_model
from .trainer import train

log = logging.getLogger("otprompt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_SECTIONS = {"data", "train", "eval", "out"}

# flag dest -> (section, key)
DATA_FLAGS = {
    "classes": "num_classes", "dim": "feature_dim", "clips": "clips_per_video",
    "train_videos": "train_videos", "test_videos": "test_videos", "noise_sigma": "noise_sigma",
    "background_sigma": "background_sigma", "pool_size": "prototype_pool_size",
    "sub_events": "sub_events_per_class", "seed": "seed",
}
TRAIN_FLAGS = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "learning_rate", "shots": "shots",
    "lam": "lam", "tau": "tau", "lambda_reg": "lambda_reg", "seed": "seed", "strategy": "strategy",
    "prompts": "num_prompts", "n_ctx": "n_ctx", "d_ctx": "d_ctx", "fpn_levels": "fpn_levels",
    "score_threshold": "score_threshold", "nms_iou": "nms_iou", "top_k": "top_k",
}


class UsageError(OTPromptError):
    pass


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_strs(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, cls in (("data", GenSpec), ("train", TrainConfig)):
        known = {f.name for f in fields(cls)}
        bad = set(cfg.get(section, {})) - known
        if bad:
            raise ConfigError(f"unknown {section} config keys: {sorted(bad)}")
    bad = set(cfg.get("eval", {})) - {"thresholds"}
    if bad:
        raise ConfigError(f"unknown eval config keys: {sorted(bad)}")
    return cfg


def _overrides(args, mapping: dict) -> dict:
    out = {}
    for dest, key in mapping.items():
        val = getattr(args, dest, None)
        if val is not None:
            out[key] = val
    return out


def _write_json(path: str, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _resolve_out(args, cfg: dict, default: str | None) -> str:
    out = args.out if args.out is not None else cfg.get("out", default)
    if out is None:
        raise UsageError("an output directory is required (--out)")
    os.makedirs(out, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    data = {**cfg.get("data", {}), **_overrides(args, DATA_FLAGS)}
    if args.no_sharing:
        data["prototype_sharing"] = False
    spec = GenSpec.from_dict(data)
    out = _resolve_out(args, cfg, None)
    corpus = generate_corpus(spec)
    write_corpus(corpus, out)
    _write_json(os.path.join(out, "config.resolved.json"), {"data": asdict(spec), "out": out})
    n = {k: len(v) for k, v in corpus.splits.items()}
    print(f"wrote {spec.num_classes}-class corpus to {out}: " + ", ".join(f"{k}={v} videos" for k, v in n.items()))
    return EXIT_OK


def _train_config(args, cfg: dict) -> TrainConfig:
    merged = {**cfg.get("train", {}), **_overrides(args, TRAIN_FLAGS)}
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = _train_config(args, cfg)
    out = _resolve_out(args, cfg, "run")
    corpus = read_corpus(args.data, splits=["train"])
    if args.expect_classes is not None and args.expect_classes != corpus.num_classes:
        raise DataError(f"corpus has {corpus.num_classes} classes, --classes says {args.expect_classes}")
    rows = []

    def progress(epoch, br):
        rows.append((epoch, br.cls, br.reg, br.total))
        if not args.quiet:
            print(f"epoch {epoch:4d}  cls {br.cls:.6f}  reg {br.reg:.6f}  total {br.total:.6f}")

    t0 = time.time()
    result = train(corpus.splits["train"], tcfg, corpus.num_classes, progress)
    log.info("training finished in %.1fs", time.time() - t0)
    save_model(result.model, os.path.join(out, "model.json"))
    with open(os.path.join(out, "loss.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "cls", "reg", "total"])
        for epoch, c, r, t in rows:
            w.writerow([epoch, repr(c), repr(r), repr(t)])
    _write_json(os.path.join(out, "config.resolved.json"),
                {"train": asdict(tcfg), "data_dir": args.data, "out": out,
                 "support_videos": [s.video_id for s in result.support]})
    return EXIT_OK


def _oracle_predictions(seqs) -> dict:
    return {s.video_id: [ActionInstance(a.start, a.end, a.class_id, 1.0) for a in s.annotations] for s in seqs}


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    thresholds = args.thresholds or cfg.get("eval", {}).get("thresholds", list(DEFAULT_THRESHOLDS))
    if args.model is None and not args.oracle:
        raise UsageError("eval needs --model (or --oracle)")
    corpus = read_corpus(args.data, splits=[args.split])
    seqs = corpus.splits[args.split]
    if not seqs:
        raise DataError(f"split {args.split!r} of {args.data} is empty")
    if args.oracle:
        preds = _oracle_predictions(seqs)
        default_out = args.data
    else:
        model = load_model(args.model)
        if model.dim != corpus.feature_dim or model.num_classes != corpus.num_classes:
            raise DataError(f"model expects D={model.dim}, C={model.num_classes}; corpus has "
                            f"D={corpus.feature_dim}, C={corpus.num_classes}")
        preds = {s.video_id: predict(model, s) for s in seqs}
        default_out = os.path.dirname(os.path.abspath(args.model))
    out = _resolve_out(args, cfg, default_out)
    report = evaluate(preds, seqs, thresholds, corpus.num_classes)
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out, "report.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_csv())
    _write_json(os.path.join(out, "eval.config.resolved.json"),
                {"eval": {"thresholds": list(thresholds)}, "model": args.model, "data_dir": args.data,
                 "split": args.split, "oracle": bool(args.oracle), "out": out})
    print(report.table())
    return EXIT_OK


def transport_cost_table(model, seq, class_id: int) -> np.ndarray:
    """Per-frame, per-prompt transported cost on pyramid level 1.

    Entries are ``T_tj * C_tj`` min-max normalised within each prompt column
    (constant columns become 0).
    """
    if not 0 <= class_id < model.num_classes:
        raise DataError(f"class id {class_id} outside [0, {model.num_classes})")
    lv = forward(model, seq.features).levels[0]
    tc = lv.plan[class_id] * lv.cost[class_id]
    lo, hi = tc.min(axis=0), tc.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.where(hi > lo, (tc - lo) / span, 0.0)


def cmd_dump_plan(args) -> int:
    model = load_model(args.model)
    corpus = read_corpus(args.data)
    try:
        seq = corpus.video(args.video)
    except KeyError:
        raise DataError(f"video {args.video!r} not found in {args.data}") from None
    table = transport_cost_table(model, seq, args.class_id)
    path = args.out or f"plan_{args.video}_class{args.class_id}.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame"] + [f"prompt_{j + 1}" for j in range(table.shape[1])])
        for t, row in enumerate(table):
            w.writerow([t] + [repr(float(v)) for v in row])
    print(f"wrote {table.shape[0]}x{table.shape[1]} transport-cost table to {path}")
    return EXIT_OK


def _ablation_cell(job):
    data_dir, train_dict, thresholds = job
    corpus = read_corpus(data_dir)
    tcfg = TrainConfig.from_dict(train_dict)
    result = train(corpus.splits["train"], tcfg, corpus.num_classes)
    test = corpus.splits["test"]
    preds = {s.video_id: predict(result.model, s) for s in test}
    report = evaluate(preds, test, thresholds, corpus.num_classes)
    return [report.map_by_threshold[t] for t in report.thresholds] + [report.average_map]


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    base = _train_config(args, cfg)
    thresholds = args.thresholds or cfg.get("eval", {}).get("thresholds", list(DEFAULT_THRESHOLDS))
    out = _resolve_out(args, cfg, "ablation")
    for s in args.strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}")
    read_corpus(args.data, splits=[])  # fail early on a bad corpus path
    grid = list(itertools.product(args.strategies, args.prompt_grid or [base.num_prompts],
                                  args.n_ctx_grid or [base.n_ctx], args.fpn_grid or [base.fpn_levels], args.seeds))
    jobs = []
    for strategy, n, n_ctx, levels, seed in grid:
        d = asdict(base)
        d.update(strategy=strategy, num_prompts=n, n_ctx=n_ctx, fpn_levels=levels, seed=seed)
        jobs.append((args.data, d, list(thresholds)))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_ablation_cell, jobs))
    else:
        results = [_ablation_cell(j) for j in jobs]
    header = ["strategy", "prompts", "n_ctx", "fpn_levels", "seed"] + [f"mAP@{t:g}" for t in thresholds] + ["avg"]
    with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for cell, res in zip(grid, results):
            w.writerow(list(cell) + [repr(v) for v in res])
    _write_json(os.path.join(out, "config.resolved.json"),
                {"train": asdict(base), "eval": {"thresholds": list(thresholds)}, "data_dir": args.data, "out": out,
                 "grid": {"strategies": args.strategies, "prompts": args.prompt_grid, "n_ctx": args.n_ctx_grid,
                          "fpn_levels": args.fpn_grid, "seeds": args.seeds}})
    for cell, res in zip(grid, results):
        print(" ".join(str(c) for c in cell), " ".join(f"{100 * v:6.2f}" for v in res))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float, help="Adam learning rate")
    g.add_argument("--shots", type=int, help="support instances per class (K)")
    g.add_argument("--lam", type=float, help="entropic regulariser of the Sinkhorn solver")
    g.add_argument("--tau", type=float, help="logit temperature")
    g.add_argument("--lambda-reg", type=float, help="weight of the regression loss")
    g.add_argument("--seed", type=int)
    g.add_argument("--strategy", choices=STRATEGIES)
    g.add_argument("--prompts", type=int, help="prompts per class (N)")
    g.add_argument("--n-ctx", type=int, help="context vectors per prompt")
    g.add_argument("--d-ctx", type=int, help="width of each context vector")
    g.add_argument("--fpn-levels", type=int)
    g.add_argument("--score-threshold", type=float)
    g.add_argument("--nms-iou", type=float)
    g.add_argument("--top-k", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otprompt", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic compositional-action corpus")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config")
    p.add_argument("--classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--clips", type=int, help="clips per video")
    p.add_argument("--train-videos", type=int)
    p.add_argument("--test-videos", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--background-sigma", type=float)
    p.add_argument("--pool-size", type=int)
    p.add_argument("--sub-events", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-sharing", action="store_true", help="give every class its own sub-events")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on the K-shot support set of a corpus")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", help="output directory (default: ./run)")
    p.add_argument("--config")
    p.add_argument("--classes", dest="expect_classes", type=int, help="expected class count")
    p.add_argument("--quiet", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model with mAP over tIoU thresholds")
    p.add_argument("--model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="output directory (default: next to the model)")
    p.add_argument("--config")
    p.add_argument("--thresholds", type=_parse_floats, help="e.g. 0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--oracle", action="store_true", help="score the ground truth itself (evaluator check)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train+eval over a grid, one combined CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output directory (default: ./ablation)")
    p.add_argument("--config")
    p.add_argument("--strategies", type=_parse_strs, default=list(STRATEGIES))
    p.add_argument("--prompt-grid", type=_parse_ints)
    p.add_argument("--n-ctx-grid", type=_parse_ints)
    p.add_argument("--fpn-grid", type=_parse_ints)
    p.add_argument("--seeds", type=_parse_ints, default=[0])
    p.add_argument("--thresholds", type=_parse_floats)
    p.add_argument("--workers", type=int, default=1)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-plan", help="per-frame, per-prompt transport cost for one video and class")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_dump_plan)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SinkhornUnderflowError, NonFiniteError, DegenerateError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
