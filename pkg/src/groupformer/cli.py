"""Command-line entry point.

Every subcommand reads the same flat ``key = value`` config (``--config``),
applies ``--set key=value`` overrides and the seed overrides, then delegates to
the library. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import checkpoint
from .config import ConfigError, DataError, NumericAbort, RunConfig, TrainConfig, rng_stream
from .infer import Prediction, predict, prediction_csv, rollout
from .ingest import Sample, build_samples, dataset_hash, dumps_samples, read_samples, read_tracks, split_samples, tile_origin, write_tracks
from .io import atomic_write_text
from .metrics import eval_gaps, evaluate, evaluate_compensation
from .net import param_count
from .syngen import gen_corpus
from .train import compensate, finetune_compensation, gap_limit, pretrain

logger = logging.getLogger("groupformer")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _parse_sets(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_run(args) -> RunConfig:
    return RunConfig.from_file(args.config, overrides=_parse_sets(args.set or []), seed=args.seed)


def _write_with_config(path: str, text: str, run: RunConfig) -> None:
    """Write ``text`` and a ``<path>.config`` sidecar echoing the run config."""
    atomic_write_text(path, text)
    atomic_write_text(path + ".config", run.to_text())


def _load_dataset(path: str, run: RunConfig, min_frames: Optional[int] = None) -> List[Sample]:
    samples = read_samples(path)
    if not samples:
        raise DataError(f"{path}: no samples")
    dom = run.domain
    need = dom.n_frames if min_frames is None else min_frames
    for s in samples:
        if s.max_slots != dom.max_slots or s.n_frames < need:
            raise DataError(
                f"{path}: sample has {s.n_frames} frames x {s.max_slots} slots, "
                f"config needs >= {need} x {dom.max_slots}"
            )
    return samples


def _train_config(run: RunConfig, finetune: bool = False) -> TrainConfig:
    tcfg = run.train
    if finetune:
        tcfg = dataclasses.replace(
            tcfg, base_lr=run["ft_base_lr"], warmup_steps=run["ft_warmup_steps"], total_steps=run["ft_steps"]
        )
    return tcfg


def _load_model(path: str, run: RunConfig):
    return checkpoint.load(path, expected=run.model)


# --- subcommands -------------------------------------------------------------


def cmd_syngen(args, run: RunConfig) -> int:
    duration = args.duration if args.duration is not None else run["duration"]
    tracks = gen_corpus(run.syn, duration)
    buf = io.StringIO()
    write_tracks(tracks, buf)
    _write_with_config(args.out, buf.getvalue(), run)
    logger.info("wrote %d track points to %s", len(tracks), args.out)
    return 0


def cmd_preprocess(args, run: RunConfig) -> int:
    with open(args.tracks, encoding="utf-8", newline="") as fh:
        tracks = read_tracks(fh)
    samples = build_samples(tracks, run.domain, site=run["site"])
    if not samples:
        raise DataError("no complete samples could be built from the tracks")
    train, test = split_samples(samples, run["test_frac"], rng_stream(run["seed"], "split"))
    if not train or not test:
        raise DataError(f"split of {len(samples)} samples left an empty side; adjust test_frac")
    if {s.key() for s in train} & {s.key() for s in test}:
        raise DataError("train and test splits share a sample")
    os.makedirs(args.out_dir, exist_ok=True)
    paths = {name: os.path.join(args.out_dir, f"{name}.jsonl") for name in ("train", "test")}
    atomic_write_text(paths["train"], dumps_samples(train))
    atomic_write_text(paths["test"], dumps_samples(test))
    manifest = {
        "train": {"path": "train.jsonl", "n": len(train), "hash": dataset_hash(train), "keys": [s.key() for s in train]},
        "test": {"path": "test.jsonl", "n": len(test), "hash": dataset_hash(test), "keys": [s.key() for s in test]},
        "config": run.as_dict(),
    }
    atomic_write_text(os.path.join(args.out_dir, "split.json"), json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    logger.info("%d train / %d test samples in %s", len(train), len(test), args.out_dir)
    return 0


def _check_disjoint(train_path: str, test: Sequence[Sample]) -> None:
    manifest = os.path.join(os.path.dirname(os.path.abspath(train_path)), "split.json")
    if not os.path.exists(manifest):
        return
    with open(manifest, encoding="utf-8") as fh:
        keys = set(json.load(fh)["train"]["keys"])
    if any(s.key() in keys for s in test):
        raise DataError("test set overlaps the training split recorded in split.json")


def _subset(samples: List[Sample], run: RunConfig) -> List[Sample]:
    cap = run["max_train_samples"]
    return samples[:cap] if cap else samples


def _save_training(args, run, result, meta) -> None:
    ckpt_id = checkpoint.save(result.model, args.out, meta)
    trace_path = args.out + ".trace.csv"
    _write_with_config(trace_path, result.trace_csv(), run)
    if run["figures"]:
        from . import plots

        plots.loss_curve([r.step for r in result.trace], [r.loss for r in result.trace], args.out + ".loss.png")
    last = result.trace[-1].loss if result.trace else float("nan")
    print(f"checkpoint {args.out} id {ckpt_id} final loss {last:.6g}")


def _guarded(train_fn, args, run: RunConfig):
    """Run ``train_fn``; on a numeric abort keep the last good weights beside ``--out``."""
    try:
        return train_fn()
    except NumericAbort as exc:
        if exc.payload is not None:
            path = args.out + ".lastgood"
            checkpoint.save(exc.payload.model, path, {"aborted": str(exc), "config": run.as_dict()})
            _write_with_config(path + ".trace.csv", exc.payload.trace_csv(), run)
            raise NumericAbort(f"{exc}; last good weights saved to {path}") from None
        raise


def cmd_pretrain(args, run: RunConfig) -> int:
    samples = _subset(_load_dataset(args.train, run), run)
    tcfg = run.train
    result = _guarded(lambda: pretrain(samples, run.model, run.noise, tcfg, steps=args.steps, log_every=args.log_every), args, run)
    meta = {"task": "prediction", "dataset_hash": dataset_hash(samples), "config": run.as_dict()}
    _save_training(args, run, result, meta)
    return 0


def cmd_finetune(args, run: RunConfig) -> int:
    model, base_meta = _load_model(args.checkpoint, run)
    samples = _subset(_load_dataset(args.train, run), run)
    tcfg = _train_config(run, finetune=True)
    result = _guarded(
        lambda: finetune_compensation(model, samples, run.noise, tcfg, steps=args.steps, log_every=args.log_every), args, run
    )
    meta = {
        "task": "compensation",
        "dataset_hash": dataset_hash(samples),
        "base_checkpoint": base_meta.get("checkpoint_id", ""),
        "config": run.as_dict(),
    }
    _save_training(args, run, result, meta)
    return 0


def _history(args, run: RunConfig) -> Sample:
    samples = _load_dataset(args.input, run, min_frames=run.domain.hist_len)
    if not 0 <= args.index < len(samples):
        raise DataError(f"--index {args.index} out of range for {len(samples)} samples")
    return samples[args.index].slice(0, run.domain.hist_len)


def _export_prediction(args, run: RunConfig, history: Sample, pred: Prediction) -> None:
    dom = run.domain
    origin = tile_origin(history.meta)
    _write_with_config(args.out, prediction_csv(history, pred, dom, origin, run.presence), run)
    if run["figures"]:
        from . import plots

        boxes = np.concatenate([history.boxes, pred.boxes])
        present = np.concatenate([history.present, pred.present])
        marks = np.concatenate([history.marks, pred.marks])
        plots.trajectories(boxes, present, marks, dom, args.out + ".png", origin, split_mark=int(pred.marks[0]))
    print(f"wrote {pred.n_frames} predicted frames to {args.out}")


def cmd_predict(args, run: RunConfig) -> int:
    model, _ = _load_model(args.checkpoint, run)
    history = _history(args, run)
    pred = predict(model, history, run.presence, first_mark=int(history.marks[-1]) + 1)
    _export_prediction(args, run, history, pred)
    return 0


def cmd_rollout(args, run: RunConfig) -> int:
    model, _ = _load_model(args.checkpoint, run)
    history = _history(args, run)
    loops = args.loops if args.loops is not None else run["loops"]
    pred = rollout(model, history, loops, run.presence, first_mark=int(history.marks[-1]) + 1)
    _export_prediction(args, run, history, pred)
    return 0


def cmd_evaluate(args, run: RunConfig) -> int:
    model, meta = _load_model(args.checkpoint, run)
    test = _load_dataset(args.test, run)
    if args.train_split:
        _check_disjoint(args.train_split, test)
    dom = run.domain
    ckpt = meta.get("checkpoint_id", "")
    if args.task == "prediction":
        from .infer import predict_batch

        report = evaluate(lambda chunk: predict_batch(model, chunk), test, dom, run.presence, checkpoint_id=ckpt, config=run.as_dict())
    else:
        gaps = eval_gaps(test, run.noise, gap_limit(model.cfg, run.noise), run["seed"])
        report = evaluate_compensation(
            lambda s, gap: compensate(model, s, gap), test, gaps, dom, run.presence, checkpoint_id=ckpt, config=run.as_dict()
        )
    atomic_write_text(args.out, report.to_text())
    base = os.path.splitext(args.out)[0]
    atomic_write_text(base + ".csv", report.to_csv())
    if run["figures"] and report.deviations:
        from . import plots

        plots.speed_deviation_hist(report.deviations, base + ".speed.png", report.speed_dev_p95)
    print("\n".join(report.summary_lines()))
    return 0


def cmd_param_count(args, run: RunConfig) -> int:
    print(param_count(run.model))
    return 0


def cmd_export(args, run: RunConfig) -> int:
    """Write a ground-truth sample in the prediction CSV layout (loop 0)."""
    samples = _load_dataset(args.input, run, min_frames=1)
    if not 0 <= args.index < len(samples):
        raise DataError(f"--index {args.index} out of range for {len(samples)} samples")
    s = samples[args.index]
    _write_with_config(args.out, prediction_csv(s, None, run.domain, tile_origin(s.meta), run.presence), run)
    print(f"wrote {s.n_frames} frames to {args.out}")
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="root seed; beats the config file and the environment")
    common.add_argument("--threads", type=int, help="torch intra-op threads (1 = reproducible path)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="groupformer", description="Vehicle-group trajectory transformer pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("syngen", parents=[common], help="simulate a synthetic multi-lane track corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--duration", type=float, help="simulated seconds (default: config key duration)")
    s.set_defaults(func=cmd_syngen)

    s = sub.add_parser("preprocess", parents=[common], help="tracks CSV -> train/test sample files")
    s.add_argument("--tracks", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_preprocess)

    for name, func, help_text in (
        ("pretrain", cmd_pretrain, "denoising prediction pretraining"),
        ("finetune", cmd_finetune, "compensation fine-tuning of a checkpoint"),
    ):
        s = sub.add_parser(name, parents=[common], help=help_text)
        if name == "finetune":
            s.add_argument("--checkpoint", required=True)
        s.add_argument("--train", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--steps", type=int, help="stop after this many steps (schedule still spans total_steps)")
        s.add_argument("--log-every", type=int, default=0)
        s.set_defaults(func=func)

    for name, func in (("predict", cmd_predict), ("rollout", cmd_rollout)):
        s = sub.add_parser(name, parents=[common], help=f"{name} from the first hist_len frames of a sample")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--input", required=True, help="sample file; frames beyond hist_len are ignored")
        s.add_argument("--index", type=int, default=0)
        s.add_argument("--out", required=True)
        if name == "rollout":
            s.add_argument("--loops", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--task", choices=("prediction", "compensation"), default="prediction")
    s.add_argument("--train-split", help="training file; checked for overlap via its split.json")
    s.add_argument("--out", required=True, help="report text file; a .csv twin is written beside it")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("param-count", parents=[common], help="print the model parameter count")
    s.set_defaults(func=cmd_param_count)

    s = sub.add_parser("export", parents=[common], help="ground-truth sample -> prediction CSV layout")
    s.add_argument("--input", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = load_run(args)
        threads = args.threads if args.threads is not None else run["threads"]
        if threads < 1:
            raise ConfigError("threads must be >= 1")
        torch.set_num_threads(threads)
        return args.func(args, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
