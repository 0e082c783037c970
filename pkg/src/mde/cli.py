"""Command-line surface: train toy models, score drift, select from a zoo, run experiments.

Machine-readable output is CSV on stdout or in files under --out-dir; human
logs go to stderr. Exit codes: 0 ok, 1 runtime error, 2 usage error, 3 the
model has no BN layers. MDE_THREADS caps internal parallelism (0 = auto).

CSV formats:
  train-toy  stdout: final_train_accuracy
  score      stdout: record,layer_index,value  (per-layer rows, then
             aggregate, channels_skipped, and fake_normalized when requested)
  select     stdout: the chosen model id; ranking.csv in --out-dir:
             rank,model_id,drift,chosen
  simulate   per-condition CSV plus a *_summary.csv in --out-dir; the summary
             row is repeated on stdout. covariate: severity,drift,accuracy.
             concept: repeat,overlap_p,shared_classes,drift,self_drift,
             source_accuracy,target_accuracy,accuracy_gap. recovery:
             cycle,model_id,drift,accuracy,chosen.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import experiments
from .drift import DriftConfig, DriftError, NoBnLayersError, fakedata_report, mde_score, minibatch_stream, score_layer_inputs
from .selection import CandidateScore, select_model, thread_count, write_csv
from .shiftlab import generate_dataset
from .toynet import TrainConfig, default_model, evaluate, train
from .traceio import (
    MdetError,
    bn_states_from_model_file,
    dataset_from_file,
    dataset_to_record,
    read_mdet,
    record_to_toy,
    toy_to_record,
    trace_layer_inputs,
    write_mdet,
)

log = logging.getLogger("mde")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="master seed; identical flags + seed give identical outputs")
    p.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])


def _add_metric_flags(p: argparse.ArgumentParser):
    p.add_argument("--metric", default="cosine", choices=["cosine", "wasserstein", "kl"])
    p.add_argument(
        "--truncation",
        nargs="?",
        type=float,
        const=0.5,
        default=None,
        metavar="R",
        help="low-rank refinement ratio in (0,1]; bare flag means 0.5",
    )
    p.add_argument("--batch", type=int, default=64, help="scoring batch size")
    p.add_argument("--iters", type=int, default=None, help="batches per score (default 8; for traces, all stored batches)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mde", description="Model drift estimation from BN statistics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="train the default toy CNN on synthetic data and save it")
    _add_common(p)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=80)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("-o", "--output", required=True, help="model file to write")
    p.add_argument("--dump-data", default=None, help="also write the training dataset to this file")

    p = sub.add_parser("score", help="drift of a model against a dataset or trace file")
    _add_common(p)
    _add_metric_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset or trace file")
    p.add_argument("--fake-normalize", action="store_true", help="divide by the same model's noise-input drift")

    p = sub.add_parser("select", help="rank a zoo directory by drift against a dataset or trace")
    _add_common(p)
    _add_metric_flags(p)
    p.add_argument("--zoo", required=True, help="directory of model files")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", default=".", help="where ranking.csv is written")

    p = sub.add_parser("simulate", help="desk-scale experiments")
    _add_common(p)
    p.add_argument("experiment", choices=["covariate", "concept", "recovery"])
    p.add_argument("--out-dir", default=".")
    p.add_argument("--kind", default="noise", choices=list(experiments.SHIFT_KINDS), help="covariate: perturbation")
    p.add_argument("--levels", default="0,0.1,0.2,0.4,0.8", help="covariate: comma-separated severities")
    p.add_argument("--overlap", default="0,0.25,0.5,0.75,1.0", help="concept: comma-separated overlap fractions")
    p.add_argument("--repeats", type=int, default=6, help="concept: class-role draws to average")
    p.add_argument("--experts", type=int, default=5, help="recovery: zoo size")
    p.add_argument("--cycles", type=int, default=25, help="recovery: shift cycles")
    return parser


def _drift_config(args) -> DriftConfig:
    return DriftConfig(
        metric=args.metric,
        truncation_ratio=args.truncation,
        batch_size=args.batch,
        iterations=args.iters if args.iters is not None else 8,
    )


def _stdout_csv(rows, columns):
    writer = csv.writer(sys.stdout)
    writer.writerow(columns)
    for row in rows:
        writer.writerow(row)


def _score_against_file(model_file, data_file, cfg: DriftConfig, seed: int, iters: int | None):
    """Score one model record against a dataset or trace record."""
    data = read_mdet(data_file)
    if data.kind == "dataset":
        model = record_to_toy(model_file)
        if not model.bn_states:
            raise NoBnLayersError(f"model {model.model_id!r} has no BN layers")
        images, _ = dataset_from_file(data)
        batches = minibatch_stream(images, cfg.batch_size, cfg.iterations, seed=seed)
        return mde_score(model, batches, cfg, dataset_id=str(data.metadata.get("dataset_id", "data"))), model
    if data.kind == "trace":
        states = bn_states_from_model_file(model_file)
        stored = sum(1 for e in data.entries if e.role == "activation")
        layers = max((e.layer_index for e in data.entries if e.role == "activation"), default=-1) + 1
        batches_stored = stored // layers if layers else 0
        cfg = DriftConfig(
            metric=cfg.metric,
            truncation_ratio=cfg.truncation_ratio,
            batch_size=cfg.batch_size,
            iterations=iters if iters is not None else batches_stored,
        )
        model_id = str(model_file.metadata.get("model_id", "model"))
        report = score_layer_inputs(
            states,
            trace_layer_inputs(data),
            cfg,
            model_id=model_id,
            dataset_id=str(data.metadata.get("dataset_id", "trace")),
        )
        return report, None
    raise DriftError(f"cannot score against a {data.kind!r} record; need a dataset or trace")


def cmd_train_toy(args) -> int:
    ds = generate_dataset(args.classes, args.per_class, seed=args.seed)
    model = default_model(args.classes, seed=args.seed, model_id=f"toy-{args.seed}")
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr, seed=args.seed)
    trained = train(model, ds.images, ds.labels, cfg)
    accuracy, _ = evaluate(trained, ds.images, ds.labels)
    write_mdet(toy_to_record(trained, dataset_id=f"synthetic-{args.seed}"), args.output)
    log.info("wrote %s", args.output)
    if args.dump_data:
        write_mdet(
            dataset_to_record(ds.images, ds.labels, f"synthetic-{args.seed}", seed=args.seed), args.dump_data
        )
        log.info("wrote %s", args.dump_data)
    _stdout_csv([[repr(accuracy)]], ["final_train_accuracy"])
    return 0


def cmd_score(args) -> int:
    cfg = _drift_config(args)
    model_file = read_mdet(args.model)
    report, model = _score_against_file(model_file, args.data, cfg, args.seed, args.iters)
    rows = [["layer", i, repr(v)] for i, v in enumerate(report.per_layer)]
    rows.append(["aggregate", "", repr(report.aggregate)])
    rows.append(["channels_skipped", "", report.channels_skipped])
    if args.fake_normalize:
        if model is None:
            raise DriftError("fake normalization needs a runnable model record and dataset input")
        fake = fakedata_report(model, report.config, seed=args.seed + 1)
        from .drift import normalize_by_fakedata

        rows.append(["fake_normalized", "", repr(normalize_by_fakedata(report, fake))])
    _stdout_csv(rows, ["record", "layer_index", "value"])
    return 0


def cmd_select(args) -> int:
    cfg = _drift_config(args)
    paths = sorted(
        os.path.join(args.zoo, name) for name in os.listdir(args.zoo) if name.endswith(".mdet")
    )
    if not paths:
        print(f"error: no .mdet model files in {args.zoo}", file=sys.stderr)
        return 2

    def score_path(path):
        f = read_mdet(path)
        report, _ = _score_against_file(f, args.data, cfg, args.seed, args.iters)
        return CandidateScore(model_id=report.model_id, drift=report.aggregate)

    workers = min(thread_count(), len(paths))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            candidates = list(pool.map(score_path, paths))
    else:
        candidates = [score_path(p) for p in paths]
    outcome = select_model(candidates)
    by_id = {c.model_id: c for c in candidates}
    os.makedirs(args.out_dir, exist_ok=True)
    write_csv(
        os.path.join(args.out_dir, "ranking.csv"),
        [
            {
                "rank": i,
                "model_id": mid,
                "drift": repr(by_id[mid].drift),
                "chosen": int(mid == outcome.chosen),
            }
            for i, mid in enumerate(outcome.ranking)
        ],
        ["rank", "model_id", "drift", "chosen"],
    )
    print(outcome.chosen)
    return 0


def _emit_summary(out_dir: str, name: str, summary: dict):
    columns = list(summary)
    values = [repr(v) if isinstance(v, float) else v for v in summary.values()]
    write_csv(os.path.join(out_dir, f"{name}_summary.csv"), [dict(zip(columns, values))], columns)
    _stdout_csv([values], columns)


def cmd_simulate(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    if args.experiment == "covariate":
        levels = [float(v) for v in args.levels.split(",") if v != ""]
        rows, summary = experiments.covariate_sweep(args.kind, levels, seed=args.seed)
        write_csv(
            os.path.join(args.out_dir, "covariate.csv"),
            [{k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows],
            ["severity", "drift", "accuracy"],
        )
        _emit_summary(args.out_dir, "covariate", summary)
    elif args.experiment == "concept":
        ps = [float(v) for v in args.overlap.split(",") if v != ""]
        rows, summary = experiments.concept_overlap(ps, seed=args.seed, repeats=args.repeats)
        columns = [
            "repeat", "overlap_p", "shared_classes", "drift", "self_drift",
            "source_accuracy", "target_accuracy", "accuracy_gap",
        ]
        write_csv(
            os.path.join(args.out_dir, "concept.csv"),
            [{k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows],
            columns,
        )
        _emit_summary(args.out_dir, "concept", summary)
    else:
        rows, summary, _ = experiments.recovery_run(experts=args.experts, cycles=args.cycles, seed=args.seed)
        write_csv(
            os.path.join(args.out_dir, "recovery.csv"),
            [{k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows],
            ["cycle", "model_id", "drift", "accuracy", "chosen"],
        )
        _emit_summary(args.out_dir, "recovery", summary)
    return 0


COMMANDS = {
    "train-toy": cmd_train_toy,
    "score": cmd_score,
    "select": cmd_select,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, args.log_level.upper()))
    np.seterr(all="raise", under="ignore")
    try:
        return COMMANDS[args.command](args)
    except NoBnLayersError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (MdetError, DriftError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
