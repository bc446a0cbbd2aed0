"""
Report Generation Benchmark - command line
==========================================
Runs every stage of the synthetic CT report-generation benchmark.

Commands:
    phantom-gen     render the phantom corpus (volumes + lobe label maps)
    inject          expand phantoms into a surrogate-task dataset
    reports-gen     render one template report per sample + the vocabulary
    mine-labels     SARLE labels for a report CSV / JSON-lines file (+ evaluation)
    train-encoder   train the abnormality classifier
    train-decoder   train the report decoder on frozen-encoder representations
    eval-encoder    accuracy, PR-AUC and per-label scores on a split
    eval-decoder    next-word and factual accuracy on a split
    generate        greedy reports for a split (optionally with per-step distributions)
    plot            PR curves, loss histories and results tables

Every command accepts --config, repeated --set section.key=value, and the
shortcuts --n / --seed / --task / --work-dir. On failure exactly one JSON
line {"error", "exit_code", "message"} goes to stderr.

Usage:
    python pipeline.py phantom-gen --n 100 --seed 7
    python pipeline.py inject --task combined
    python pipeline.py reports-gen --task combined
    python pipeline.py train-encoder --task combined
    python pipeline.py train-decoder --task combined --set decoder.representation=tokens
    python pipeline.py eval-decoder --task combined
    python pipeline.py plot
"""

import sys
import json
import time
import logging
import argparse
from pathlib import Path
from typing import Optional, Sequence

sys.path.insert(0, str(Path(__file__).resolve().parent))

import pandas as pd

from analysis.plots import plot_directory
from analysis.results_tables import build_tables, collect_results, export_tables, print_terminal_report
from common.config import RunConfig, load_run_config
from common.errors import ConfigurationError, InvalidInputError, MissingInputError, PipelineError
from common.io_utils import read_jsonl, save_json
from common.log_setup import setup_logging
from reports.templates import load_template_library
from sarle.sarle import (
    evaluate_corpus, label_reports, load_labeled_reports, load_medical_vocabulary, load_rule_table,
)
from synth.dataset_builder import build_dataset, collect_phantoms, load_phantom_manifest, materialize_dataset
from training.datasets import MINED_LABELS_FILE, resolve_task
from training.experiments import (
    fit_decoder, fit_encoder, render_dataset_reports, run_decoder_evaluation,
    run_encoder_evaluation, run_generation,
)

logger = logging.getLogger("pipeline")


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

def task_slug(task: str) -> str:
    return task.replace(":", "-")


def dataset_dir(cfg: RunConfig, args) -> Path:
    name = getattr(args, "dataset", None) or cfg.dataset.task
    if name.startswith("mined:"):
        raise ConfigurationError("Mined-label tasks need --dataset naming the dataset that holds the volumes")
    return cfg.paths.resolve("datasets") / task_slug(name)


def checkpoint_dir(cfg: RunConfig) -> Path:
    return cfg.paths.resolve("checkpoints") / task_slug(cfg.dataset.task)


def results_dir(cfg: RunConfig) -> Path:
    return cfg.paths.resolve("results") / task_slug(cfg.dataset.task)


def decoder_name(cfg: RunConfig) -> str:
    d = cfg.raw["decoder"]
    return f"decoder-{d['conditioning']}-{d['representation']}"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_phantom_gen(cfg: RunConfig, args) -> dict:
    ds = cfg.dataset
    records = collect_phantoms(cfg.paths.resolve("phantoms"), ds.n_phantoms, ds.seed, ds.shape, ds.native_shape)
    return {"phantoms": len(records)}


def cmd_inject(cfg: RunConfig, args) -> dict:
    spec = resolve_task(cfg.dataset.task)
    if spec.surrogate is None:
        raise ConfigurationError(f"inject builds surrogate-task datasets, not {spec.name}")
    phantom_dir = cfg.paths.resolve("phantoms")
    phantoms = load_phantom_manifest(phantom_dir)[: cfg.dataset.n_phantoms]
    planned = build_dataset(phantoms, spec.surrogate, cfg.dataset.seed, cfg.dataset.multiplier)
    dataset = materialize_dataset(planned, phantom_dir, dataset_dir(cfg, args), cfg.dataset.workers)
    counts = {split: len(dataset.split(split)) for split in ("train", "val", "test")}
    logger.info(f"   splits: {counts}")
    return {"samples": len(dataset.samples), **counts}


def cmd_reports_gen(cfg: RunConfig, args) -> dict:
    lib = load_template_library(args.templates)
    lib.validate()
    records, vocab = render_dataset_reports(dataset_dir(cfg, args), lib, cfg.dataset.seed)
    return {"reports": len(records), "vocab_size": len(vocab)}


def _read_report_input(path: Optional[Path]) -> pd.DataFrame:
    if path is not None and Path(path).suffix == ".jsonl":
        rows = read_jsonl(path)
        return pd.DataFrame({"report_id": [str(r["id"]) for r in rows], "text": [r["text"] for r in rows]})
    return load_labeled_reports(path)


def cmd_mine_labels(cfg: RunConfig, args) -> dict:
    rules = load_rule_table(args.rules)
    vocab = load_medical_vocabulary(args.vocabulary)
    df = _read_report_input(args.input)
    if args.output:
        out = Path(args.output)
    elif args.input is not None and Path(args.input).suffix == ".jsonl":
        out = Path(args.input).parent / MINED_LABELS_FILE
    else:
        out = cfg.paths.resolve("results") / MINED_LABELS_FILE

    labels = label_reports(zip(df["report_id"], df["text"]), rules, vocab)
    out.parent.mkdir(parents=True, exist_ok=True)
    labels.to_csv(out, index=False)
    logger.info(f"── {len(df)} reports labelled → {out}")

    summary = {"reports": len(df), "labels_csv": str(out)}
    if any(label in df.columns for label in vocab.labels):
        evaluation = {k: v.to_dict() for k, v in evaluate_corpus(df, rules, vocab).items()}
        eval_path = out.with_name(out.stem + "_evaluation.json")
        save_json(eval_path, evaluation)
        summary["evaluation"] = str(eval_path)
    return summary


def cmd_train_encoder(cfg: RunConfig, args) -> dict:
    _, result = fit_encoder(cfg, dataset_dir(cfg, args), checkpoint_dir(cfg), cfg.dataset.task)
    return {"checkpoint": str(result.checkpoint), "best_step": result.best_step, "steps": result.steps,
            "stop_reason": result.stop_reason}


def cmd_train_decoder(cfg: RunConfig, args) -> dict:
    ckpt = checkpoint_dir(cfg)
    _, result = fit_decoder(cfg, dataset_dir(cfg, args), ckpt / "encoder", ckpt, decoder_name(cfg))
    return {"checkpoint": str(result.checkpoint), "best_step": result.best_step, "steps": result.steps,
            "stop_reason": result.stop_reason}


def cmd_eval_encoder(cfg: RunConfig, args) -> dict:
    n_labels = resolve_task(cfg.dataset.task).n_labels
    record = run_encoder_evaluation(dataset_dir(cfg, args), checkpoint_dir(cfg) / "encoder",
                                    results_dir(cfg), args.split, cfg.encoder_config(n_labels))
    return {"accuracy": record["accuracy"], "pr_auc": record["pr_auc"]}


def cmd_eval_decoder(cfg: RunConfig, args) -> dict:
    ckpt = checkpoint_dir(cfg)
    name = decoder_name(cfg)
    record = run_decoder_evaluation(
        dataset_dir(cfg, args), ckpt / "encoder", ckpt / name, results_dir(cfg) / name,
        load_template_library(args.templates), args.split,
    )
    return {"next_word_accuracy": record["next_word_accuracy"], "factual_accuracy": record["factual_accuracy"]}


def cmd_generate(cfg: RunConfig, args) -> dict:
    ckpt = checkpoint_dir(cfg)
    name = decoder_name(cfg)
    path = run_generation(dataset_dir(cfg, args), ckpt / "encoder", ckpt / name,
                          results_dir(cfg) / name, args.split, args.dump_distributions)
    return {"reports": str(path)}


def cmd_plot(cfg: RunConfig, args) -> dict:
    sources = [Path(s) for s in args.source] if args.source else [cfg.paths.resolve("checkpoints"),
                                                                   cfg.paths.resolve("results")]
    out_dir = Path(args.out) if args.out else cfg.paths.resolve("results") / "plots"
    written = []
    for source in sources:
        try:
            written += plot_directory(source, out_dir)
        except MissingInputError as e:
            logger.info(f"   skipped: {e}")
    if not written:
        raise InvalidInputError(f"No history or score CSV files found in {[str(s) for s in sources]}")
    records = collect_results([cfg.paths.resolve("results")], args.split)
    tables = build_tables(records)
    print_terminal_report(tables)
    workbook = export_tables(tables, cfg.paths.resolve("results"), records)
    return {"figures": len(written), "workbook": str(workbook)}


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "inject": cmd_inject,
    "reports-gen": cmd_reports_gen,
    "mine-labels": cmd_mine_labels,
    "train-encoder": cmd_train_encoder,
    "train-decoder": cmd_train_decoder,
    "eval-encoder": cmd_eval_encoder,
    "eval-decoder": cmd_eval_decoder,
    "generate": cmd_generate,
    "plot": cmd_plot,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML run config (default: config/default.yaml)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one config key (repeatable)")
    common.add_argument("--work-dir", default=None, help="Shortcut for paths.work_dir")
    common.add_argument("--n", type=int, default=None, help="Shortcut for dataset.n_phantoms")
    common.add_argument("--seed", type=int, default=None, help="Shortcut for dataset.seed")
    common.add_argument("--task", default=None, help="Shortcut for dataset.task")
    common.add_argument("--dataset", default=None, help="Dataset directory name (default: the task)")
    common.add_argument("--split", default="test", choices=["train", "val", "test"])
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(description="Synthetic CT report-generation benchmark")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("reports-gen", "eval-decoder"):
            p.add_argument("--templates", type=Path, default=None, help="Template file (default: bundled)")
        if name == "mine-labels":
            p.add_argument("--input", type=Path, default=None,
                           help="Report CSV (report_id, text[, label columns]) or reports .jsonl")
            p.add_argument("--output", type=Path, default=None, help="Labels CSV path")
            p.add_argument("--rules", type=Path, default=None)
            p.add_argument("--vocabulary", type=Path, default=None)
        if name == "generate":
            p.add_argument("--dump-distributions", action="store_true",
                           help="Store per-step probabilities as <id>.npy.gz")
        if name == "plot":
            p.add_argument("--source", action="append", default=[], help="Directory with CSV files (repeatable)")
            p.add_argument("--out", default=None, help="Figure directory")
    return parser


def overrides_from_args(args) -> list[str]:
    shortcuts = {
        "paths.work_dir": args.work_dir,
        "dataset.n_phantoms": args.n,
        "dataset.seed": args.seed,
        "dataset.task": args.task,
    }
    return [f"{key}={value}" for key, value in shortcuts.items() if value is not None] + list(args.overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, overrides_from_args(args))
        setup_logging(args.verbose, cfg.paths.resolve("logs") / "pipeline.jsonl")
        logger.info("=" * 55)
        logger.info(f"  {args.command}  (config {cfg.hash[:12]}, seed {cfg.dataset.seed})")
        logger.info("=" * 55)
        logger.info("resolved config", extra={"context": {
            "command": args.command, "config": cfg.to_dict(), "seed": cfg.dataset.seed, "argv": list(argv or sys.argv[1:]),
        }})
        start = time.time()
        summary = COMMANDS[args.command](cfg, args)
        logger.info(f"✅ {args.command} finished in {time.time() - start:.1f}s", extra={"context": {"summary": summary}})
        return 0
    except PipelineError as e:
        logger.debug("pipeline error", exc_info=True)
        print(json.dumps(e.to_record()), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.debug("unexpected error", exc_info=True)
        print(json.dumps({"error": "unexpected", "exit_code": 1, "message": f"{type(e).__name__}: {e}"}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
