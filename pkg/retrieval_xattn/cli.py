# retrieval_xattn/cli.py

from __future__ import annotations

import json
import logging
import os
import sys
import traceback
from dataclasses import asdict

import click
import pandas as pd

from .checkpoint import load_checkpoint, save_checkpoint
from .config.settings import RunConfig, load_config, serialize_config, with_overrides
from .corpus import format_tokens, read_corpus, write_corpus
from .errors import EXIT_CODES, EngineError, SelftestFailure, StorageError
from .evalbench.analysis import coverage_by_head, retrieval_histogram
from .evalbench.metrics import mean_needle_recall
from .evalbench.reports import write_histogram, write_report
from .evalbench.scaling import bench_scaling, input_limit_sweep
from .evalbench.tasks import generate_needle_task
from .inference import generate as generate_one
from .knn_index import dump_datastore, index_memory_report, load_datastore
from .model import ModelWeights
from .numerics import Rng
from .retrieval_attention import read_retrieval_log, write_retrieval_log
from .selftest import CHECKS, run_selftest
from .training import PRESETS, bench_training_cost, train as train_model

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------------------

def _emit(payload: dict) -> None:
    click.echo(json.dumps(payload, indent=2))


def _configure_logging(verbose: int) -> None:
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)


def _require_file(path: str | None, what: str) -> str:
    """Input paths must resolve before a command starts any work."""
    if not path:
        raise click.UsageError(f"no {what} given (flag or config paths)")
    if not os.path.isfile(path):
        raise StorageError(f"{what} not found: {path}")
    return path


def _report_dir(cfg: RunConfig) -> str:
    path = cfg.paths.report_dir or "."
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create report directory {path}: {exc}")
    return path


def _task_corpus(cfg: RunConfig):
    m, t = cfg.model, cfg.task
    return list(generate_needle_task(t.length(m.window), m.window, t.m, m.vocab_size, t.seed, t.count).examples)


def _load_weights(cfg: RunConfig, path: str | None) -> ModelWeights:
    if path is None:
        return ModelWeights.initialize(cfg.model, Rng(cfg.model.seed).split("init"))
    weights = load_checkpoint(_require_file(path, "checkpoint"))
    logger.info("loaded checkpoint %s", path)
    return weights


# --------------------------------------------------------------------------------------
# Group
# --------------------------------------------------------------------------------------

@click.group("retrieval-xattn")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run configuration.")
@click.option("--seed", type=int, help="Run seed (overrides model.seed).")
@click.option("--k", type=click.IntRange(min=1), help="Retrieved keys per head per step (default: window).")
@click.option("--provider", help="full | retrieval | naive | random | memtrans:LAYER")
@click.option("--report-dir", type=click.Path(file_okay=False), help="Where artifacts and reports go.")
@click.option("--workers", type=click.IntRange(min=1), help="Thread fan-out for chunk encoding and validation.")
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug output.")
@click.pass_context
def cli(ctx, config_path, seed, k, provider, report_dir, workers, verbose):
    """Encoder-decoder runs with kNN-retrieval cross-attention over long inputs."""
    _configure_logging(verbose)
    cfg = load_config(config_path)
    ctx.obj = with_overrides(cfg, seed=seed, k=k, provider=provider, report_dir=report_dir, workers=workers)
    logger.debug("effective config:\n%s", serialize_config(ctx.obj))


# --------------------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------------------

@click.command("train")
@click.option("--corpus", "corpus_path", help="Training corpus (default: config paths.corpus, else the needle task).")
@click.option("--validation", "validation_path", help="Validation corpus (default: the training corpus).")
@click.option("--checkpoint", "checkpoint_path", help="Checkpoint to write (default: <report-dir>/model.ulmf).")
@click.option("--regime", type=click.Choice(sorted(PRESETS)), help="Training preset.")
@click.pass_obj
def train(cfg: RunConfig, corpus_path, validation_path, checkpoint_path, regime):
    """Train a model and write a checkpoint plus the epoch log."""
    if regime:
        cfg = with_overrides(cfg, preset=regime)
    corpus_path = corpus_path or cfg.paths.corpus
    validation_path = validation_path or cfg.paths.validation
    if corpus_path:
        _require_file(corpus_path, "corpus")
    if validation_path:
        _require_file(validation_path, "validation corpus")
    out_dir = _report_dir(cfg)

    if corpus_path:
        corpus = read_corpus(corpus_path, cfg.model.vocab_size)
    else:
        corpus = _task_corpus(cfg)
        corpus_path = os.path.join(out_dir, "task_corpus.tsv")
        write_corpus(corpus_path, corpus)
    validation = read_corpus(validation_path, cfg.model.vocab_size) if validation_path else None

    log_path = os.path.join(out_dir, "train_log.csv")
    state = train_model(
        cfg.model, cfg.regime, corpus, validation,
        seed=cfg.model.seed, log_path=log_path, workers=cfg.workers,
    )
    checkpoint_path = checkpoint_path or cfg.paths.checkpoint or os.path.join(out_dir, "model.ulmf")
    save_checkpoint(checkpoint_path, state.weights)
    _emit({
        "regime": cfg.regime.label,
        "epochs": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_score": state.best_score,
        "final_train_loss": state.history[-1].train_loss,
        "corpus": corpus_path,
        "checkpoint": checkpoint_path,
        "log": log_path,
    })


@click.command("generate")
@click.option("--checkpoint", "checkpoint_path", help="Model checkpoint (default: config paths.checkpoint).")
@click.option("--input", "input_path", help="Corpus whose inputs are generated for (default: config paths.corpus).")
@click.option("--output", "output_path", help="Generated tokens, one line per example.")
@click.option("--example", type=click.IntRange(min=0), default=0, show_default=True,
              help="Example whose retrieval log and datastore are kept.")
@click.option("--max-new-tokens", type=click.IntRange(min=0), help="Output budget (default: window - 1).")
@click.option("--truncate", is_flag=True, help="Encode only the first window, as the base model would.")
@click.pass_obj
def generate(cfg: RunConfig, checkpoint_path, input_path, output_path, example, max_new_tokens, truncate):
    """Greedy generation with the configured provider; writes tokens, a retrieval log and a datastore dump."""
    checkpoint_path = _require_file(checkpoint_path or cfg.paths.checkpoint, "checkpoint")
    input_path = _require_file(input_path or cfg.paths.corpus, "input corpus")
    out_dir = _report_dir(cfg)

    weights = load_checkpoint(checkpoint_path)
    examples = read_corpus(input_path, weights.config.vocab_size)
    if example >= len(examples):
        raise click.BadParameter(f"{example} but the corpus has {len(examples)} example(s)", param_hint="--example")

    output_path = output_path or os.path.join(out_dir, "generations.txt")
    log_path = os.path.join(out_dir, "retrieval_log.csv")
    dump_path = os.path.join(out_dir, "datastore.ulds")
    window = weights.config.window
    rng = Rng(weights.config.seed).split("generate")
    generations, lines, coverage = [], [], []
    for i, ex in enumerate(examples):
        result = generate_one(
            weights, ex.input, cfg.provider, k=cfg.retrieval_k, max_new_tokens=max_new_tokens,
            truncate=truncate, rng=rng.split(i), workers=cfg.workers, coverage_k=window,
        )
        generations.append(result.tokens)
        lines.append(format_tokens(result.tokens))
        coverage.extend({"example": i, **asdict(c)} for c in result.provider.coverage)
        if i == example:
            write_retrieval_log(log_path, result.provider.log)
            dump_datastore(dump_path, result.provider.datastore)
    try:
        with open(output_path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write generations {output_path}: {exc}")

    summary = None
    if coverage:
        frame = pd.DataFrame(coverage)
        summary = {
            "k": window,
            "queries": len(frame),
            "mean": float(frame["coverage"].mean()),
            "min": float(frame["coverage"].min()),
            "reports": write_report(frame, out_dir, "attention_coverage"),
        }
    _emit({
        "examples": len(examples),
        "provider": "truncated" if truncate else cfg.provider,
        "mean_needle_recall": mean_needle_recall(generations, [ex.target[1:-1] for ex in examples]),
        "coverage_at_window": summary,
        "output": output_path,
        "retrieval_log": log_path,
        "datastore": dump_path,
    })


@click.command("bench")
@click.option("--kind", type=click.Choice(["scaling", "input_limit", "training_cost", "memory"]),
              default="scaling", show_default=True)
@click.option("--checkpoint", "checkpoint_path", help="Weights to benchmark (default: freshly initialized).")
@click.option("--corpus", "corpus_path", help="Examples for input_limit / training_cost (default: the needle task).")
@click.pass_obj
def bench(cfg: RunConfig, kind, checkpoint_path, corpus_path):
    """Scaling, input-limit, training-cost and index-memory reports."""
    checkpoint_path = checkpoint_path or cfg.paths.checkpoint
    if checkpoint_path:
        _require_file(checkpoint_path, "checkpoint")
    if corpus_path:
        _require_file(corpus_path, "corpus")
    out_dir = _report_dir(cfg)
    window = cfg.model.window
    lengths = cfg.bench.resolved_lengths(window)

    if kind == "memory":
        frame = pd.DataFrame([index_memory_report(n, cfg.model) for n in lengths])
        paths = write_report(frame, out_dir, "index_memory")
        _emit({"kind": kind, "rows": len(frame), "reports": paths})
        return

    weights = _load_weights(cfg, checkpoint_path)
    if kind == "scaling":
        report = bench_scaling(
            weights, lengths, cfg.bench.repetitions,
            output_tokens=cfg.bench.output_tokens, provider=cfg.provider, k=cfg.k, seed=weights.config.seed,
        )
        paths = write_report(report.frame(), out_dir, "scaling")
        last = report.rows[-1]
        _emit({
            "kind": kind,
            "lengths": list(lengths),
            "relative_total_at_longest": last.relative_to_baseline,
            "decode_ratio": last.decode_seconds / report.rows[0].decode_seconds,
            "encode_ratio": last.encode_seconds / report.rows[0].encode_seconds,
            "reports": paths,
        })
        return

    corpus = read_corpus(corpus_path, weights.config.vocab_size) if corpus_path else _task_corpus(cfg)
    if kind == "input_limit":
        frame = input_limit_sweep(weights, corpus, lengths, k=cfg.k, provider=cfg.provider, seed=weights.config.seed)
        paths = write_report(frame, out_dir, "input_limit")
    else:
        frame = pd.DataFrame(bench_training_cost(weights.config, PRESETS, corpus, seed=weights.config.seed))
        paths = write_report(frame, out_dir, "training_cost")
    _emit({"kind": kind, "rows": len(frame), "reports": paths})


@click.command("analyze")
@click.option("--log", "log_path", required=True, help="Retrieval log written by `generate`.")
@click.option("--datastore", "datastore_path", required=True, help="Datastore dump written by `generate`.")
@click.option("--bins", type=click.IntRange(min=1), help="Histogram bins (default: config analysis.n_bins).")
@click.pass_obj
def analyze(cfg: RunConfig, log_path, datastore_path, bins):
    """Where retrieved keys sit in the input: histogram, median and per-head coverage."""
    _require_file(log_path, "retrieval log")
    _require_file(datastore_path, "datastore dump")
    out_dir = _report_dir(cfg)

    ds = load_datastore(datastore_path)
    log = read_retrieval_log(log_path, ds.n)
    hist = retrieval_histogram(log, bins or cfg.analysis.n_bins)
    paths = write_histogram(hist, out_dir)
    paths["coverage"] = write_report(coverage_by_head(log), out_dir, "coverage_by_head")
    _emit({
        "retrievals": hist.retrievals,
        "datastore_rows": ds.n,
        "median_position": hist.median_position,
        "fraction_retrieved": hist.fraction_retrieved,
        "reports": paths,
    })


@click.command("selftest")
@click.option("--only", multiple=True, type=click.Choice([name for name, _ in CHECKS]),
              help="Run only the named check (repeatable).")
@click.pass_obj
def selftest(cfg: RunConfig, only):
    """Run the invariant suite; exits 5 if any check fails."""
    report = run_selftest(list(only) or None)
    _emit(report.summary())
    if not report.passed:
        raise SelftestFailure(f"{len(report.failed)} check(s) failed: {', '.join(report.failed)}")


# --------------------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------------------

def _fail(category: str, message: str) -> int:
    first = (message.strip().splitlines() or [""])[0]
    click.echo(f"error: {category}: {first}", err=True)
    return EXIT_CODES[category]


def main(argv: list[str] | None = None) -> int:
    """Run one command; returns the process exit status instead of raising."""
    from .commands import commands

    for command in commands:
        cli.add_command(command)
    try:
        cli.main(args=argv, prog_name="retrieval-xattn", standalone_mode=False)
    except click.exceptions.Exit as exc:
        code = exc.exit_code
    except (click.UsageError, click.exceptions.Abort) as exc:
        code = _fail("usage", getattr(exc, "message", None) or type(exc).__name__)
    except click.ClickException as exc:
        code = _fail("usage", exc.format_message())
    except EngineError as exc:
        code = _fail(exc.category, str(exc))
    except Exception as exc:
        logger.debug(traceback.format_exc())
        code = _fail("numeric", f"{type(exc).__name__}: {exc}")
    else:
        code = 0
    return code


if __name__ == "__main__":
    sys.exit(main())
