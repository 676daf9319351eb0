"""Command-line entry point: `sprc synth | train | eval | sweep`.

Exit codes are stable: 0 success, 1 I/O or artifact-format error, 2 config
error, 3 numeric abort, 4 sweep finished with failed cells.  Diagnostics go to
stderr; tables go to stdout.  Every command writes a `run_manifest.json`
naming its outputs.
"""

from __future__ import annotations

import argparse
import importlib.metadata
import json
import os
import subprocess
import sys
import tempfile
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import torch

from .config import Mechanism, PromptMode, TrainConfig, load_config
from .dataset import (
    Corpus,
    SyntheticSpec,
    Triplet,
    Vocabulary,
    generate_synthetic,
    load_corpus_features,
    load_triplets,
    save_corpus_features,
    write_triplets,
)
from .errors import (
    CacheFormatError,
    CheckpointError,
    ConfigError,
    LengthError,
    ManifestError,
    NumericError,
    ReferentialError,
    StructuralError,
    VocabularyError,
)
from .evaluation import (
    SWEEP_AXES,
    CrossAttentionScorer,
    IdentityScorer,
    compute_recall,
    evaluate_model,
    rerank_two_stage,
    sweep,
)
from .model import dtype_of
from .training import load_checkpoint, restore_state, save_checkpoint, train


def _err(message: str) -> None:
    print(f"sprc: {message}", file=sys.stderr)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def version_string() -> str:
    """Package version, extended git-describe-style when a checkout is visible."""
    try:
        base = importlib.metadata.version("sprc")
    except importlib.metadata.PackageNotFoundError:
        base = "0.0.0"
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if described.returncode == 0 and described.stdout.strip():
            return f"{base}+g{described.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def write_run_manifest(
    out_dir: Path,
    command: str,
    config_snapshot: dict,
    seed: int,
    outputs: Sequence[Path],
    started_at: str,
) -> Path:
    """Atomically write run_manifest.json; every named output must exist."""
    missing = [str(p) for p in outputs if not Path(p).exists()]
    if missing:
        raise OSError(f"run outputs missing at manifest time: {missing}")
    doc = {
        "command": command,
        "config": config_snapshot,
        "seed": seed,
        "version": version_string(),
        "started_at": started_at,
        "finished_at": _now(),
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / "run_manifest.json"
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix="run_manifest.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return path


def _load_dataset(
    data_dir: str | Path, max_caption_len: Optional[int] = None
) -> tuple[Corpus, list[Triplet], Vocabulary]:
    data_dir = Path(data_dir)
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    corpus = load_corpus_features(data_dir / "corpus.bin")
    triplets = load_triplets(
        data_dir / "triplets.tsv", vocab, corpus=corpus, max_caption_len=max_caption_len
    )
    return corpus, triplets, vocab


def _load_train_config(args: argparse.Namespace) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "precision", None) is not None:
        cfg = replace(cfg, precision=args.precision)
    if getattr(args, "steps", None) is not None:
        cfg = replace(cfg, steps=args.steps)
    cfg.validate()
    return cfg


def _parse_ints(text: str, flag: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"{flag}: expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise ConfigError(f"{flag}: empty list")
    return values


def _parse_edit_mix(text: str) -> dict[str, float]:
    mix: dict[str, float] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"--edit-mix: expected OP=WEIGHT, got {part!r}")
        op, _, raw = part.partition("=")
        try:
            mix[op.strip().upper()] = float(raw)
        except ValueError as exc:
            raise ConfigError(f"--edit-mix: bad weight in {part!r}") from exc
    total = sum(mix.values())
    if total <= 0:
        raise ConfigError("--edit-mix: weights must sum to a positive value")
    return {op: w / total for op, w in mix.items()}


def _print_recall(table) -> None:
    cells = table.cells()
    names = list(cells)
    widths = [max(len(n), 8) for n in names]
    print("  ".join(n.rjust(w) for n, w in zip(names, widths)))
    print("  ".join(f"{cells[n]:.4f}".rjust(w) for n, w in zip(names, widths)))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    started = _now()
    spec = SyntheticSpec(
        n_slots=args.n_slots,
        n_object_types=args.n_objects,
        n_attr_values=args.n_attrs,
        edit_mix=_parse_edit_mix(args.edit_mix),
        corpus_size=args.corpus_size,
        seed=args.seed,
        n_triplets=args.n_triplets,
        d_img=args.d_img,
        empty_prob=args.empty_prob,
        k_subset=args.k_subset,
    )
    spec.validate()
    corpus, triplets, vocab = generate_synthetic(spec)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus_path = out / "corpus.bin"
    triplets_path = out / "triplets.tsv"
    vocab_path = out / "vocab.txt"
    save_corpus_features(corpus_path, corpus)
    write_triplets(triplets_path, triplets, vocab)
    vocab.save(vocab_path)
    write_run_manifest(
        out, "synth", asdict(spec), args.seed, [corpus_path, triplets_path, vocab_path], started
    )
    n_subset = sum(1 for t in triplets if t.subset_ids is not None)
    print(f"images:   {len(corpus)}")
    print(f"triplets: {len(triplets)} ({n_subset} with subsets)")
    print(f"vocab:    {len(vocab)} tokens")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out / "checkpoint.sprc"
    metrics_path = out / "metrics.jsonl"

    if args.resume:
        state = restore_state(load_checkpoint(checkpoint_path))
        if args.steps is not None:
            state.cfg = replace(state.cfg, steps=args.steps)
        cfg = state.cfg
        corpus, triplets, vocab = _load_dataset(args.data, cfg.max_caption_len)
        state, _ = train(cfg, corpus, triplets, len(vocab), state=state, log_path=metrics_path)
    else:
        cfg = _load_train_config(args)
        corpus, triplets, vocab = _load_dataset(args.data, cfg.max_caption_len)
        metrics_path.unlink(missing_ok=True)
        state, _ = train(cfg, corpus, triplets, len(vocab), log_path=metrics_path)

    save_checkpoint(checkpoint_path, state)
    records = []
    with open(metrics_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    outputs = [checkpoint_path, metrics_path]
    if records:
        from .reporting import render_training_curves

        outputs.append(render_training_curves(out / "loss_curves.png", records))
        last = records[-1]
        print(
            f"trained to step {state.step}: "
            f"L={last['L']:.4f} Lc={last['Lc']:.4f} La={last['La']:.4f}"
        )
    else:
        print(f"trained to step {state.step}: no new steps")
    write_run_manifest(out, "train", state.cfg.to_dict(), state.cfg.seed, outputs, started)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    started = _now()
    state = restore_state(load_checkpoint(args.checkpoint))
    cfg = state.cfg
    if args.precision is not None and args.precision != cfg.precision:
        cfg = replace(cfg, precision=args.precision)
        state.model = state.model.to(dtype_of(args.precision))
    corpus, triplets, vocab = _load_dataset(args.data, cfg.max_caption_len)
    ks = _parse_ints(args.ks, "--ks")
    if any(k < 1 for k in ks):
        raise ConfigError("--ks: values must be >= 1")
    mechanism = Mechanism(args.mechanism) if args.mechanism else cfg.mechanism
    prompt_mode = PromptMode(args.prompt_mode) if args.prompt_mode else cfg.prompt_mode
    exclude_reference = not args.include_reference

    table, results = evaluate_model(
        state.model,
        corpus,
        triplets,
        ks,
        mechanism=mechanism,
        prompt_mode=prompt_mode,
        exclude_reference=exclude_reference,
    )
    if args.rerank != "none":
        if args.rerank == "identity":
            scorer = IdentityScorer()
        else:
            torch.manual_seed(cfg.seed)
            scorer = CrossAttentionScorer(cfg.d_embed, corpus.d_img).to(
                dtype_of(cfg.precision)
            )
        outcome = rerank_two_stage(
            results,
            args.top_m,
            scorer,
            model=state.model,
            corpus=corpus,
            triplets=triplets,
            mechanism=mechanism,
            prompt_mode=prompt_mode,
        )
        if outcome.skipped:
            _err(f"rerank skipped {len(outcome.skipped)} queries")
            for query_id, reason in outcome.skipped:
                _err(f"  {query_id}: {reason}")
        table = compute_recall(outcome.results, ks)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .reporting import render_recall_figure, write_recall_csv, write_recall_json

    outputs = [
        write_recall_csv(out / "recall.csv", table),
        write_recall_json(out / "recall.json", table),
        render_recall_figure(out / "recall.png", table),
    ]
    _print_recall(table)
    snapshot = cfg.to_dict()
    snapshot.update(
        {
            "eval_mechanism": mechanism.value,
            "eval_prompt_mode": prompt_mode.value,
            "rerank": args.rerank,
            "top_m": args.top_m,
            "exclude_reference": exclude_reference,
        }
    )
    write_run_manifest(out, "eval", snapshot, cfg.seed, outputs, started)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    started = _now()
    cfg = _load_train_config(args)
    corpus, triplets, vocab = _load_dataset(args.data, cfg.max_caption_len)
    seeds = _parse_ints(args.seeds, "--seeds")
    ks = _parse_ints(args.ks, "--ks")

    raw_values = [part.strip() for part in args.values.split(",") if part.strip()]
    if not raw_values:
        raise ConfigError("--values: empty list")
    values: list[object]
    try:
        if args.axis == "gamma":
            values = [float(v) for v in raw_values]
        elif args.axis == "prompt_length":
            values = [int(v) for v in raw_values]
        elif args.axis == "mechanism":
            values = [Mechanism(v.upper()).value for v in raw_values]
        else:
            values = [PromptMode(v.upper()).value for v in raw_values]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = sweep(
        args.axis,
        values,
        cfg,
        seeds,
        corpus,
        triplets,
        len(vocab),
        ks=ks,
        workers=args.workers,
        cell_dir=out / "cells",
    )

    from .reporting import render_sweep_figure, write_sweep_cells_csv, write_sweep_summary_csv

    outputs = [
        write_sweep_cells_csv(out / "sweep_cells.csv", table),
        write_sweep_summary_csv(out / "sweep_summary.csv", table),
        render_sweep_figure(out / "sweep.png", table, k=min(ks)),
    ]
    for row in table.rows:
        mean = row.mean_recall_at()
        shown = "  ".join(f"R@{k}={v:.4f}" for k, v in mean.items()) or "all cells failed"
        print(f"{args.axis}={row.value}: {shown}")
    write_run_manifest(out, "sweep", cfg.to_dict(), cfg.seed, outputs, started)
    if table.n_failed:
        _err(f"{table.n_failed} sweep cell(s) failed")
        return 4
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sprc",
        description="Composed image retrieval with sentence-level prompts: "
        "synthetic data, training, evaluation, and sweeps.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {version_string()}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic edit-retrieval dataset")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--n-slots", type=int, default=3)
    synth.add_argument("--n-objects", type=int, default=8)
    synth.add_argument("--n-attrs", type=int, default=4)
    synth.add_argument("--corpus-size", type=int, default=64)
    synth.add_argument("--n-triplets", type=int, default=None)
    synth.add_argument("--d-img", type=int, default=16)
    synth.add_argument("--empty-prob", type=float, default=0.3)
    synth.add_argument("--k-subset", type=int, default=6)
    synth.add_argument(
        "--edit-mix",
        default="ADD=1,REMOVE=1,MODIFY=1",
        help="comma-separated OP=WEIGHT entries; weights are normalized",
    )
    synth.set_defaults(func=cmd_synth)

    train_p = sub.add_parser("train", help="train a retrieval model")
    train_p.add_argument("--config", default=None, help="key = value config file")
    train_p.add_argument("--data", required=True, help="directory from `sprc synth`")
    train_p.add_argument("--out", required=True)
    train_p.add_argument("--seed", type=int, default=None, help="override config seed")
    train_p.add_argument("--precision", choices=("f32", "f64"), default=None)
    train_p.add_argument("--steps", type=int, default=None, help="override config steps")
    train_p.add_argument(
        "--resume", action="store_true", help="continue from <out>/checkpoint.sprc"
    )
    train_p.set_defaults(func=cmd_train)

    eval_p = sub.add_parser("eval", help="evaluate a checkpoint")
    eval_p.add_argument("--checkpoint", required=True)
    eval_p.add_argument("--data", required=True)
    eval_p.add_argument("--out", required=True)
    eval_p.add_argument("--ks", default="1,5,10,50")
    eval_p.add_argument(
        "--mechanism", choices=[m.value for m in Mechanism], default=None,
        help="override the checkpoint's mechanism",
    )
    eval_p.add_argument(
        "--prompt-mode", choices=[m.value for m in PromptMode], default=None
    )
    eval_p.add_argument(
        "--rerank", choices=("none", "identity", "cross_attention"), default="none"
    )
    eval_p.add_argument("--top-m", type=int, default=10)
    eval_p.add_argument(
        "--include-reference",
        action="store_true",
        help="keep the reference image in the candidate pool",
    )
    eval_p.add_argument("--precision", choices=("f32", "f64"), default=None)
    eval_p.set_defaults(func=cmd_eval)

    sweep_p = sub.add_parser("sweep", help="train+eval over an axis of values")
    sweep_p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sweep_p.add_argument("--values", required=True, help="comma-separated axis values")
    sweep_p.add_argument("--seeds", default="0", help="comma-separated seeds")
    sweep_p.add_argument("--config", default=None)
    sweep_p.add_argument("--data", required=True)
    sweep_p.add_argument("--out", required=True)
    sweep_p.add_argument("--ks", default="1,5,10,50")
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--precision", choices=("f32", "f64"), default=None)
    sweep_p.add_argument(
        "--workers",
        type=int,
        default=None,
        help="parallel cells (default: SPRC_NUM_WORKERS or 1)",
    )
    sweep_p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        if code is None:
            return 0
        return code if isinstance(code, int) else 2

    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return 2
    except NumericError as exc:
        _err(f"numeric error: {exc}")
        return 3
    except (
        ManifestError,
        VocabularyError,
        CacheFormatError,
        ReferentialError,
        CheckpointError,
        LengthError,
        StructuralError,
    ) as exc:
        _err(str(exc))
        return 1
    except OSError as exc:
        _err(f"I/O error: {exc}")
        return 1
    except ValueError as exc:
        _err(f"invalid argument: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
