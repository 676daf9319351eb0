"""Retrieval evaluation: indexing, ranking, recall metrics, re-ranking, sweeps.

Ranking is brute force over a read-only embedding matrix: scores are plain dot
products, sorted descending with ties broken by ascending corpus index (a
stable sort on the negated scores).  The reference image is excluded from the
candidate pool by default, matching the usual composed-retrieval protocol.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .config import Mechanism, PromptMode, TrainConfig
from .dataset import Corpus, Triplet
from .errors import NumericError, ReferentialError, StructuralError
from .model import RetrievalModel
from .training import TrainerState, train


class CorpusEmbeddings(NamedTuple):
    """Unit-norm candidate embeddings, one row per corpus image, in corpus order."""

    ids: tuple[str, ...]
    matrix: torch.Tensor


@dataclass(frozen=True)
class RankedResult:
    """Full candidate ordering for one query, best first."""

    query_id: str
    ranked_ids: tuple[str, ...]
    target_rank: int
    subset_rank: Optional[int] = None


@dataclass
class RecallTable:
    """Recall@K (and subset recall) over a result set."""

    recall_at: dict[int, float]
    subset_recall_at: dict[int, float]
    n_queries: int
    n_subset_queries: int
    groups: Optional[dict[str, "RecallTable"]] = None

    def cells(self) -> dict[str, float]:
        """Flat column view, named `R@{K}` / `Rs@{K}`."""
        out = {f"R@{k}": v for k, v in sorted(self.recall_at.items())}
        out.update({f"Rs@{k}": v for k, v in sorted(self.subset_recall_at.items())})
        return out

    def mean_of_cells(self) -> float:
        cells = self.cells()
        return float(sum(cells.values()) / len(cells))


def embed_corpus(corpus: Corpus, model: RetrievalModel) -> CorpusEmbeddings:
    """Embed every corpus image with the target head; rows follow corpus order."""
    dtype = next(model.parameters()).dtype
    rows: list[Optional[torch.Tensor]] = [None] * len(corpus)
    buckets: dict[int, list[int]] = {}
    for i, img_id in enumerate(corpus.ids):
        buckets.setdefault(corpus.features(img_id).shape[0], []).append(i)
    with torch.no_grad():
        for idxs in buckets.values():
            stack = torch.stack([corpus.features(corpus.ids[i]) for i in idxs]).to(dtype)
            try:
                embs = model.target_embeddings(stack)
            except NumericError:
                # find and name the offending image
                for i in idxs:
                    img_id = corpus.ids[i]
                    try:
                        model.target_embeddings(corpus.features(img_id).to(dtype))
                    except NumericError as exc:
                        raise NumericError(f"image {img_id}: {exc}") from exc
                raise
            for j, i in enumerate(idxs):
                rows[i] = embs[j]
    return CorpusEmbeddings(tuple(corpus.ids), torch.stack(rows))


def query_embedding(
    triplet: Triplet,
    model: RetrievalModel,
    corpus: Corpus,
    mechanism: Mechanism,
    prompt_mode: PromptMode,
) -> torch.Tensor:
    """Embed one query per the configured mechanism (no gradients)."""
    dtype = next(model.parameters()).dtype
    ref = corpus.features(triplet.reference_id).unsqueeze(0).to(dtype)
    caption = torch.tensor([list(triplet.caption)], dtype=torch.long)
    with torch.no_grad():
        U, _ = model.query_embeddings(ref, caption, mechanism, prompt_mode)
    return U[0]


def rank_query(
    triplet: Triplet,
    corpus_embs: CorpusEmbeddings,
    model: RetrievalModel,
    mechanism: Mechanism,
    prompt_mode: PromptMode,
    corpus: Corpus,
    *,
    exclude_reference: bool = True,
) -> RankedResult:
    """Rank all candidates for one query.

    Scores are dot products against `corpus_embs`; the ordering is descending
    score with ties broken by ascending corpus index.  The reference image is
    removed from the pool when `exclude_reference` is set.
    """
    index_of = {img_id: i for i, img_id in enumerate(corpus_embs.ids)}
    if triplet.target_id not in index_of:
        raise ReferentialError(f"target {triplet.target_id!r} not in embedded corpus")
    u = query_embedding(triplet, model, corpus, mechanism, prompt_mode)
    scores = (corpus_embs.matrix @ u).cpu().numpy()
    order = np.argsort(-scores, kind="stable")

    drop = index_of.get(triplet.reference_id) if exclude_reference else None
    ranked_ids = tuple(corpus_embs.ids[i] for i in order if i != drop)
    position = {img_id: pos for pos, img_id in enumerate(ranked_ids)}
    if triplet.target_id not in position:
        raise ReferentialError(
            f"target {triplet.target_id!r} was excluded from the pool as the reference image"
        )
    target_rank = position[triplet.target_id] + 1

    subset_rank = None
    if triplet.subset_ids is not None:
        pool = [s for s in triplet.subset_ids if s in position]
        if triplet.target_id not in pool:
            raise ReferentialError(
                f"query {triplet.query_id!r}: target missing from its subset pool"
            )
        t_pos = position[triplet.target_id]
        subset_rank = 1 + sum(1 for s in pool if position[s] < t_pos)
    return RankedResult(triplet.query_id, ranked_ids, target_rank, subset_rank)


def compute_recall(results: Sequence[RankedResult], ks: Sequence[int]) -> RecallTable:
    """Recall@K = fraction of queries with target_rank <= K; subset analogously."""
    if not results:
        raise ValueError("compute_recall: empty result list")
    ks = list(ks)
    if not ks or any((not isinstance(k, int)) or k < 1 for k in ks):
        raise ValueError(f"Ks must be positive integers, got {ks!r}")
    n = len(results)
    recall_at = {k: sum(1 for r in results if r.target_rank <= k) / n for k in sorted(set(ks))}
    with_subset = [r for r in results if r.subset_rank is not None]
    subset_recall_at = {}
    if with_subset:
        m = len(with_subset)
        subset_recall_at = {
            k: sum(1 for r in with_subset if r.subset_rank <= k) / m for k in sorted(set(ks))
        }
    return RecallTable(recall_at, subset_recall_at, n, len(with_subset))


@dataclass(frozen=True)
class FashionAverageSummary:
    """Class-averaged metrics plus the grand mean under two labeled conventions.

    `grand_mean` averages the full-precision per-metric means.  `grand_mean_rounded_cells`
    first rounds every class/metric cell to `ndigits` decimals (the precision tables are
    typically printed at) and averages those — the two differ once cells have been rounded
    for publication, which is why both are exported with labels.
    """

    metric_means: dict[int, float]
    grand_mean: float
    grand_mean_rounded_cells: float
    ndigits: int
    convention: str = "mean_of_metric_means"
    rounded_convention: str = "mean_of_rounded_cells"


def fashioniq_average(
    per_class: Mapping[str, RecallTable],
    metrics: Sequence[int] = (10, 50),
    *,
    ndigits: int = 2,
) -> FashionAverageSummary:
    """Unweighted per-metric means over classes plus their grand mean."""
    if not per_class:
        raise ValueError("fashioniq_average: no class tables")
    metrics = list(metrics)
    for name, table in per_class.items():
        for k in metrics:
            if k not in table.recall_at:
                raise StructuralError(f"class {name!r} is missing R@{k}")
    metric_means = {
        k: sum(t.recall_at[k] for t in per_class.values()) / len(per_class) for k in metrics
    }
    grand = sum(metric_means.values()) / len(metric_means)
    rounded_cells = [
        round(t.recall_at[k], ndigits) for t in per_class.values() for k in metrics
    ]
    return FashionAverageSummary(
        metric_means=metric_means,
        grand_mean=float(grand),
        grand_mean_rounded_cells=float(sum(rounded_cells) / len(rounded_cells)),
        ndigits=ndigits,
    )


# --------------------------------------------------------------------------
# two-stage re-ranking
# --------------------------------------------------------------------------


class PairScorer(Protocol):
    """Joint scorer for (query, candidate) pairs used by the second stage."""

    name: str

    def score(self, query_emb: torch.Tensor, candidate_features: torch.Tensor) -> torch.Tensor:
        """query_emb [d_embed], candidate_features [M, n_patches, d_img] -> scores [M]."""
        ...


class IdentityScorer:
    """Keeps the first-stage order: strictly decreasing scores over the prefix."""

    name = "identity"

    def score(self, query_emb: torch.Tensor, candidate_features: torch.Tensor) -> torch.Tensor:
        m = candidate_features.shape[0]
        return torch.arange(m, 0, -1, dtype=query_emb.dtype)


class CrossAttentionScorer(nn.Module):
    """Trainable joint scorer: the query embedding attends over candidate patches.

    score(q, c) = cos( attn-pooled value of c under query q , projected q )
    """

    name = "cross_attention"

    def __init__(self, d_embed: int, d_img: int, d_hidden: int = 32):
        super().__init__()
        self.w_q = nn.Linear(d_embed, d_hidden, bias=False)
        self.w_k = nn.Linear(d_img, d_hidden, bias=False)
        self.w_v = nn.Linear(d_img, d_hidden, bias=False)
        self.scale = d_hidden**-0.5

    def score(self, query_emb: torch.Tensor, candidate_features: torch.Tensor) -> torch.Tensor:
        dtype = self.w_q.weight.dtype
        q = self.w_q(query_emb.to(dtype))  # [h]
        keys = self.w_k(candidate_features.to(dtype))  # [M, P, h]
        vals = self.w_v(candidate_features.to(dtype))  # [M, P, h]
        attn = torch.softmax((keys @ q) * self.scale, dim=-1)  # [M, P]
        pooled = torch.einsum("mp,mph->mh", attn, vals)  # [M, h]
        return torch.nn.functional.cosine_similarity(pooled, q.unsqueeze(0), dim=-1)

    forward = score


@dataclass
class RerankOutcome:
    results: list[RankedResult]
    skipped: list[tuple[str, str]] = field(default_factory=list)


def rerank_two_stage(
    results: Sequence[RankedResult],
    top_m: int,
    scorer: PairScorer,
    *,
    model: RetrievalModel,
    corpus: Corpus,
    triplets: Sequence[Triplet],
    mechanism: Mechanism,
    prompt_mode: PromptMode,
) -> RerankOutcome:
    """Re-score each query's top-M prefix with `scorer` and re-sort that prefix.

    The tail order is untouched.  A scorer failure skips that query with a
    warning and keeps its first-stage result; skipped queries are reported in
    the outcome summary.
    """
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    by_id = {t.query_id: t for t in triplets}
    out: list[RankedResult] = []
    skipped: list[tuple[str, str]] = []
    for result in results:
        triplet = by_id.get(result.query_id)
        try:
            if triplet is None:
                raise ReferentialError(f"no triplet for query {result.query_id!r}")
            prefix = result.ranked_ids[:top_m]
            if len(prefix) <= 1:
                out.append(result)
                continue
            u = query_embedding(triplet, model, corpus, mechanism, prompt_mode)
            cand = torch.stack([corpus.features(c) for c in prefix])
            with torch.no_grad():
                scores = scorer.score(u, cand)
            if tuple(scores.shape) != (len(prefix),):
                raise StructuralError(
                    f"scorer returned shape {tuple(scores.shape)}, wanted ({len(prefix)},)"
                )
            if not torch.isfinite(scores).all():
                raise NumericError("scorer returned non-finite scores")
            order = np.argsort(-scores.detach().cpu().numpy(), kind="stable")
            new_prefix = tuple(prefix[i] for i in order)
            if new_prefix == prefix:
                out.append(result)
                continue
            ranked_ids = new_prefix + result.ranked_ids[top_m:]
            position = {img_id: pos for pos, img_id in enumerate(ranked_ids)}
            target_rank = position[triplet.target_id] + 1
            subset_rank = None
            if triplet.subset_ids is not None:
                pool = [s for s in triplet.subset_ids if s in position]
                t_pos = position[triplet.target_id]
                subset_rank = 1 + sum(1 for s in pool if position[s] < t_pos)
            out.append(RankedResult(result.query_id, ranked_ids, target_rank, subset_rank))
        except Exception as exc:  # noqa: BLE001 - per-query isolation is the contract
            warnings.warn(
                f"rerank: query {result.query_id!r} skipped: {exc}", RuntimeWarning, stacklevel=2
            )
            skipped.append((result.query_id, f"{type(exc).__name__}: {exc}"))
            out.append(result)
    return RerankOutcome(out, skipped)


# --------------------------------------------------------------------------
# end-to-end helpers and sweeps
# --------------------------------------------------------------------------


def evaluate_model(
    model: RetrievalModel,
    corpus: Corpus,
    triplets: Sequence[Triplet],
    ks: Sequence[int] = (1, 5, 10, 50),
    *,
    mechanism: Optional[Mechanism] = None,
    prompt_mode: Optional[PromptMode] = None,
    exclude_reference: bool = True,
) -> tuple[RecallTable, list[RankedResult]]:
    """Embed the corpus once, rank every triplet, and tabulate recall."""
    mechanism = model.cfg.mechanism if mechanism is None else mechanism
    prompt_mode = model.cfg.prompt_mode if prompt_mode is None else prompt_mode
    corpus_embs = embed_corpus(corpus, model)
    results = [
        rank_query(
            t, corpus_embs, model, mechanism, prompt_mode, corpus,
            exclude_reference=exclude_reference,
        )
        for t in triplets
    ]
    return compute_recall(results, ks), results


SWEEP_AXES = ("gamma", "prompt_length", "mechanism", "prompt_mode")


@dataclass
class SweepCell:
    value: object
    seed: int
    table: Optional[RecallTable]
    error: Optional[str] = None
    records: list[dict] = field(default_factory=list)


@dataclass
class SweepRow:
    value: object
    cells: list[SweepCell]

    def mean_recall_at(self) -> dict[int, float]:
        ok = [c.table for c in self.cells if c.table is not None]
        if not ok:
            return {}
        ks = sorted(set.intersection(*(set(t.recall_at) for t in ok)))
        return {k: sum(t.recall_at[k] for t in ok) / len(ok) for k in ks}


@dataclass
class SweepTable:
    axis: str
    rows: list[SweepRow]

    @property
    def n_failed(self) -> int:
        return sum(1 for row in self.rows for c in row.cells if c.error is not None)


def _apply_axis(cfg: TrainConfig, axis: str, value: object, seed: int) -> TrainConfig:
    cfg = replace(cfg, seed=seed)
    if axis == "gamma":
        cfg = replace(cfg, gamma=float(value))
    elif axis == "prompt_length":
        cfg = replace(cfg, prompt_length=int(value))
    elif axis == "mechanism":
        cfg = replace(cfg, mechanism=Mechanism(value))
    elif axis == "prompt_mode":
        cfg = replace(cfg, prompt_mode=PromptMode(value))
    else:
        raise ValueError(f"unknown sweep axis {axis!r} (expected one of {SWEEP_AXES})")
    cfg.validate()
    return cfg


def _run_sweep_cell(args: dict) -> SweepCell:
    """Single train+eval cell; module-level so process pools can pickle it."""
    log_path = args.get("log_path")
    try:
        cfg = _apply_axis(args["base_config"], args["axis"], args["value"], args["seed"])
        state, records = train(
            cfg, args["corpus"], args["triplets"], args["vocab_size"], log_path=log_path
        )
        table, _ = evaluate_model(state.model, args["corpus"], args["eval_triplets"], args["ks"])
        return SweepCell(args["value"], args["seed"], table, records=records)
    except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
        return SweepCell(
            args["value"], args["seed"], None, error=f"{type(exc).__name__}: {exc}"
        )


def sweep(
    axis: str,
    values: Sequence[object],
    base_config: TrainConfig,
    seeds: Sequence[int],
    corpus: Corpus,
    triplets: Sequence[Triplet],
    vocab_size: int,
    *,
    eval_triplets: Optional[Sequence[Triplet]] = None,
    ks: Sequence[int] = (1, 5, 10, 50),
    workers: Optional[int] = None,
    cell_dir: Optional[str | Path] = None,
) -> SweepTable:
    """Train and evaluate one run per (value, seed); failures are recorded per
    cell and the sweep continues."""
    if not values:
        raise ValueError("sweep: values must be non-empty")
    if not seeds:
        raise ValueError("sweep: seeds must be non-empty")
    if workers is None:
        workers = int(os.environ.get("SPRC_NUM_WORKERS", "1"))
    jobs = []
    for value in values:
        for seed in seeds:
            log_path = None
            if cell_dir is not None:
                cell = Path(cell_dir) / f"{axis}={value}" / f"seed={seed}"
                cell.mkdir(parents=True, exist_ok=True)
                log_path = str(cell / "metrics.jsonl")
            jobs.append(
                {
                    "axis": axis,
                    "value": value,
                    "seed": seed,
                    "base_config": base_config,
                    "corpus": corpus,
                    "triplets": list(triplets),
                    "eval_triplets": list(eval_triplets if eval_triplets is not None else triplets),
                    "vocab_size": vocab_size,
                    "ks": list(ks),
                    "log_path": log_path,
                }
            )
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_sweep_cell, jobs))
    else:
        cells = [_run_sweep_cell(job) for job in jobs]
    for cell in cells:
        if cell.error is not None:
            warnings.warn(
                f"sweep cell ({axis}={cell.value}, seed={cell.seed}) failed: {cell.error}",
                RuntimeWarning,
                stacklevel=2,
            )
    by_value: dict[object, list[SweepCell]] = {}
    for cell in cells:
        by_value.setdefault(cell.value, []).append(cell)
    rows = [SweepRow(value, by_value[value]) for value in values]
    return SweepTable(axis, rows)
