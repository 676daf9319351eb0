"""Ranking, recall, fashion-style averaging, and two-stage re-ranking."""

from __future__ import annotations

import math

import pytest
import torch

from sprc.config import Mechanism, PromptMode, TrainConfig
from sprc.dataset import Corpus, Triplet
from sprc.errors import NumericError, ReferentialError, StructuralError
from sprc.evaluation import (
    CrossAttentionScorer,
    IdentityScorer,
    RankedResult,
    compute_recall,
    embed_corpus,
    evaluate_model,
    fashioniq_average,
    query_embedding,
    rank_query,
    rerank_two_stage,
)
from sprc.model import build_model

D_IMG = 5


def _toy_cfg(**kw) -> TrainConfig:
    base = dict(
        d_model=8, d_text=8, d_embed=6, n_heads=2, prompt_length=2,
        max_caption_len=4, batch_size=4, steps=2,
    )
    base.update(kw)
    return TrainConfig(**base).validate()


def _toy_corpus(n: int = 8, *, n_patches: int = 3, seed: int = 0) -> Corpus:
    g = torch.Generator().manual_seed(seed)
    ids = [f"img_{i:02d}" for i in range(n)]
    feats = [torch.randn(n_patches, D_IMG, generator=g) for _ in range(n)]
    return Corpus(ids, feats)


def _toy_model(cfg: TrainConfig, vocab: int = 10):
    return build_model(cfg, vocab, D_IMG)


def _triplet(i: int, ref: str, tgt: str, subset=None) -> Triplet:
    return Triplet(f"q_{i:02d}", ref, (1, 2, 3), tgt, subset)


def _oracle_order(scores, exclude: int | None) -> list[int]:
    """Descending score, ties by ascending corpus index, optional exclusion."""
    idx = [i for i in range(len(scores)) if i != exclude]
    return sorted(idx, key=lambda i: (-float(scores[i]), i))


class TestRankQuery:
    def test_matches_brute_force_over_random_instances(self):
        cfg = _toy_cfg()
        model = _toy_model(cfg)
        corpus = _toy_corpus(12)
        embs = embed_corpus(corpus, model)
        for i in range(20):
            ref = corpus.ids[i % len(corpus)]
            tgt = corpus.ids[(i * 5 + 1) % len(corpus)]
            if tgt == ref:
                continue
            t = _triplet(i, ref, tgt)
            u = query_embedding(t, model, corpus, cfg.mechanism, cfg.prompt_mode)
            scores = (embs.matrix @ u).tolist()
            expected = _oracle_order(scores, exclude=corpus.ids.index(ref))
            result = rank_query(t, embs, model, cfg.mechanism, cfg.prompt_mode, corpus)
            assert list(result.ranked_ids) == [corpus.ids[j] for j in expected]
            assert result.target_rank == 1 + [corpus.ids[j] for j in expected].index(tgt)

    def test_tied_scores_break_by_corpus_index(self):
        cfg = _toy_cfg()
        model = _toy_model(cfg)
        g = torch.Generator().manual_seed(3)
        shared = torch.randn(3, D_IMG, generator=g)
        # img_01 and img_03 share features, hence identical embeddings
        corpus = Corpus(
            ["img_00", "img_01", "img_02", "img_03"],
            [torch.randn(3, D_IMG, generator=g), shared.clone(),
             torch.randn(3, D_IMG, generator=g), shared.clone()],
        )
        embs = embed_corpus(corpus, model)
        assert torch.equal(embs.matrix[1], embs.matrix[3])
        result = rank_query(
            _triplet(0, "img_00", "img_01"), embs, model,
            cfg.mechanism, cfg.prompt_mode, corpus,
        )
        assert result.ranked_ids.index("img_01") < result.ranked_ids.index("img_03")

    def test_reference_excluded_by_default(self):
        cfg = _toy_cfg()
        model = _toy_model(cfg)
        corpus = _toy_corpus(6)
        embs = embed_corpus(corpus, model)
        res = rank_query(
            _triplet(0, "img_00", "img_01"), embs, model,
            cfg.mechanism, cfg.prompt_mode, corpus,
        )
        assert "img_00" not in res.ranked_ids and len(res.ranked_ids) == 5

    def test_reference_kept_when_asked(self):
        cfg = _toy_cfg()
        model = _toy_model(cfg)
        corpus = _toy_corpus(6)
        embs = embed_corpus(corpus, model)
        res = rank_query(
            _triplet(0, "img_00", "img_01"), embs, model,
            cfg.mechanism, cfg.prompt_mode, corpus, exclude_reference=False,
        )
        assert "img_00" in res.ranked_ids and len(res.ranked_ids) == 6

    def test_target_equal_to_excluded_reference_raises(self):
        cfg = _toy_cfg()
        model = _toy_model(cfg)
        corpus = _toy_corpus(6)
        embs = embed_corpus(corpus, model)
        with pytest.raises(ReferentialError, match="excluded"):
            rank_query(
                _triplet(0, "img_00", "img_00"), embs, model,
                cfg.mechanism, cfg.prompt_mode, corpus,
            )

    def test_unknown_target_raises(self):
        cfg = _toy_cfg()
        model = _toy_model(cfg)
        corpus = _toy_corpus(4)
        embs = embed_corpus(corpus, model)
        with pytest.raises(ReferentialError):
            rank_query(
                _triplet(0, "img_00", "img_99"), embs, model,
                cfg.mechanism, cfg.prompt_mode, corpus,
            )

    def test_subset_rank_matches_brute_force(self):
        cfg = _toy_cfg()
        model = _toy_model(cfg)
        corpus = _toy_corpus(10)
        embs = embed_corpus(corpus, model)
        subset = ("img_03", "img_05", "img_07")
        t = _triplet(0, "img_00", "img_05", subset)
        res = rank_query(t, embs, model, cfg.mechanism, cfg.prompt_mode, corpus)
        members = sorted(subset, key=res.ranked_ids.index)
        assert res.subset_rank == 1 + members.index("img_05")

    def test_subset_missing_target_raises(self):
        cfg = _toy_cfg()
        model = _toy_model(cfg)
        corpus = _toy_corpus(6)
        embs = embed_corpus(corpus, model)
        t = _triplet(0, "img_00", "img_01", ("img_02", "img_03"))
        with pytest.raises(ReferentialError, match="subset"):
            rank_query(t, embs, model, cfg.mechanism, cfg.prompt_mode, corpus)


def _fake_results(ranks, subset_ranks=None):
    subset_ranks = subset_ranks or [None] * len(ranks)
    return [
        RankedResult(f"q{i}", ("a", "b"), r, s)
        for i, (r, s) in enumerate(zip(ranks, subset_ranks))
    ]


class TestComputeRecall:
    def test_matches_counting_oracle(self):
        g = torch.Generator().manual_seed(9)
        for trial in range(50):
            n = int(torch.randint(1, 30, (1,), generator=g))
            ranks = torch.randint(1, 20, (n,), generator=g).tolist()
            ks = sorted(set(torch.randint(1, 20, (3,), generator=g).tolist()))
            table = compute_recall(_fake_results(ranks), ks)
            for k in ks:
                assert table.recall_at[k] == sum(1 for r in ranks if r <= k) / n

    def test_monotone_in_k(self):
        g = torch.Generator().manual_seed(10)
        for trial in range(20):
            ranks = torch.randint(1, 15, (25,), generator=g).tolist()
            table = compute_recall(_fake_results(ranks), [1, 3, 5, 10, 20])
            vals = [table.recall_at[k] for k in sorted(table.recall_at)]
            assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_subset_counts_only_subset_queries(self):
        table = compute_recall(_fake_results([1, 5, 2], [1, None, 2]), [1, 2])
        assert table.n_queries == 3 and table.n_subset_queries == 2
        assert table.subset_recall_at[1] == 0.5 and table.subset_recall_at[2] == 1.0

    def test_cells_column_names(self):
        table = compute_recall(_fake_results([1, 2], [1, 1]), [2, 1])
        assert list(table.cells()) == ["R@1", "R@2", "Rs@1", "Rs@2"]

    def test_empty_results_rejected(self):
        with pytest.raises(ValueError):
            compute_recall([], [1])

    def test_bad_k_rejected(self):
        with pytest.raises(ValueError):
            compute_recall(_fake_results([1]), [0])
        with pytest.raises(ValueError):
            compute_recall(_fake_results([1]), [])


class TestFashionAverage:
    def test_two_conventions_differ_after_rounding(self):
        tables = {
            "dress": compute_recall(_fake_results([1, 3, 3]), [1, 5]),      # R@1 = 1/3
            "shirt": compute_recall(_fake_results([1, 1, 2]), [1, 5]),      # R@1 = 2/3
        }
        summary = fashioniq_average(tables, metrics=(1, 5), ndigits=2)
        assert math.isclose(summary.metric_means[1], 0.5, rel_tol=1e-12)
        assert math.isclose(summary.metric_means[5], 1.0, rel_tol=1e-12)
        assert math.isclose(summary.grand_mean, 0.75, rel_tol=1e-12)
        # rounded cells: 0.33, 0.67, 1.0, 1.0 -> mean 0.75 exactly here;
        # use asymmetric thirds to expose the difference
        tables["pants"] = compute_recall(_fake_results([1, 3, 3]), [1, 5])  # R@1 = 1/3
        summary = fashioniq_average(tables, metrics=(1,), ndigits=2)
        full = (1 / 3 + 2 / 3 + 1 / 3) / 3
        rounded = (0.33 + 0.67 + 0.33) / 3
        assert math.isclose(summary.grand_mean, full, rel_tol=1e-12)
        assert math.isclose(summary.grand_mean_rounded_cells, rounded, rel_tol=1e-12)
        assert summary.grand_mean != summary.grand_mean_rounded_cells
        assert summary.convention == "mean_of_metric_means"
        assert summary.rounded_convention == "mean_of_rounded_cells"

    def test_missing_metric_names_class(self):
        tables = {"dress": compute_recall(_fake_results([1]), [1])}
        with pytest.raises(StructuralError, match="'dress' is missing R@50"):
            fashioniq_average(tables, metrics=(1, 50))

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            fashioniq_average({})


class _FailingScorer:
    name = "failing"

    def score(self, query_emb, candidate_features):
        raise RuntimeError("scorer exploded")


class TestRerank:
    def _setup(self, n=10):
        cfg = _toy_cfg()
        model = _toy_model(cfg)
        corpus = _toy_corpus(n)
        embs = embed_corpus(corpus, model)
        trips = [
            _triplet(i, corpus.ids[i], corpus.ids[(i + 1) % n]) for i in range(4)
        ]
        results = [
            rank_query(t, embs, model, cfg.mechanism, cfg.prompt_mode, corpus)
            for t in trips
        ]
        return cfg, model, corpus, trips, results

    def test_identity_scorer_keeps_everything(self):
        cfg, model, corpus, trips, results = self._setup()
        outcome = rerank_two_stage(
            results, 5, IdentityScorer(), model=model, corpus=corpus,
            triplets=trips, mechanism=cfg.mechanism, prompt_mode=cfg.prompt_mode,
        )
        assert outcome.skipped == []
        for before, after in zip(results, outcome.results):
            assert after is before  # unchanged prefix reuses the object

    def test_tail_untouched_and_ranks_recomputed(self):
        cfg, model, corpus, trips, results = self._setup()
        torch.manual_seed(11)
        scorer = CrossAttentionScorer(d_embed=cfg.d_embed, d_img=D_IMG)
        top_m = 4
        outcome = rerank_two_stage(
            results, top_m, scorer, model=model, corpus=corpus,
            triplets=trips, mechanism=cfg.mechanism, prompt_mode=cfg.prompt_mode,
        )
        assert outcome.skipped == []
        for before, after in zip(results, outcome.results):
            assert sorted(after.ranked_ids[:top_m]) == sorted(before.ranked_ids[:top_m])
            assert after.ranked_ids[top_m:] == before.ranked_ids[top_m:]
            tgt = trips[outcome.results.index(after)].target_id
            assert after.target_rank == 1 + after.ranked_ids.index(tgt)

    def test_failing_scorer_skips_with_warning(self):
        cfg, model, corpus, trips, results = self._setup()
        with pytest.warns(RuntimeWarning, match="skipped"):
            outcome = rerank_two_stage(
                results, 5, _FailingScorer(), model=model, corpus=corpus,
                triplets=trips, mechanism=cfg.mechanism, prompt_mode=cfg.prompt_mode,
            )
        assert len(outcome.skipped) == len(results)
        assert [r.query_id for r, _ in zip(results, outcome.skipped)]
        for before, after in zip(results, outcome.results):
            assert after is before

    def test_bad_top_m(self):
        cfg, model, corpus, trips, results = self._setup()
        with pytest.raises(ValueError):
            rerank_two_stage(
                results, 0, IdentityScorer(), model=model, corpus=corpus,
                triplets=trips, mechanism=cfg.mechanism, prompt_mode=cfg.prompt_mode,
            )


class TestEmbedCorpus:
    def test_mixed_patch_counts_bucketed_in_order(self):
        cfg = _toy_cfg()
        model = _toy_model(cfg)
        g = torch.Generator().manual_seed(5)
        ids = ["a", "b", "c", "d"]
        feats = [
            torch.randn(3, D_IMG, generator=g), torch.randn(6, D_IMG, generator=g),
            torch.randn(3, D_IMG, generator=g), torch.randn(6, D_IMG, generator=g),
        ]
        corpus = Corpus(ids, feats)
        embs = embed_corpus(corpus, model)
        assert embs.ids == ("a", "b", "c", "d")
        assert embs.matrix.shape == (4, cfg.d_embed)
        for i, img_id in enumerate(ids):
            single = model.target_embeddings(corpus.features(img_id).unsqueeze(0))
            assert torch.allclose(embs.matrix[i], single.squeeze(0), atol=1e-6)

    def test_non_finite_image_is_named(self):
        cfg = _toy_cfg()
        model = _toy_model(cfg)
        corpus = Corpus(["good", "evil"], [torch.randn(3, D_IMG), torch.randn(3, D_IMG)])
        corpus.features("evil").fill_(float("nan"))  # corrupt after validation
        with pytest.raises(NumericError, match="evil"):
            embed_corpus(corpus, model)


class TestEvaluateModel:
    def test_end_to_end_table(self):
        cfg = _toy_cfg()
        model = _toy_model(cfg)
        corpus = _toy_corpus(8)
        trips = [_triplet(i, corpus.ids[i], corpus.ids[i + 1]) for i in range(4)]
        table, results = evaluate_model(model, corpus, trips, ks=(1, 3, 8))
        assert len(results) == 4 and table.n_queries == 4
        assert list(table.recall_at) == [1, 3, 8]
        assert all(0.0 <= v <= 1.0 for v in table.recall_at.values())
