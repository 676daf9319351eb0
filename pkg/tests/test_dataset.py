"""Tests for the dataset layer: vocabulary, manifests, synthetic task, cache."""

import collections

import pytest
import torch

from sprc.dataset import (
    Corpus,
    SyntheticSpec,
    Triplet,
    Vocabulary,
    apply_edit_program,
    decode_slots,
    generate_synthetic,
    load_corpus_features,
    load_triplets,
    multiset_key,
    read_embedding_cache,
    save_corpus_features,
    slot_feature_table,
    slots_to_features,
    split_triplets,
    synthetic_vocabulary,
    write_embedding_cache,
    write_triplets,
)
from sprc.errors import (
    CacheFormatError,
    ConfigError,
    ManifestError,
    ReferentialError,
    VocabularyError,
)

# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def test_vocabulary_round_trip(tmp_path):
    vocab = Vocabulary(["PAD", "ADD", "obj0", "attr0"])
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    again = Vocabulary.load(path)
    assert again == vocab
    assert again.id("obj0") == 2
    assert again.token(3) == "attr0"


def test_vocabulary_rejects_duplicates_and_blank():
    with pytest.raises(VocabularyError):
        Vocabulary(["a", "a"])
    with pytest.raises(VocabularyError):
        Vocabulary(["a", ""])
    with pytest.raises(VocabularyError):
        Vocabulary(["a", "has space"])


def test_vocabulary_unknown_token():
    vocab = Vocabulary(["a", "b"])
    with pytest.raises(VocabularyError):
        vocab.id("c")
    with pytest.raises(VocabularyError):
        vocab.token(7)


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


def test_corpus_ordering_and_lookup():
    feats = [torch.randn(3, 4), torch.randn(2, 4)]
    corpus = Corpus(["b", "a"], feats)
    assert corpus.ids == ("b", "a")  # insertion order defines candidate index
    assert corpus.index_of("a") == 1
    assert torch.equal(corpus.features("b"), feats[0])
    with pytest.raises(ReferentialError):
        corpus.features("missing")


def test_corpus_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Corpus(["a", "a"], [torch.randn(1, 4), torch.randn(1, 4)])  # dup ids
    with pytest.raises(ValueError):
        Corpus(["a"], [torch.randn(0, 4)])  # zero patches
    with pytest.raises(ValueError):
        Corpus(["a", "b"], [torch.randn(1, 4), torch.randn(1, 5)])  # mixed d_img
    bad = torch.ones(1, 4)
    bad[0, 0] = float("nan")
    with pytest.raises(ValueError):
        Corpus(["a"], [bad])


# ---------------------------------------------------------------------------
# synthetic task: slots, features, edit programs
# ---------------------------------------------------------------------------


def test_slot_features_round_trip():
    spec = SyntheticSpec()
    table = slot_feature_table(spec)
    slots = ((0, 1), None, (3, 2))
    feats = slots_to_features(spec, slots, table)
    assert feats.shape == (spec.n_slots, spec.d_img)
    assert decode_slots(feats, spec, table) == slots


def test_slot_feature_table_deterministic():
    spec = SyntheticSpec(seed=5)
    assert torch.equal(slot_feature_table(spec), slot_feature_table(spec))


def test_remove_edit_matches_definition():
    # reference {("cat","red"), ("dog","blue")}; removing "dog" leaves
    # {("cat","red"), EMPTY}
    spec = SyntheticSpec(n_slots=2)
    cat, dog, red, blue = 0, 1, 0, 1
    slots = ((cat, red), (dog, blue))
    caption = (spec.obj_token(dog), 0, 0)
    caption = (2, spec.obj_token(dog), 0)  # [REMOVE dog PAD]
    target = apply_edit_program(slots, caption, spec)
    assert target == multiset_key(((cat, red), None))


def test_add_and_modify_edits():
    spec = SyntheticSpec(n_slots=2)
    slots = ((0, 0), None)
    added = apply_edit_program(slots, (1, spec.obj_token(1), spec.attr_token(2)), spec)
    assert added == multiset_key(((0, 0), (1, 2)))
    modified = apply_edit_program(slots, (3, spec.obj_token(0), spec.attr_token(3)), spec)
    assert modified == multiset_key(((0, 3), None))


def test_edit_program_rejects_incompatible():
    spec = SyntheticSpec(n_slots=2)
    full = ((0, 0), (1, 1))
    with pytest.raises(ConfigError):
        apply_edit_program(full, (1, spec.obj_token(2), spec.attr_token(0)), spec)  # no room
    with pytest.raises(ConfigError):
        apply_edit_program(full, (2, spec.obj_token(5), 0), spec)  # absent object
    with pytest.raises(ConfigError):
        # MODIFY to the attribute already present is not an edit
        apply_edit_program(full, (3, spec.obj_token(0), spec.attr_token(0)), spec)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def test_generate_modify_only_single_slot():
    spec = SyntheticSpec(
        n_slots=1, corpus_size=2, edit_mix={"MODIFY": 1.0}, seed=7, empty_prob=0.0
    )
    corpus, triplets, vocab = generate_synthetic(spec)
    assert len(corpus) == 2
    assert triplets, "generator produced no triplets"
    table = slot_feature_table(spec)
    for t in triplets:
        assert t.caption[0] == vocab.id("MODIFY")
        ref = decode_slots(corpus.features(t.reference_id), spec, table)
        tgt = decode_slots(corpus.features(t.target_id), spec, table)
        assert ref[0] is not None and tgt[0] is not None
        assert ref[0][0] == tgt[0][0]  # same object
        assert ref[0][1] != tgt[0][1]  # attribute changed


def test_generate_deterministic():
    spec = SyntheticSpec(seed=3)
    c1, t1, v1 = generate_synthetic(spec)
    c2, t2, v2 = generate_synthetic(spec)
    assert t1 == t2
    assert v1 == v2
    assert c1.ids == c2.ids
    for img_id in c1.ids:
        assert torch.equal(c1.features(img_id), c2.features(img_id))


def test_generated_triplets_satisfy_edit_semantics():
    """Applying each caption's edit program to the decoded reference yields
    exactly the decoded target multiset."""
    spec = SyntheticSpec(seed=11)
    corpus, triplets, _ = generate_synthetic(spec)
    table = slot_feature_table(spec)
    for t in triplets:
        ref = decode_slots(corpus.features(t.reference_id), spec, table)
        tgt = decode_slots(corpus.features(t.target_id), spec, table)
        assert apply_edit_program(ref, t.caption, spec) == multiset_key(tgt)


def test_generated_subsets_contain_target_not_reference():
    spec = SyntheticSpec(seed=2)
    _, triplets, _ = generate_synthetic(spec)
    assert any(t.subset_ids is not None for t in triplets)
    for t in triplets:
        if t.subset_ids is None:
            continue
        assert len(t.subset_ids) >= 2
        assert t.target_id in t.subset_ids
        assert t.reference_id not in t.subset_ids
        assert len(set(t.subset_ids)) == len(t.subset_ids)


def test_generate_respects_edit_mix_support():
    spec = SyntheticSpec(seed=4, edit_mix={"REMOVE": 0.5, "MODIFY": 0.5})
    _, triplets, vocab = generate_synthetic(spec)
    ops = collections.Counter(t.caption[0] for t in triplets)
    assert vocab.id("ADD") not in ops
    assert set(ops) <= {vocab.id("REMOVE"), vocab.id("MODIFY")}


def test_generate_fixed_count_too_small_corpus():
    spec = SyntheticSpec(
        n_slots=1,
        n_object_types=2,
        n_attr_values=8,
        corpus_size=2,
        n_triplets=500,
        edit_mix={"MODIFY": 1.0},
        empty_prob=0.0,
        seed=0,
    )
    with pytest.raises(ConfigError):
        generate_synthetic(spec)


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(corpus_size=1).validate()
    with pytest.raises(ConfigError):
        SyntheticSpec(edit_mix={"ADD": 0.7, "REMOVE": 0.7}).validate()
    with pytest.raises(ConfigError):
        SyntheticSpec(edit_mix={"GROW": 1.0}).validate()
    with pytest.raises(ConfigError):
        SyntheticSpec(n_attr_values=1, edit_mix={"MODIFY": 1.0}).validate()
    SyntheticSpec().validate()  # defaults are valid


# ---------------------------------------------------------------------------
# triplet manifests
# ---------------------------------------------------------------------------


@pytest.fixture()
def small_vocab():
    return Vocabulary(["PAD", "ADD", "REMOVE", "MODIFY", "obj0", "obj1", "attr0"])


def test_load_triplets_empty_file(tmp_path, small_vocab):
    path = tmp_path / "t.tsv"
    path.write_text("")
    assert load_triplets(path, small_vocab) == []


def test_load_triplets_order_and_round_trip(tmp_path, small_vocab):
    triplets = [
        Triplet("q0", "i0", (2, 4, 0), "i1", None),
        Triplet("q1", "i1", (1, 5, 6), "i2", ("i2", "i0")),
        Triplet("q2", "i2", (3, 4, 6), "i0", None),
    ]
    path = tmp_path / "t.tsv"
    write_triplets(path, triplets, small_vocab)
    again = load_triplets(path, small_vocab)
    assert again == triplets  # file order preserved


def test_load_triplets_missing_field_names_line(tmp_path, small_vocab):
    path = tmp_path / "t.tsv"
    path.write_text("q0\ti0\tADD obj0\n")  # no target field
    with pytest.raises(ManifestError) as exc:
        load_triplets(path, small_vocab)
    assert ":1:" in str(exc.value)  # names line 1


def test_load_triplets_unknown_token(tmp_path, small_vocab):
    path = tmp_path / "t.tsv"
    path.write_text("q0\ti0\tADD wat\ti1\n")
    with pytest.raises(VocabularyError) as exc:
        load_triplets(path, small_vocab)
    assert ":1:" in str(exc.value)  # names line 1


def test_load_triplets_referential_check(tmp_path, small_vocab):
    corpus = Corpus(["i0", "i1"], [torch.randn(1, 4), torch.randn(1, 4)])
    path = tmp_path / "t.tsv"
    path.write_text("q0\ti0\tADD obj0\ti9\n")
    with pytest.raises(ReferentialError):
        load_triplets(path, small_vocab, corpus=corpus)


def test_load_triplets_subset_invariants(tmp_path, small_vocab):
    path = tmp_path / "t.tsv"
    path.write_text("q0\ti0\tADD obj0\ti1\ti1,i0\n")  # reference inside subset
    with pytest.raises(ManifestError):
        load_triplets(path, small_vocab)


def test_load_triplets_caption_length_bound(tmp_path, small_vocab):
    path = tmp_path / "t.tsv"
    path.write_text("q0\ti0\tADD obj0 attr0 attr0 attr0\ti1\n")
    with pytest.raises(ManifestError):
        load_triplets(path, small_vocab, max_caption_len=3)


# ---------------------------------------------------------------------------
# embedding cache
# ---------------------------------------------------------------------------


def test_cache_round_trip_exact(tmp_path):
    path = tmp_path / "c.bin"
    mat = torch.randn(3, 4)
    write_embedding_cache(path, ["a", "b", "c"], mat)
    ids, again = read_embedding_cache(path)
    assert ids == ["a", "b", "c"]
    assert torch.equal(again, mat)


def test_cache_empty_round_trip(tmp_path):
    path = tmp_path / "c.bin"
    write_embedding_cache(path, [], torch.zeros(0, 4))
    ids, mat = read_embedding_cache(path)
    assert ids == []
    assert mat.shape == (0, 4)


def test_cache_bad_magic(tmp_path):
    path = tmp_path / "c.bin"
    write_embedding_cache(path, ["a"], torch.zeros(1, 2))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CacheFormatError):
        read_embedding_cache(path)


def test_cache_truncated_payload(tmp_path):
    path = tmp_path / "c.bin"
    write_embedding_cache(path, ["a", "b"], torch.zeros(2, 3))
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(CacheFormatError):
        read_embedding_cache(path)


def test_corpus_features_round_trip(tmp_path):
    spec = SyntheticSpec(seed=9)
    corpus, _, _ = generate_synthetic(spec)
    path = tmp_path / "corpus.bin"
    save_corpus_features(path, corpus)
    again = load_corpus_features(path)
    assert again.ids == corpus.ids
    for img_id in corpus.ids:
        assert torch.equal(again.features(img_id), corpus.features(img_id))


def test_corpus_features_non_contiguous_rows(tmp_path):
    path = tmp_path / "corpus.bin"
    write_embedding_cache(path, ["a", "b", "a"], torch.randn(3, 4))
    with pytest.raises(CacheFormatError):
        load_corpus_features(path)


class TestSplitTriplets:
    def _spec(self):
        return SyntheticSpec(
            n_slots=3, n_object_types=8, n_attr_values=4, corpus_size=64,
            edit_mix={"REMOVE": 0.5, "MODIFY": 0.5}, n_triplets=400, seed=0,
        )

    def test_pairs_are_disjoint_and_deduplicated(self):
        _, triplets, _ = generate_synthetic(self._spec())
        train, eval_set = split_triplets(triplets)
        train_pairs = {(t.reference_id, t.caption) for t in train}
        eval_pairs = {(t.reference_id, t.caption) for t in eval_set}
        assert not train_pairs & eval_pairs
        assert len(train_pairs) == len(train) and len(eval_pairs) == len(eval_set)
        all_pairs = {(t.reference_id, t.caption) for t in triplets}
        assert train_pairs | eval_pairs == all_pairs

    def test_fraction_controls_eval_size(self):
        _, triplets, _ = generate_synthetic(self._spec())
        uniq = {(t.reference_id, t.caption) for t in triplets}
        train, eval_set = split_triplets(triplets, eval_fraction=0.25)
        assert len(eval_set) == int(len(uniq) * 0.25)
        train0, eval0 = split_triplets(triplets, eval_fraction=0.0)
        assert eval0 == [] and len(train0) == len(uniq)

    def test_deterministic_under_seed(self):
        _, triplets, _ = generate_synthetic(self._spec())
        a = split_triplets(triplets, seed=7)
        b = split_triplets(triplets, seed=7)
        assert [t.query_id for t in a[0]] == [t.query_id for t in b[0]]
        assert [t.query_id for t in a[1]] == [t.query_id for t in b[1]]
        c = split_triplets(triplets, seed=8)
        assert [t.query_id for t in a[1]] != [t.query_id for t in c[1]]

    def test_bad_fraction_rejected(self):
        with pytest.raises(ValueError):
            split_triplets([], eval_fraction=1.0)

    def test_empty_input(self):
        assert split_triplets([]) == ([], [])
