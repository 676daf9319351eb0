"""Triplet manifests, the synthetic compositional-edit task, and the embedding cache.

A retrieval instance is a triplet: reference image, relative caption, target
image.  The synthetic task makes ground truth decidable: every image is a fixed
number of slots, each slot EMPTY or holding an (object, attribute) pair, and
every caption is a 3-token edit program (ADD / REMOVE / MODIFY) whose result is
the target's slot multiset.  Slot features are seeded random embeddings, one
patch per slot, so the edit signal is recoverable by cross-attention.

File formats (all little-endian, UTF-8):
  * triplet manifest: TSV lines ``query_id  reference_id  caption-words
    target_id  [subset_ids,comma,separated]``
  * vocabulary: one token per line; line number = token id
  * embedding cache: magic ``SPRCEMB1``, u32 n, u32 d, n null-terminated ids,
    then n*d binary32 values row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
import torch

from .errors import (
    CacheFormatError,
    ConfigError,
    ManifestError,
    ReferentialError,
    VocabularyError,
)

# Edit-program opcodes. Token ids: PAD=0, then opcodes, then objects, then attrs.
PAD_TOKEN = "PAD"
EDIT_OPS = ("ADD", "REMOVE", "MODIFY")

CACHE_MAGIC = b"SPRCEMB2"
_CACHE_WIDTHS = {torch.float32: 4, torch.float64: 8}
_CACHE_NUMPY = {4: "<f4", 8: "<f8"}

# A slot is either None (empty) or an (object_index, attr_index) pair.
Slot = Optional[tuple[int, int]]
Slots = tuple[Slot, ...]


class Vocabulary:
    """Bidirectional token <-> id map; ids are dense and start at 0."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        seen = set()
        for tok in tokens:
            if not tok or any(c.isspace() for c in tok):
                raise VocabularyError(f"invalid token {tok!r}: empty or contains whitespace")
            if tok in seen:
                raise VocabularyError(f"duplicate token {tok!r}")
            seen.add(tok)
        self._tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise VocabularyError(f"token id {idx} outside [0, {len(self._tokens)})")
        return self._tokens[idx]

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def encode(self, words: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id(w) for w in words)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.token(i) for i in ids)

    def save(self, path: str | Path) -> None:
        _atomic_write_bytes(Path(path), "".join(t + "\n" for t in self._tokens).encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.splitlines()
        return cls(lines)


@dataclass(frozen=True)
class Triplet:
    """One retrieval query: change `reference_id` per `caption`, find `target_id`."""

    query_id: str
    reference_id: str
    caption: tuple[int, ...]
    target_id: str
    subset_ids: Optional[tuple[str, ...]] = None


class Corpus:
    """Ordered candidate pool: image id -> patch-feature matrix [n_patches, d_img]."""

    def __init__(self, ids: Sequence[str], features: Sequence[torch.Tensor]):
        if len(ids) != len(features):
            raise ValueError("ids and features length mismatch")
        if len(set(ids)) != len(ids):
            raise ValueError("corpus ids must be unique")
        feats = []
        for img_id, f in zip(ids, features):
            f = torch.as_tensor(f)
            if f.ndim != 2 or f.shape[0] < 1:
                raise ValueError(f"features of {img_id!r} must be [n_patches >= 1, d_img]")
            if feats and f.shape[1] != feats[0].shape[1]:
                raise ValueError(
                    f"features of {img_id!r} have d_img={f.shape[1]}, "
                    f"expected {feats[0].shape[1]}"
                )
            if not torch.isfinite(f).all():
                raise ValueError(f"features of {img_id!r} contain non-finite entries")
            feats.append(f)
        self._ids = tuple(ids)
        self._features = feats
        self._index = {img_id: i for i, img_id in enumerate(self._ids)}

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def d_img(self) -> int:
        return self._features[0].shape[1] if self._features else 0

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, img_id: str) -> bool:
        return img_id in self._index

    def features(self, img_id: str) -> torch.Tensor:
        try:
            return self._features[self._index[img_id]]
        except KeyError:
            raise ReferentialError(f"image id {img_id!r} not in corpus") from None

    def index_of(self, img_id: str) -> int:
        try:
            return self._index[img_id]
        except KeyError:
            raise ReferentialError(f"image id {img_id!r} not in corpus") from None

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(zip(self._ids, self._features))


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic compositional-edit task.

    `n_triplets=None` generates triplets until the corpus reaches
    `corpus_size`; a fixed count errors out if the targets cannot all be
    hosted.  `empty_prob` is the per-slot probability of sampling EMPTY.
    """

    n_slots: int = 3
    n_object_types: int = 8
    n_attr_values: int = 4
    edit_mix: dict[str, float] = field(
        default_factory=lambda: {"ADD": 1 / 3, "REMOVE": 1 / 3, "MODIFY": 1 / 3}
    )
    corpus_size: int = 64
    seed: int = 0
    n_triplets: Optional[int] = None
    d_img: int = 16
    empty_prob: float = 0.3
    k_subset: int = 6

    def validate(self) -> None:
        for name in ("n_slots", "n_object_types", "n_attr_values", "corpus_size", "d_img"):
            if getattr(self, name) < 1:
                raise ConfigError(f"SyntheticSpec.{name} must be >= 1")
        if self.corpus_size < 2:
            raise ConfigError("corpus_size must be >= 2 (reference and target must coexist)")
        if self.n_triplets is not None and self.n_triplets < 1:
            raise ConfigError("n_triplets must be >= 1 when given")
        if not 0.0 <= self.empty_prob < 1.0:
            raise ConfigError("empty_prob must be in [0, 1)")
        if self.k_subset < 2:
            raise ConfigError("k_subset must be >= 2")
        unknown = set(self.edit_mix) - set(EDIT_OPS)
        if unknown:
            raise ConfigError(f"edit_mix has unknown ops {sorted(unknown)}")
        weights = [self.edit_mix.get(op, 0.0) for op in EDIT_OPS]
        if any(w < 0 for w in weights):
            raise ConfigError("edit_mix proportions must be >= 0")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError("edit_mix proportions must sum to 1")
        if self.edit_mix.get("MODIFY", 0.0) > 0 and self.n_attr_values < 2:
            raise ConfigError("MODIFY edits need n_attr_values >= 2")

    # --- token layout -----------------------------------------------------
    @property
    def obj_base(self) -> int:
        return 1 + len(EDIT_OPS)  # PAD, ADD, REMOVE, MODIFY

    @property
    def attr_base(self) -> int:
        return self.obj_base + self.n_object_types

    def obj_token(self, o: int) -> int:
        return self.obj_base + o

    def attr_token(self, a: int) -> int:
        return self.attr_base + a


def synthetic_vocabulary(spec: SyntheticSpec) -> Vocabulary:
    tokens = [PAD_TOKEN, *EDIT_OPS]
    tokens += [f"obj{o}" for o in range(spec.n_object_types)]
    tokens += [f"attr{a}" for a in range(spec.n_attr_values)]
    return Vocabulary(tokens)


def slot_feature_table(spec: SyntheticSpec) -> torch.Tensor:
    """Per-(object, attr) patch embeddings; the final row encodes EMPTY.

    Pure function of the spec: row o * n_attr_values + a is the feature of
    (o, a).  float32 so cache round-trips are bit-exact.
    """
    g = torch.Generator().manual_seed(spec.seed)
    n = spec.n_object_types * spec.n_attr_values + 1
    return torch.randn(n, spec.d_img, generator=g, dtype=torch.float32)


def _slot_row(spec: SyntheticSpec, slot: Slot) -> int:
    if slot is None:
        return spec.n_object_types * spec.n_attr_values
    o, a = slot
    return o * spec.n_attr_values + a


def slots_to_features(spec: SyntheticSpec, slots: Slots, table: Optional[torch.Tensor] = None) -> torch.Tensor:
    if table is None:
        table = slot_feature_table(spec)
    return torch.stack([table[_slot_row(spec, s)] for s in slots])


def decode_slots(features: torch.Tensor, spec: SyntheticSpec, table: Optional[torch.Tensor] = None) -> Slots:
    """Invert slots_to_features by exact row match against the slot table."""
    if table is None:
        table = slot_feature_table(spec)
    empty_row = spec.n_object_types * spec.n_attr_values
    out: list[Slot] = []
    for patch in features:
        dists = (table - patch.unsqueeze(0)).abs().amax(dim=1)
        row = int(dists.argmin().item())
        if dists[row].item() != 0.0:
            raise ValueError("patch does not match any slot embedding exactly")
        out.append(None if row == empty_row else divmod(row, spec.n_attr_values))
    return tuple(out)


def multiset_key(slots: Slots) -> tuple:
    """Canonical (order-free) key of a slot configuration."""
    return tuple(sorted((-1, -1) if s is None else s for s in slots))


def apply_edit_program(slots: Slots, caption: Sequence[int], spec: SyntheticSpec) -> tuple:
    """Apply a 3-token edit program to a slot configuration; returns the
    target multiset key.  Raises ConfigError for programs that do not apply
    (absent object, no empty slot, ambiguous object)."""
    if len(caption) != 3:
        raise ConfigError("edit programs are exactly 3 tokens")
    op_id, obj_tok, third = caption
    if not 1 <= op_id <= len(EDIT_OPS):
        raise ConfigError(f"token {op_id} is not an edit opcode")
    op = EDIT_OPS[op_id - 1]
    o = obj_tok - spec.obj_base
    if not 0 <= o < spec.n_object_types:
        raise ConfigError(f"token {obj_tok} is not an object")
    work = list(slots)
    if op == "ADD":
        a = third - spec.attr_base
        if not 0 <= a < spec.n_attr_values:
            raise ConfigError(f"token {third} is not an attribute")
        try:
            i = work.index(None)
        except ValueError:
            raise ConfigError("ADD requires an empty slot") from None
        work[i] = (o, a)
    else:
        holders = [i for i, s in enumerate(work) if s is not None and s[0] == o]
        if len(holders) != 1:
            raise ConfigError(f"object {o} must occupy exactly one slot (found {len(holders)})")
        i = holders[0]
        if op == "REMOVE":
            if third != 0:
                raise ConfigError("REMOVE programs end with PAD")
            work[i] = None
        else:  # MODIFY
            a = third - spec.attr_base
            if not 0 <= a < spec.n_attr_values:
                raise ConfigError(f"token {third} is not an attribute")
            if work[i][1] == a:
                raise ConfigError("MODIFY must change the attribute")
            work[i] = (o, a)
    return multiset_key(tuple(work))


# --------------------------------------------------------------------------
# synthetic generation
# --------------------------------------------------------------------------


def _rand_unit(g: torch.Generator) -> float:
    return torch.rand((), generator=g).item()


def _randint(g: torch.Generator, n: int) -> int:
    return int(torch.randint(n, (), generator=g).item())


def _sample_slots(spec: SyntheticSpec, g: torch.Generator) -> Slots:
    out: list[Slot] = []
    for _ in range(spec.n_slots):
        if _rand_unit(g) < spec.empty_prob:
            out.append(None)
        else:
            out.append((_randint(g, spec.n_object_types), _randint(g, spec.n_attr_values)))
    return tuple(out)


def _unique_objects(slots: Slots) -> list[int]:
    counts = Counter(s[0] for s in slots if s is not None)
    return sorted(o for o, c in counts.items() if c == 1)


def _op_compatible(op: str, slots: Slots, spec: SyntheticSpec) -> bool:
    if op == "ADD":
        return any(s is None for s in slots)
    if op == "REMOVE":
        return bool(_unique_objects(slots))
    return bool(_unique_objects(slots)) and spec.n_attr_values >= 2  # MODIFY


def _apply_random_edit(
    spec: SyntheticSpec, g: torch.Generator, slots: Slots, op: str
) -> tuple[tuple[int, ...], Slots]:
    """Pick the edit's free choices at random; returns (caption ids, target slots)."""
    work = list(slots)
    op_id = 1 + EDIT_OPS.index(op)
    if op == "ADD":
        empties = [i for i, s in enumerate(work) if s is None]
        i = empties[_randint(g, len(empties))]
        o = _randint(g, spec.n_object_types)
        a = _randint(g, spec.n_attr_values)
        work[i] = (o, a)
        caption = (op_id, spec.obj_token(o), spec.attr_token(a))
    else:
        uniq = _unique_objects(slots)
        o = uniq[_randint(g, len(uniq))]
        i = next(k for k, s in enumerate(work) if s is not None and s[0] == o)
        if op == "REMOVE":
            work[i] = None
            caption = (op_id, spec.obj_token(o), 0)
        else:
            a_old = work[i][1]
            choices = [a for a in range(spec.n_attr_values) if a != a_old]
            a_new = choices[_randint(g, len(choices))]
            work[i] = (o, a_new)
            caption = (op_id, spec.obj_token(o), spec.attr_token(a_new))
    return caption, tuple(work)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Corpus, list[Triplet], Vocabulary]:
    """Generate the task: corpus of exactly `corpus_size` images (unique slot
    multisets), triplets whose targets the generator inserts, and the closed
    vocabulary.  Deterministic under `spec.seed`."""
    spec.validate()
    vocab = synthetic_vocabulary(spec)
    table = slot_feature_table(spec)
    g = torch.Generator().manual_seed(spec.seed + 1)

    images: list[Slots] = []
    by_key: dict[tuple, int] = {}

    def intern(slots: Slots) -> Optional[int]:
        """Corpus index of the multiset, inserting if capacity allows."""
        key = multiset_key(slots)
        idx = by_key.get(key)
        if idx is None:
            if len(images) >= spec.corpus_size:
                return None
            idx = len(images)
            by_key[key] = idx
            images.append(slots)
        return idx

    support = [op for op in EDIT_OPS if spec.edit_mix.get(op, 0.0) > 0]

    def draw_op(slots: Slots) -> Optional[str]:
        ok = [op for op in support if _op_compatible(op, slots, spec)]
        if not ok:
            return None
        weights = [spec.edit_mix[op] for op in ok]
        r = _rand_unit(g) * sum(weights)
        acc = 0.0
        for op, w in zip(ok, weights):
            acc += w
            if r < acc:
                return op
        return ok[-1]

    def fresh_ref() -> Optional[int]:
        for _ in range(1000):
            slots = _sample_slots(spec, g)
            if not any(_op_compatible(op, slots, spec) for op in support):
                continue
            idx = intern(slots)
            if idx is not None:
                return idx
        return None

    raw: list[tuple[int, tuple[int, ...], int]] = []
    want = spec.n_triplets
    max_iters = 1000 + 50 * spec.corpus_size
    iters = 0
    while iters < max_iters:
        iters += 1
        if want is None:
            if len(images) >= spec.corpus_size and raw:
                break
        elif len(raw) >= want:
            break

        # pick a reference: reuse an existing image half the time (always once
        # the corpus is full), otherwise mint a fresh one
        ref_idx: Optional[int] = None
        reuse = images and (_rand_unit(g) < 0.5 or len(images) >= spec.corpus_size)
        if reuse:
            order = torch.randperm(len(images), generator=g).tolist()
            for idx in order:
                if any(_op_compatible(op, images[idx], spec) for op in support):
                    ref_idx = idx
                    break
        if ref_idx is None:
            ref_idx = fresh_ref()
        if ref_idx is None:
            break  # cannot mint a compatible reference

        op = draw_op(images[ref_idx])
        if op is None:
            continue
        caption, tgt_slots = _apply_random_edit(spec, g, images[ref_idx], op)
        tgt_idx = intern(tgt_slots)
        if tgt_idx is None:
            continue  # corpus full and target unseen; try another reference/edit
        raw.append((ref_idx, caption, tgt_idx))

    if want is not None and len(raw) < want:
        raise ConfigError(
            f"corpus_size={spec.corpus_size} too small to host all targets: "
            f"generated {len(raw)}/{want} triplets"
        )
    if not raw:
        raise ConfigError("could not generate any triplet under this spec")

    # top up with distractors so the corpus has exactly corpus_size images
    fill_attempts = 0
    while len(images) < spec.corpus_size:
        fill_attempts += 1
        if fill_attempts > 10000:
            raise ConfigError(
                "cannot fill corpus to corpus_size: distinct image space exhausted"
            )
        intern(_sample_slots(spec, g))

    ids = [f"img_{i:04d}" for i in range(len(images))]
    feats = [slots_to_features(spec, slots, table) for slots in images]
    corpus = Corpus(ids, feats)

    triplets = []
    for k, (ref_idx, caption, tgt_idx) in enumerate(raw):
        subset = _subset_group(spec, images, ref_idx, tgt_idx)
        triplets.append(
            Triplet(
                query_id=f"q_{k:04d}",
                reference_id=ids[ref_idx],
                caption=caption,
                target_id=ids[tgt_idx],
                subset_ids=tuple(ids[i] for i in subset) if subset else None,
            )
        )
    return corpus, triplets, vocab


def split_triplets(
    triplets: Sequence[Triplet], eval_fraction: float = 0.25, seed: int = 1234
) -> tuple[list[Triplet], list[Triplet]]:
    """Deduplicated train/eval split keyed on the (reference, caption) pair.

    Repeated draws of the same query pair collapse to their first occurrence,
    so no pair appears on both sides; the shuffle is deterministic under
    `seed`.  Returns (train, eval) with eval holding the first
    ``floor(eval_fraction * n_unique)`` pairs of the shuffled order.
    """
    if not 0.0 <= eval_fraction < 1.0:
        raise ValueError(f"eval_fraction must be in [0, 1), got {eval_fraction}")
    seen: dict[tuple, Triplet] = {}
    for t in triplets:
        seen.setdefault((t.reference_id, t.caption), t)
    uniq = list(seen.values())
    if not uniq:
        return [], []
    perm = torch.randperm(len(uniq), generator=torch.Generator().manual_seed(seed)).tolist()
    n_eval = int(len(uniq) * eval_fraction)
    eval_set = [uniq[i] for i in perm[:n_eval]]
    train_set = [uniq[i] for i in perm[n_eval:]]
    return train_set, eval_set


def _subset_group(
    spec: SyntheticSpec, images: list[Slots], ref_idx: int, tgt_idx: int
) -> Optional[list[int]]:
    """Target plus the k_subset-1 hardest negatives by slot-multiset overlap."""
    tgt_count = Counter(multiset_key(images[tgt_idx]))
    scored = []
    for idx, slots in enumerate(images):
        if idx in (ref_idx, tgt_idx):
            continue
        overlap = sum((tgt_count & Counter(multiset_key(slots))).values())
        scored.append((-overlap, idx))
    if not scored:
        return None
    scored.sort()
    negatives = [idx for _, idx in scored[: spec.k_subset - 1]]
    return sorted([tgt_idx] + negatives)


# --------------------------------------------------------------------------
# manifest I/O
# --------------------------------------------------------------------------


def load_triplets(
    path: str | Path,
    vocab: Vocabulary,
    corpus: Optional[Corpus] = None,
    max_caption_len: Optional[int] = None,
) -> list[Triplet]:
    """Parse a TSV triplet manifest; captions are tokenized against `vocab`.

    When `corpus` is given, reference/target/subset ids are validated against
    it.  Raises ManifestError with the 1-based line number on malformed lines.
    """
    out: list[Triplet] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in (4, 5):
                raise ManifestError(
                    f"{path}:{lineno}: expected 4 or 5 tab-separated fields, got {len(fields)}"
                )
            query_id, reference_id, caption_words, target_id = fields[:4]
            if not all((query_id, reference_id, caption_words, target_id)):
                raise ManifestError(f"{path}:{lineno}: empty field")
            words = caption_words.split(" ")
            try:
                caption = vocab.encode(words)
            except VocabularyError as exc:
                raise VocabularyError(f"{path}:{lineno}: {exc}") from None
            if max_caption_len is not None and len(caption) > max_caption_len:
                raise ManifestError(
                    f"{path}:{lineno}: caption length {len(caption)} > max {max_caption_len}"
                )
            subset: Optional[tuple[str, ...]] = None
            if len(fields) == 5 and fields[4]:
                subset = tuple(fields[4].split(","))
                if len(subset) < 2:
                    raise ManifestError(f"{path}:{lineno}: subset must have >= 2 ids")
                if target_id not in subset:
                    raise ManifestError(f"{path}:{lineno}: subset must contain the target")
                if reference_id in subset:
                    raise ManifestError(f"{path}:{lineno}: subset must not contain the reference")
            if corpus is not None:
                for img_id in (reference_id, target_id, *(subset or ())):
                    if img_id not in corpus:
                        raise ReferentialError(
                            f"{path}:{lineno}: image id {img_id!r} not in corpus"
                        )
            out.append(Triplet(query_id, reference_id, caption, target_id, subset))
    return out


def write_triplets(path: str | Path, triplets: Sequence[Triplet], vocab: Vocabulary) -> None:
    lines = []
    for t in triplets:
        fields = [t.query_id, t.reference_id, " ".join(vocab.decode(t.caption)), t.target_id]
        if t.subset_ids:
            fields.append(",".join(t.subset_ids))
        lines.append("\t".join(fields))
    _atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


# --------------------------------------------------------------------------
# embedding cache
# --------------------------------------------------------------------------


def write_embedding_cache(path: str | Path, ids: Sequence[str], embeddings: torch.Tensor) -> None:
    """Write the binary cache atomically (temp file + rename).

    32- and 64-bit matrices keep their element width so round-trips are
    exact; any other dtype is stored as 32-bit.
    """
    mat = torch.as_tensor(embeddings)
    if mat.dtype not in _CACHE_WIDTHS:
        mat = mat.to(torch.float32)
    if mat.ndim != 2:
        raise ValueError("embeddings must be a 2-D matrix")
    n, d = mat.shape
    if len(ids) != n:
        raise ValueError(f"got {len(ids)} ids for {n} rows")
    if d < 1:
        raise ValueError("d must be >= 1")
    width = _CACHE_WIDTHS[mat.dtype]
    blob = bytearray()
    blob += CACHE_MAGIC
    blob += struct.pack("<IIB", n, d, width)
    for img_id in ids:
        raw = img_id.encode("utf-8")
        if b"\x00" in raw:
            raise ValueError(f"id {img_id!r} contains NUL")
        blob += raw + b"\x00"
    blob += mat.contiguous().numpy().astype(_CACHE_NUMPY[width], copy=False).tobytes()
    _atomic_write_bytes(Path(path), bytes(blob))


def read_embedding_cache(path: str | Path) -> tuple[list[str], torch.Tensor]:
    data = Path(path).read_bytes()
    if len(data) < len(CACHE_MAGIC) + 9:
        raise CacheFormatError(f"{path}: truncated header")
    if data[: len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic bytes")
    n, d, width = struct.unpack_from("<IIB", data, len(CACHE_MAGIC))
    if width not in _CACHE_NUMPY:
        raise CacheFormatError(f"{path}: unknown element width {width}")
    pos = len(CACHE_MAGIC) + 9
    ids = []
    for _ in range(n):
        end = data.find(b"\x00", pos)
        if end < 0:
            raise CacheFormatError(f"{path}: truncated id table")
        ids.append(data[pos:end].decode("utf-8"))
        pos = end + 1
    need = n * d * width
    if len(data) - pos != need:
        raise CacheFormatError(
            f"{path}: payload length {len(data) - pos} != expected {need}"
        )
    mat = np.frombuffer(data, dtype=_CACHE_NUMPY[width], count=n * d, offset=pos).reshape(n, d)
    return ids, torch.from_numpy(mat.copy())


def save_corpus_features(path: str | Path, corpus: Corpus) -> None:
    """Serialize patch features in the cache format, one row per patch with the
    image id repeated; consecutive runs are regrouped on read."""
    ids: list[str] = []
    rows: list[torch.Tensor] = []
    for img_id, feats in corpus.items():
        for patch in feats:
            ids.append(img_id)
            rows.append(patch)
    write_embedding_cache(path, ids, torch.stack(rows))


def load_corpus_features(path: str | Path) -> Corpus:
    ids, mat = read_embedding_cache(path)
    if not ids:
        raise CacheFormatError(f"{path}: empty corpus file")
    grouped_ids: list[str] = []
    grouped: list[list[torch.Tensor]] = []
    for img_id, row in zip(ids, mat):
        if grouped_ids and img_id == grouped_ids[-1]:
            grouped[-1].append(row)
        elif img_id in grouped_ids:
            raise CacheFormatError(f"{path}: rows of image {img_id!r} are not contiguous")
        else:
            grouped_ids.append(img_id)
            grouped.append([row])
    return Corpus(grouped_ids, [torch.stack(g) for g in grouped])


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
