"""Outer training loop: optimizer, schedule, EMA maintenance, checkpoints.

The optimizer only ever sees the active mechanism's parameters, so the heads
of inactive mechanisms remain bit-identical to initialization (decoupled
weight decay would otherwise shrink them).  The EMA shadow of the text encoder
updates once per step, after the optimizer.

Checkpoints are a single zip archive: ``manifest.json`` (format version, step,
config echo, frozen flags, optimizer bookkeeping, tensor table) plus one
little-endian payload per tensor under ``tensors/``.  Payloads keep their
native dtype so 64-bit resume is bit-reproducible.  Zip entries carry a fixed
timestamp, making save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
import warnings
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import Mechanism, TrainConfig
from .dataset import Corpus, Triplet
from .encoders import apply_ema, params_clone_for_ema
from .errors import CheckpointError, NumericError, StructuralError
from .model import RetrievalModel, build_model, dtype_of
from .objective import (
    BatchEmbeddings,
    alignment_loss,
    contrastive_loss,
    solve_auxiliary_prompt_batch,
    total_loss,
)

CHECKPOINT_FORMAT_VERSION = 1

_SAMPLER_SALT = 0x5EED

_DTYPE_CODES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class StepLosses:
    Lc: float
    La: float
    L: float
    lr: float


@dataclass
class TrainerState:
    cfg: TrainConfig
    model: RetrievalModel
    ema_text: torch.nn.Module
    optimizer: torch.optim.AdamW
    sampler: torch.Generator
    step: int = 0


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps)); clamps past the end."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if step < 0:
        raise ValueError("step must be >= 0")
    if step > total_steps:
        warnings.warn(
            f"cosine_lr: step {step} > total_steps {total_steps}; clamping to 0",
            RuntimeWarning,
            stacklevel=2,
        )
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def make_optimizer(model: RetrievalModel, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.trainable_parameters(cfg.mechanism),
        lr=cfg.lr,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=cfg.weight_decay,
    )


def init_state(cfg: TrainConfig, vocab_size: int, d_img: int) -> TrainerState:
    cfg.validate()
    model = build_model(cfg, vocab_size, d_img)
    ema_text = params_clone_for_ema(model.text)
    optimizer = make_optimizer(model, cfg)
    sampler = torch.Generator().manual_seed(cfg.seed + _SAMPLER_SALT)
    return TrainerState(cfg, model, ema_text, optimizer, sampler, step=0)


def sample_batch_indices(n: int, batch_size: int, g: torch.Generator) -> list[int]:
    """Without-replacement batch; a batch_size >= n uses the whole (shuffled) set."""
    perm = torch.randperm(n, generator=g)
    return perm[: min(batch_size, n)].tolist()


def assemble_batch(
    corpus: Corpus, batch: Sequence[Triplet], dtype: torch.dtype
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack reference features, target features, and PAD-padded caption ids."""
    refs = [corpus.features(t.reference_id) for t in batch]
    tgts = [corpus.features(t.target_id) for t in batch]
    patch_counts = {f.shape[0] for f in refs} | {f.shape[0] for f in tgts}
    if len(patch_counts) != 1:
        raise StructuralError(f"batch images must share a patch count, got {sorted(patch_counts)}")
    max_len = max(len(t.caption) for t in batch)
    captions = torch.zeros(len(batch), max_len, dtype=torch.long)
    for i, t in enumerate(batch):
        captions[i, : len(t.caption)] = torch.tensor(t.caption, dtype=torch.long)
    return (
        torch.stack(refs).to(dtype),
        torch.stack(tgts).to(dtype),
        captions,
    )


def train_step(
    batch: Sequence[Triplet],
    corpus: Corpus,
    model: RetrievalModel,
    ema_text: torch.nn.Module,
    optimizer: torch.optim.AdamW,
    cfg: TrainConfig,
    lr: float,
) -> StepLosses:
    """One optimization step; returns the loss components as floats."""
    dtype = next(model.parameters()).dtype
    ref_feats, tgt_feats, captions = assemble_batch(corpus, batch, dtype)

    U, prompts = model.query_embeddings(ref_feats, captions, cfg.mechanism, cfg.prompt_mode)
    V = model.target_embeddings(tgt_feats)
    lc = contrastive_loss(BatchEmbeddings(U, V, model.tau))

    la: torch.Tensor | float = 0.0
    if cfg.gamma > 0 and prompts is not None and cfg.aux.inner_steps > 0:
        rows = torch.arange(len(batch))
        p_aux = solve_auxiliary_prompt_batch(
            prompts, captions, V, rows, ema_text, float(model.tau.detach()), cfg.aux
        )
        if torch.equal(p_aux, prompts.detach()):
            # inner loop did not move (e.g. zero gradient); the alignment term
            # is identically zero and its cusp gradient is taken as zero
            la = 0.0
        else:
            la = alignment_loss(prompts, p_aux, cfg.align_norm)

    loss = total_loss(lc, la, cfg.gamma)
    if not torch.isfinite(loss):
        raise NumericError("training loss is non-finite")

    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.clip_norm > 0:
        params = [p for group in optimizer.param_groups for p in group["params"]]
        torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
    optimizer.step()
    apply_ema(ema_text, model.text, cfg.ema_decay)

    return StepLosses(
        Lc=float(lc.detach()),
        La=float(la.detach()) if torch.is_tensor(la) else float(la),
        L=float(loss.detach()),
        lr=lr,
    )


def train(
    cfg: TrainConfig,
    corpus: Corpus,
    triplets: Sequence[Triplet],
    vocab_size: int,
    *,
    state: Optional[TrainerState] = None,
    log_path: Optional[str | Path] = None,
    stop_at: Optional[int] = None,
) -> tuple[TrainerState, list[dict]]:
    """Run (or resume, via `state`) the loop to cfg.steps; returns new records.

    `stop_at` interrupts the run early without touching the schedule (the
    cosine keeps its cfg.steps horizon), so a checkpoint written there resumes
    onto the exact trajectory of the uninterrupted run.  Each step appends one
    ``{step, Lc, La, L, lr}`` record to the metrics log.
    """
    if not triplets:
        raise ValueError("no triplets to train on")
    if state is None:
        state = init_state(cfg, vocab_size, corpus.d_img)
    else:
        cfg = state.cfg
    last = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    records: list[dict] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for step in range(state.step, last):
            idxs = sample_batch_indices(len(triplets), cfg.batch_size, state.sampler)
            batch = [triplets[i] for i in idxs]
            lr = cosine_lr(step, cfg.steps, cfg.lr)
            try:
                losses = train_step(
                    batch, corpus, state.model, state.ema_text, state.optimizer, cfg, lr
                )
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}") from exc
            state.step = step + 1
            record = {"step": step, "Lc": losses.Lc, "La": losses.La, "L": losses.L, "lr": lr}
            records.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return state, records


# --------------------------------------------------------------------------
# checkpointing
# --------------------------------------------------------------------------


def _tensor_payload(t: torch.Tensor) -> tuple[str, bytes]:
    t = t.detach().cpu().contiguous()
    code = _DTYPE_CODES.get(t.dtype)
    if code is None:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    return code, t.numpy().astype(code, copy=False).tobytes()


def _collect_tensors(state: TrainerState) -> tuple[dict[str, torch.Tensor], dict]:
    tensors: dict[str, torch.Tensor] = {}
    for name, t in state.model.state_dict().items():
        tensors[f"model/{name}"] = t
    for name, t in state.ema_text.state_dict().items():
        tensors[f"ema/{name}"] = t
    opt_sd = state.optimizer.state_dict()
    opt_meta: dict = {"param_groups": opt_sd["param_groups"], "scalar_state": {}}
    for idx, entry in opt_sd["state"].items():
        for key, value in entry.items():
            if torch.is_tensor(value):
                tensors[f"optim/{idx}/{key}"] = value
            else:
                opt_meta["scalar_state"].setdefault(str(idx), {})[key] = value
    tensors["rng/torch"] = torch.get_rng_state()
    tensors["rng/sampler"] = state.sampler.get_state()
    return tensors, opt_meta


def save_checkpoint(path: str | Path, state: TrainerState) -> None:
    path = Path(path)
    tensors, opt_meta = _collect_tensors(state)
    table = {}
    payloads = {}
    for key, t in sorted(tensors.items()):
        code, blob = _tensor_payload(t)
        table[key] = {"dtype": code, "shape": list(t.shape)}
        payloads[key] = blob
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": state.step,
        "config": state.cfg.to_dict(),
        "vocab_size": state.model.vocab_size,
        "d_img": state.model.d_img,
        "frozen": state.model.frozen_parameter_names(),
        "optimizer": opt_meta,
        "tensors": table,
    }
    stamp = (1980, 1, 1, 0, 0, 0)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr(
                zipfile.ZipInfo("manifest.json", date_time=stamp),
                json.dumps(manifest, sort_keys=True, indent=1),
            )
            for key in sorted(payloads):
                zf.writestr(zipfile.ZipInfo(f"tensors/{key}", date_time=stamp), payloads[key])
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, torch.Tensor]


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read("manifest.json"))
            version = manifest.get("format_version")
            if version != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(
                    f"checkpoint format_version {version!r}; this build reads "
                    f"version {CHECKPOINT_FORMAT_VERSION}"
                )
            tensors = {}
            for key, meta in manifest["tensors"].items():
                raw = zf.read(f"tensors/{key}")
                dtype = _CODE_DTYPES[meta["dtype"]]
                arr = np.frombuffer(raw, dtype=meta["dtype"]).copy()
                tensors[key] = torch.from_numpy(arr).to(dtype).reshape(meta["shape"])
    except (zipfile.BadZipFile, KeyError, EOFError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return Checkpoint(manifest=manifest, tensors=tensors)


def restore_state(ckpt: Checkpoint) -> TrainerState:
    """Rebuild a TrainerState whose continued run is bit-identical to the
    uninterrupted one (64-bit mode)."""
    manifest = ckpt.manifest
    cfg = TrainConfig.from_dict(manifest["config"])
    model = build_model(cfg, manifest["vocab_size"], manifest["d_img"])
    model.load_state_dict(
        {k[len("model/"):]: t for k, t in ckpt.tensors.items() if k.startswith("model/")}
    )
    ema_text = params_clone_for_ema(model.text)
    ema_text.load_state_dict(
        {k[len("ema/"):]: t for k, t in ckpt.tensors.items() if k.startswith("ema/")}
    )
    optimizer = make_optimizer(model, cfg)
    opt_meta = manifest["optimizer"]
    opt_state: dict[int, dict] = {}
    for key, t in ckpt.tensors.items():
        if not key.startswith("optim/"):
            continue
        _, idx, name = key.split("/", 2)
        opt_state.setdefault(int(idx), {})[name] = t
    for idx, scalars in opt_meta["scalar_state"].items():
        opt_state.setdefault(int(idx), {}).update(scalars)
    groups = [dict(g) for g in opt_meta["param_groups"]]
    for g in groups:
        if isinstance(g.get("betas"), list):  # JSON stores tuples as lists
            g["betas"] = tuple(g["betas"])
    optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    torch.set_rng_state(ckpt.tensors["rng/torch"].to(torch.uint8))
    sampler = torch.Generator()
    sampler.set_state(ckpt.tensors["rng/sampler"].to(torch.uint8))
    return TrainerState(cfg, model, ema_text, optimizer, sampler, step=manifest["step"])
