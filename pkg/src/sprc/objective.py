"""The training losses and the optimization-based auxiliary prompt.

Contrastive term over a batch: -(1/B) sum_i log softmax_i(tau * u_i . v_j).
Alignment term: norm of (prompt - auxiliary prompt), the auxiliary prompt
being a constant (stop-gradient).  The auxiliary prompt itself is obtained by
descending, with respect to the prompt alone, the per-sample retrieval
objective -log( exp(tau v_i.u') / sum_j exp(tau v_j.u') ) where u' is the EMA
text encoder's embedding of (prompt ⊕ caption).  Note the u/v roles here are
the transpose of the batch contrastive term; that asymmetry is implemented
verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .config import AuxiliaryConfig, InitMode
from .encoders import TextEncoder
from .errors import NumericError, StructuralError

_MAX_HALVINGS = 10


@dataclass
class BatchEmbeddings:
    """Query-side U and target-side V, both [B, d_embed] with unit rows."""

    U: torch.Tensor
    V: torch.Tensor
    tau: torch.Tensor | float

    def validate(self) -> "BatchEmbeddings":
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape != self.V.shape:
            raise StructuralError(
                f"U {tuple(self.U.shape)} and V {tuple(self.V.shape)} must be equal 2-D shapes"
            )
        if self.U.shape[0] < 1:
            raise ValueError("batch must contain at least one row")
        tau = float(self.tau) if not torch.is_tensor(self.tau) else float(self.tau.detach())
        if tau <= 0:
            raise ValueError(f"tau must be > 0, got {tau}")
        for name, mat in (("U", self.U), ("V", self.V)):
            norms = mat.detach().norm(dim=-1)
            if (norms - 1.0).abs().max().item() > 1e-6:
                raise ValueError(f"{name} rows must be unit-norm within 1e-6")
        return self


def contrastive_loss(batch: BatchEmbeddings) -> torch.Tensor:
    """Batch contrastive loss, stabilized log-softmax over the similarity rows."""
    if batch.U.shape[0] == 0:
        raise ValueError("empty batch")
    logits = batch.tau * (batch.U @ batch.V.t())
    if not torch.isfinite(logits).all():
        raise NumericError("contrastive similarities are non-finite")
    log_probs = F.log_softmax(logits, dim=1)
    return -log_probs.diagonal().mean()


def alignment_loss(
    p: torch.Tensor, p_aux: torch.Tensor, norm: str = "frobenius"
) -> torch.Tensor:
    """Distance between prompt and auxiliary prompt; p_aux is a constant.

    `frobenius` takes the whole-matrix 2-norm per sample; `per_token_mean`
    averages per-token L2 norms.  Batched inputs reduce by batch mean.
    """
    if p.shape != p_aux.shape:
        raise StructuralError(f"shape mismatch: {tuple(p.shape)} vs {tuple(p_aux.shape)}")
    diff = p - p_aux.detach()
    if norm == "frobenius":
        if diff.ndim == 2:
            return torch.linalg.vector_norm(diff)
        per_sample = torch.linalg.vector_norm(diff.flatten(1), dim=1)
    elif norm == "per_token_mean":
        per_sample = torch.linalg.vector_norm(diff, dim=-1).mean(dim=-1)
        if diff.ndim == 2:
            return per_sample
    else:
        raise ValueError(f"unknown alignment norm {norm!r}")
    return per_sample.mean()


def total_loss(lc: torch.Tensor, la: torch.Tensor | float, gamma: float) -> torch.Tensor:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return lc + gamma * la


def inner_objective(
    prompts: torch.Tensor,
    captions: torch.Tensor,
    targets: torch.Tensor,
    rows: torch.Tensor,
    ema_text: TextEncoder,
    tau: float,
) -> torch.Tensor:
    """Per-sample retrieval objective vector [B] through the EMA encoder."""
    u = ema_text(prompts, captions)
    logits = tau * (u @ targets.t())
    idx = torch.arange(prompts.shape[0], device=prompts.device)
    return -(logits[idx, rows] - torch.logsumexp(logits, dim=1))


def solve_auxiliary_prompt_batch(
    p_init: torch.Tensor,
    captions: torch.Tensor,
    batch_targets: torch.Tensor,
    rows: torch.Tensor | Sequence[int],
    ema_text: TextEncoder,
    tau: float,
    cfg: AuxiliaryConfig,
) -> torch.Tensor:
    """Vectorized inner loop over a batch of independent per-sample solves.

    Plain gradient descent on the prompts only; with backtracking, each
    sample's step is halved (at most 10 times) until its objective does not
    increase, and a still-increasing step is rejected outright.  Returns the
    prompts detached from the outer graph.
    """
    if p_init.ndim != 3:
        raise StructuralError("p_init must be [B, L_p, d_text]")
    rows = torch.as_tensor(rows, dtype=torch.long)
    if rows.ndim != 1 or rows.shape[0] != p_init.shape[0]:
        raise StructuralError("rows must hold one target index per sample")
    if cfg.init_mode is InitMode.ZERO:
        p = torch.zeros_like(p_init.detach())
    else:
        p = p_init.detach().clone()
    if cfg.inner_steps == 0:
        return p
    targets = batch_targets.detach()
    captions = torch.as_tensor(captions)

    for step in range(cfg.inner_steps):
        p_leaf = p.requires_grad_(True)
        obj = inner_objective(p_leaf, captions, targets, rows, ema_text, tau)
        if not torch.isfinite(obj).all():
            raise NumericError(f"auxiliary objective non-finite at inner step {step}")
        (grad,) = torch.autograd.grad(obj.sum(), p_leaf)
        p = p.detach()
        if not cfg.backtracking:
            p = p - cfg.inner_lr * grad
            continue
        with torch.no_grad():
            eta = torch.full_like(obj, cfg.inner_lr)
            candidate = p - eta.view(-1, 1, 1) * grad

            def _worse(candidate_obj: torch.Tensor) -> torch.Tensor:
                return (candidate_obj > obj) | ~torch.isfinite(candidate_obj)

            for _ in range(_MAX_HALVINGS):
                worse = _worse(inner_objective(candidate, captions, targets, rows, ema_text, tau))
                if not bool(worse.any()):
                    break
                eta = torch.where(worse, eta * 0.5, eta)
                candidate = torch.where(
                    worse.view(-1, 1, 1), p - eta.view(-1, 1, 1) * grad, candidate
                )
            else:
                worse = _worse(inner_objective(candidate, captions, targets, rows, ema_text, tau))
                candidate = torch.where(worse.view(-1, 1, 1), p, candidate)
            p = candidate
    return p.detach()


def solve_auxiliary_prompt(
    p_init: torch.Tensor,
    caption: torch.Tensor,
    batch_targets: torch.Tensor,
    row_index: int,
    ema_text: TextEncoder,
    tau: float,
    cfg: AuxiliaryConfig,
) -> torch.Tensor:
    """Auxiliary prompt for one sample: descend the retrieval objective of
    target `row_index` against the batch's target embeddings."""
    if p_init.ndim != 2:
        raise StructuralError("p_init must be [L_p, d_text]")
    if not 0 <= row_index < batch_targets.shape[0]:
        raise ValueError(f"row_index {row_index} outside batch of {batch_targets.shape[0]}")
    caption = torch.as_tensor(caption)
    out = solve_auxiliary_prompt_batch(
        p_init.unsqueeze(0),
        caption.unsqueeze(0),
        batch_targets,
        [row_index],
        ema_text,
        tau,
        cfg,
    )
    return out.squeeze(0)
