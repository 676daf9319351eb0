"""Toy differentiable encoders.

Three towers, mirroring the frozen-backbone structure of the full-scale
recipe:

* an image tower whose patch projection and transformer blocks are frozen at
  their random init, with a frozen `reference` pooled head and a trainable
  `target` pooled head;
* a prompt-aware text tower (token embeddings, transformer blocks, linear
  output head) that accepts a sequence of continuous prompt vectors prepended
  to the caption tokens;
* its EMA shadow, a deep copy updated by `apply_ema` and never by gradients.

The text tower carries no positional encodings and no final LayerNorm: caption
tokens come from disjoint vocabulary ranges (opcode / object / attribute), so
with 0 blocks the encoder degenerates exactly to a normalized projected token
embedding — a property the tests rely on.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LengthError, NumericError, StructuralError


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_img: int = 16
    d_model: int = 32
    d_text: int = 32
    d_embed: int = 32
    n_heads: int = 2
    n_layers_img: int = 1
    n_layers_text: int = 1
    max_seq_len: int = 64


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block (no dropout)."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        x = x + attn_out
        return x + self.ff(self.norm2(x))


def _as_batched(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    if x.ndim == ndim - 1:
        return x.unsqueeze(0), True
    if x.ndim != ndim:
        raise StructuralError(f"expected {ndim - 1}- or {ndim}-dim tensor, got {x.ndim}-dim")
    return x, False


class ImageEncoder(nn.Module):
    """Patch projection + transformer, frozen after init; two pooled heads.

    The `reference` head is frozen with the backbone (the query-side encoder);
    the `target` head is the only trainable image-side tensor (a linear
    projection for the candidate encoder).  Both heads are bias-free so the
    pooled output of a 0-layer encoder is exactly scale-invariant after
    normalization.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.d_img, cfg.d_model, bias=False)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d_model, cfg.n_heads) for _ in range(cfg.n_layers_img)
        )
        self.reference_head = nn.Linear(cfg.d_model, cfg.d_embed, bias=False)
        self.target_head = nn.Linear(cfg.d_model, cfg.d_embed, bias=False)
        for p in self.proj.parameters():
            p.requires_grad_(False)
        for p in self.blocks.parameters():
            p.requires_grad_(False)
        for p in self.reference_head.parameters():
            p.requires_grad_(False)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """features [*, n_patches, d_img] -> patch states [*, n_patches, d_model]."""
        if not torch.isfinite(features).all():
            raise NumericError("image features contain non-finite entries")
        h = self.proj(features)
        for block in self.blocks:
            h = block(h)
        return h

    def pooled(self, patch_states: torch.Tensor, head: str) -> torch.Tensor:
        if head == "reference":
            proj = self.reference_head
        elif head == "target":
            proj = self.target_head
        else:
            raise ValueError(f"head must be 'reference' or 'target', got {head!r}")
        return F.normalize(proj(patch_states.mean(dim=-2)), dim=-1)


def encode_image(
    features: torch.Tensor, image_encoder: ImageEncoder, head: str = "reference"
) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns (patch_states, pooled unit-norm embedding). Accepts a single
    [n_patches, d_img] matrix or a batch [B, n_patches, d_img]."""
    feats, squeezed = _as_batched(torch.as_tensor(features), 3)
    states = image_encoder(feats)
    pooled = image_encoder.pooled(states, head)
    if squeezed:
        return states.squeeze(0), pooled.squeeze(0)
    return states, pooled


class TextEncoder(nn.Module):
    """Prompt-aware text tower f: (prompt vectors ⊕ caption tokens) -> embedding."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.max_seq_len = cfg.max_seq_len
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.d_text)
        nn.init.normal_(self.token_embedding.weight, std=0.5)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d_text, cfg.n_heads) for _ in range(cfg.n_layers_text)
        )
        self.out_head = nn.Linear(cfg.d_text, cfg.d_embed, bias=False)

    def embed_tokens(self, caption_ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(caption_ids)

    def forward(self, prompt: Optional[torch.Tensor], caption_ids: torch.Tensor) -> torch.Tensor:
        """prompt [B, L_p, d_text] or None; caption_ids [B, T] -> [B, d_embed]."""
        tokens = self.embed_tokens(caption_ids)
        if prompt is not None and prompt.shape[1] > 0:
            if prompt.shape[-1] != tokens.shape[-1]:
                raise StructuralError(
                    f"prompt width {prompt.shape[-1]} != d_text {tokens.shape[-1]}"
                )
            seq = torch.cat([prompt, tokens], dim=1)
        else:
            seq = tokens
        if seq.shape[1] > self.max_seq_len:
            raise LengthError(
                f"encoded length {seq.shape[1]} exceeds max_seq_len {self.max_seq_len}"
            )
        for block in self.blocks:
            seq = block(seq)
        return F.normalize(self.out_head(seq.mean(dim=1)), dim=-1)


def encode_text(
    query: "AugmentedQuery", text_encoder: TextEncoder
) -> torch.Tensor:
    """Encode an augmented query; single queries return a [d_embed] vector."""
    caption, squeezed = _as_batched(torch.as_tensor(query.caption), 2)
    prompt = query.prompt
    if prompt is not None:
        prompt, _ = _as_batched(prompt, 3)
        if prompt.shape[0] != caption.shape[0]:
            raise StructuralError(
                f"prompt batch {prompt.shape[0]} != caption batch {caption.shape[0]}"
            )
    out = text_encoder(prompt, caption)
    return out.squeeze(0) if squeezed else out


@dataclass
class AugmentedQuery:
    """Prompt vectors prepended to caption token ids; prompt may be None."""

    prompt: Optional[torch.Tensor]
    caption: torch.Tensor

    @property
    def encoded_length(self) -> int:
        lp = 0 if self.prompt is None else self.prompt.shape[-2]
        return lp + self.caption.shape[-1]


def params_clone_for_ema(module: nn.Module) -> nn.Module:
    """Deep-copied shadow with gradients disabled everywhere."""
    shadow = copy.deepcopy(module)
    for p in shadow.parameters():
        p.requires_grad_(False)
    return shadow


def apply_ema(shadow: nn.Module, live: nn.Module, decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * live, element-wise, in place.

    Exact: the update is computed with the same two-rounding expression the
    closed-form oracle uses, so 64-bit comparisons can demand equality.
    """
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    shadow_state = dict(shadow.state_dict())
    live_state = dict(live.state_dict())
    if shadow_state.keys() != live_state.keys():
        raise StructuralError("shadow and live modules have different tensor sets")
    with torch.no_grad():
        for key, s in shadow_state.items():
            l = live_state[key]
            if s.shape != l.shape:
                raise StructuralError(f"{key}: shape {tuple(s.shape)} != {tuple(l.shape)}")
            if s.is_floating_point():
                s.copy_(s * decay + l * (1.0 - decay))
