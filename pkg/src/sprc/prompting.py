"""Sentence-level prompt generation and the baseline query mechanisms.

The prompt generator is a small querying transformer: a learnable bank of
query tokens self-attends jointly with the caption embeddings, cross-attends
onto the reference image's patch states, and the query positions are projected
by an MLP into text-embedding space to form the prompt.  Source modes ablate
the inputs: RC_ONLY drops the image (cross-attention skipped), RI_ONLY drops
the caption (self-attention over queries alone).

Baselines:
  * late fusion — sum of caption embedding and pooled reference embedding;
  * textual inversion — a single pseudo-token MLP-mapped from the pooled
    reference, prepended to the caption;
  * fixed prompt — a static trainable prompt shared across queries.
"""

from __future__ import annotations

import warnings
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import PromptMode
from .encoders import AugmentedQuery, TextEncoder, encode_text
from .errors import LengthError, StructuralError

_ANTIPODE_EPS = 1e-6


class GeneratorBlock(nn.Module):
    """Self-attention over (queries ⊕ caption), cross-attention of the query
    positions onto image patches, feed-forward over the whole sequence."""

    def __init__(self, d: int, d_patch: int, n_heads: int):
        super().__init__()
        self.self_norm = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.cross_norm = nn.LayerNorm(d)
        self.cross_attn = nn.MultiheadAttention(
            d, n_heads, kdim=d_patch, vdim=d_patch, batch_first=True
        )
        self.ff_norm = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(
        self, seq: torch.Tensor, n_query: int, patches: Optional[torch.Tensor]
    ) -> torch.Tensor:
        h = self.self_norm(seq)
        attn_out, _ = self.self_attn(h, h, h, need_weights=False)
        seq = seq + attn_out
        if patches is not None:
            q = self.cross_norm(seq[:, :n_query])
            cross_out, _ = self.cross_attn(q, patches, patches, need_weights=False)
            seq = torch.cat([seq[:, :n_query] + cross_out, seq[:, n_query:]], dim=1)
        return seq + self.ff(self.ff_norm(seq))


class PromptGenerator(nn.Module):
    """Learnable query tokens -> sentence-level prompt [L_p, d_text].

    Learned positional encodings sit on the query slots and caption tokens
    only; patches carry none, so the generator is a set function of the
    patches (permutation invariance is tested).
    """

    def __init__(
        self,
        prompt_length: int,
        d_q: int,
        d_patch: int,
        d_text: int,
        n_heads: int,
        gen_layers: int = 1,
        mlp_layers: int = 2,
        max_caption_len: int = 8,
    ):
        super().__init__()
        if prompt_length < 1:
            raise StructuralError("prompt_length must be >= 1")
        self.prompt_length = prompt_length
        self.query_tokens = nn.Parameter(0.02 * torch.randn(prompt_length, d_q))
        self.query_pos = nn.Parameter(0.02 * torch.randn(prompt_length, d_q))
        self.caption_pos = nn.Parameter(0.02 * torch.randn(max_caption_len, d_q))
        self.caption_in = nn.Linear(d_text, d_q, bias=False)
        self.blocks = nn.ModuleList(
            GeneratorBlock(d_q, d_patch, n_heads) for _ in range(gen_layers)
        )
        layers: list[nn.Module] = []
        for i in range(mlp_layers - 1):
            layers += [nn.Linear(d_q, d_q), nn.GELU()]
        layers.append(nn.Linear(d_q, d_text))
        self.out_mlp = nn.Sequential(*layers)

    def forward(
        self,
        patch_states: Optional[torch.Tensor],
        caption_embeds: Optional[torch.Tensor],
        mode: PromptMode = PromptMode.FULL,
    ) -> torch.Tensor:
        if mode is PromptMode.FULL and (patch_states is None or caption_embeds is None):
            raise StructuralError("FULL mode needs both patch states and caption embeddings")
        if mode is not PromptMode.RC_ONLY and patch_states is None:
            raise StructuralError(f"{mode.value} mode needs patch states")
        if mode is not PromptMode.RI_ONLY and caption_embeds is None:
            raise StructuralError(f"{mode.value} mode needs caption embeddings")

        some = patch_states if patch_states is not None else caption_embeds
        batch = some.shape[0]
        L = self.prompt_length
        seq = (self.query_tokens + self.query_pos).expand(batch, L, -1)
        if mode is not PromptMode.RI_ONLY:
            T = caption_embeds.shape[1]
            if T > self.caption_pos.shape[0]:
                raise LengthError(
                    f"caption length {T} exceeds max_caption_len {self.caption_pos.shape[0]}"
                )
            cap = self.caption_in(caption_embeds) + self.caption_pos[:T]
            seq = torch.cat([seq, cap], dim=1)
        patches = None if mode is PromptMode.RC_ONLY else patch_states
        for block in self.blocks:
            seq = block(seq, L, patches)
        return self.out_mlp(seq[:, :L])


def generate_prompt(
    patch_states: Optional[torch.Tensor],
    caption_ids: Optional[torch.Tensor],
    gen: PromptGenerator,
    enc: TextEncoder,
    mode: PromptMode = PromptMode.FULL,
    prompt_length: Optional[int] = None,
) -> torch.Tensor:
    """Generate the prompt for one query or a batch of queries.

    Caption token embeddings are looked up from the text encoder's table.
    `prompt_length`, when given, cross-checks the generator's configured L_p.
    """
    if prompt_length is not None and gen.prompt_length != prompt_length:
        raise StructuralError(
            f"generator has {gen.prompt_length} query tokens, configured prompt length is {prompt_length}"
        )
    squeezed = False
    if patch_states is not None and patch_states.ndim == 2:
        patch_states = patch_states.unsqueeze(0)
        squeezed = True
    caption_embeds = None
    if mode is not PromptMode.RI_ONLY:
        if caption_ids is None:
            raise StructuralError(f"{mode.value} mode needs a caption")
        caption_ids = torch.as_tensor(caption_ids)
        if caption_ids.ndim == 1:
            caption_ids = caption_ids.unsqueeze(0)
            squeezed = squeezed or patch_states is None
        caption_embeds = enc.embed_tokens(caption_ids)
    out = gen(patch_states, caption_embeds, mode)
    return out.squeeze(0) if squeezed else out


def compose_query(
    prompt: Optional[torch.Tensor], caption_ids: torch.Tensor, max_seq_len: Optional[int] = None
) -> AugmentedQuery:
    """Prompt precedes caption; checks the combined length when a cap is given."""
    caption_ids = torch.as_tensor(caption_ids)
    query = AugmentedQuery(prompt=prompt, caption=caption_ids)
    if max_seq_len is not None and query.encoded_length > max_seq_len:
        raise LengthError(
            f"encoded length {query.encoded_length} exceeds max_seq_len {max_seq_len}"
        )
    return query


class InversionHead(nn.Module):
    """2-layer MLP mapping a pooled image embedding to one pseudo-token."""

    def __init__(self, d_embed: int, d_text: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_embed, d_text), nn.GELU(), nn.Linear(d_text, d_text)
        )

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.net(pooled)


def late_fusion_embed(
    reference_pooled: torch.Tensor, caption_ids: torch.Tensor, enc: TextEncoder
) -> torch.Tensor:
    """normalize(text(caption) + pooled reference); antipodal sums fall back
    to the caption embedding with a warning instead of normalizing zero."""
    text = encode_text(AugmentedQuery(None, torch.as_tensor(caption_ids)), enc)
    fused = text + reference_pooled
    norms = fused.norm(dim=-1, keepdim=True)
    degenerate = norms < _ANTIPODE_EPS
    if bool(degenerate.any()):
        warnings.warn(
            "late fusion sum is numerically zero (antipodal inputs); "
            "falling back to the caption embedding",
            RuntimeWarning,
            stacklevel=2,
        )
        fused = torch.where(degenerate, text, fused / norms.clamp_min(_ANTIPODE_EPS))
        return fused
    return fused / norms


def textual_inversion_embed(
    reference_pooled: torch.Tensor,
    caption_ids: torch.Tensor,
    inv: InversionHead,
    enc: TextEncoder,
) -> torch.Tensor:
    """Pseudo-token mechanism: a length-1 prompt from the pooled reference."""
    pseudo = inv(reference_pooled).unsqueeze(-2)
    return encode_text(AugmentedQuery(pseudo, torch.as_tensor(caption_ids)), enc)


def fixed_prompt_embed(
    caption_ids: torch.Tensor, static_prompt: torch.Tensor, enc: TextEncoder
) -> torch.Tensor:
    """Static trainable prompt shared across all queries; length 0 degenerates
    to pure text retrieval."""
    caption_ids = torch.as_tensor(caption_ids)
    prompt: Optional[torch.Tensor] = static_prompt
    if static_prompt.shape[0] == 0:
        prompt = None
    elif caption_ids.ndim == 2:
        prompt = static_prompt.unsqueeze(0).expand(caption_ids.shape[0], -1, -1)
    return encode_text(AugmentedQuery(prompt, caption_ids), enc)
