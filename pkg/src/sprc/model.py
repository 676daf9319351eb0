"""The full retrieval model: all towers plus the similarity temperature.

One module owns every learnable tensor so checkpoints, EMA cloning, and
mechanism-specific optimizer param selection all hang off a single object.
All four mechanisms' heads are always constructed (deterministically, from the
run seed), but only the active mechanism's parameters are handed to the
optimizer — the others stay bit-identical to their initialization.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import torch
import torch.nn as nn

from .config import Mechanism, PromptMode, TrainConfig
from .encoders import EncoderConfig, ImageEncoder, TextEncoder
from .prompting import (
    InversionHead,
    PromptGenerator,
    fixed_prompt_embed,
    late_fusion_embed,
    textual_inversion_embed,
)

_DTYPES = {"f32": torch.float32, "f64": torch.float64}


def dtype_of(precision: str) -> torch.dtype:
    return _DTYPES[precision]


class RetrievalModel(nn.Module):
    def __init__(self, cfg: TrainConfig, vocab_size: int, d_img: int):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.d_img = d_img
        enc_cfg = EncoderConfig(
            vocab_size=vocab_size,
            d_img=d_img,
            d_model=cfg.d_model,
            d_text=cfg.d_text,
            d_embed=cfg.d_embed,
            n_heads=cfg.n_heads,
            n_layers_img=cfg.n_layers_img,
            n_layers_text=cfg.n_layers_text,
            max_seq_len=cfg.max_seq_len,
        )
        self.image = ImageEncoder(enc_cfg)
        self.text = TextEncoder(enc_cfg)
        self.prompt_gen = PromptGenerator(
            prompt_length=cfg.prompt_length,
            d_q=cfg.d_model,
            d_patch=cfg.d_model,
            d_text=cfg.d_text,
            n_heads=cfg.n_heads,
            gen_layers=cfg.gen_layers,
            mlp_layers=cfg.mlp_layers,
            max_caption_len=cfg.max_caption_len,
        )
        self.inversion = InversionHead(cfg.d_embed, cfg.d_text)
        self.static_prompt = nn.Parameter(0.02 * torch.randn(cfg.prompt_length, cfg.d_text))
        self.log_tau = nn.Parameter(
            torch.tensor(math.log(cfg.tau)), requires_grad=cfg.tau_trainable
        )

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def target_embeddings(self, features: torch.Tensor) -> torch.Tensor:
        """Candidate-side embeddings via the trainable target head."""
        states = self.image(features)
        return self.image.pooled(states, "target")

    def reference_pooled(self, features: torch.Tensor) -> torch.Tensor:
        states = self.image(features)
        return self.image.pooled(states, "reference")

    def query_embeddings(
        self,
        ref_features: torch.Tensor,
        caption_ids: torch.Tensor,
        mechanism: Mechanism = Mechanism.SPRC,
        prompt_mode: PromptMode = PromptMode.FULL,
    ) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Query-side embeddings [B, d_embed] plus, for the prompt mechanism,
        the generated prompts [B, L_p, d_text] (None for baselines)."""
        caption_ids = torch.as_tensor(caption_ids)
        if mechanism is Mechanism.SPRC:
            patch_states = self.image(ref_features)
            embeds = None
            if prompt_mode is not PromptMode.RI_ONLY:
                embeds = self.text.embed_tokens(caption_ids)
            prompts = self.prompt_gen(
                None if prompt_mode is PromptMode.RC_ONLY else patch_states,
                embeds,
                prompt_mode,
            )
            return self.text(prompts, caption_ids), prompts
        if mechanism is Mechanism.LATE_FUSION:
            pooled = self.reference_pooled(ref_features)
            return late_fusion_embed(pooled, caption_ids, self.text), None
        if mechanism is Mechanism.TEXT_INVERSION:
            pooled = self.reference_pooled(ref_features)
            return textual_inversion_embed(pooled, caption_ids, self.inversion, self.text), None
        if mechanism is Mechanism.FIXED_PROMPT:
            return fixed_prompt_embed(caption_ids, self.static_prompt, self.text), None
        raise ValueError(f"unknown mechanism {mechanism!r}")

    def trainable_parameters(self, mechanism: Mechanism) -> Iterator[nn.Parameter]:
        """Parameters the optimizer may touch under the given mechanism."""
        yield from self.text.parameters()
        yield self.image.target_head.weight
        if self.log_tau.requires_grad:
            yield self.log_tau
        if mechanism is Mechanism.SPRC:
            yield from self.prompt_gen.parameters()
        elif mechanism is Mechanism.TEXT_INVERSION:
            yield from self.inversion.parameters()
        elif mechanism is Mechanism.FIXED_PROMPT:
            yield self.static_prompt

    def frozen_parameter_names(self) -> list[str]:
        return [name for name, p in self.named_parameters() if not p.requires_grad]


def build_model(cfg: TrainConfig, vocab_size: int, d_img: int) -> RetrievalModel:
    """Deterministic construction: seeds the global generator, builds, casts."""
    torch.manual_seed(cfg.seed)
    model = RetrievalModel(cfg, vocab_size, d_img)
    return model.to(dtype_of(cfg.precision))
