"""Run configuration: the flat key-value config format and its validation.

Config files are plain text, one ``key = value`` per line, ``#`` comments
allowed.  Keys are exactly the TrainConfig field names; unknown keys are
errors.  A shipped profile with every key lives at ``sprc/profiles/desk.profile``.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


class Mechanism(enum.Enum):
    """How the query embedding is produced from (reference image, caption)."""

    SPRC = "SPRC"
    LATE_FUSION = "LATE_FUSION"
    TEXT_INVERSION = "TEXT_INVERSION"
    FIXED_PROMPT = "FIXED_PROMPT"


class PromptMode(enum.Enum):
    """Which inputs the prompt generator may look at."""

    FULL = "FULL"
    RC_ONLY = "RC_ONLY"  # caption only; cross-attention onto patches skipped
    RI_ONLY = "RI_ONLY"  # image only; caption left out of self-attention


class InitMode(enum.Enum):
    FROM_CURRENT_PROMPT = "FROM_CURRENT_PROMPT"
    ZERO = "ZERO"


@dataclass(frozen=True)
class AuxiliaryConfig:
    """Inner-loop settings for the optimization-based auxiliary prompt."""

    inner_steps: int = 5
    inner_lr: float = 0.1
    init_mode: InitMode = InitMode.FROM_CURRENT_PROMPT
    backtracking: bool = True


@dataclass
class TrainConfig:
    """Everything a training run needs; field names double as config-file keys.

    ``lr=1e-3`` suits the toy dimensions here; the full-scale recipe this
    follows uses 1e-5/2e-5 on billion-parameter towers.  ``prompt_length=8``
    is the desk default; 32 is the documented full-fidelity value.
    ``image_size``/``padding_ratio`` are recorded for future real-image
    adapters and are inert on synthetic features.
    """

    # objective
    gamma: float = 0.8
    tau: float = 100.0
    tau_trainable: bool = False
    align_norm: str = "frobenius"  # or "per_token_mean"
    # auxiliary inner loop
    aux_inner_steps: int = 5
    aux_inner_lr: float = 0.1
    aux_init_mode: str = "FROM_CURRENT_PROMPT"
    aux_backtracking: bool = True
    # optimization
    lr: float = 1e-3
    weight_decay: float = 0.05
    schedule: str = "cosine"
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    ema_decay: float = 0.999
    clip_norm: float = 1.0
    precision: str = "f32"
    # mechanism / ablations
    mechanism: Mechanism = Mechanism.SPRC
    prompt_mode: PromptMode = PromptMode.FULL
    # architecture
    prompt_length: int = 8
    d_model: int = 32
    d_text: int = 32
    d_embed: int = 32
    n_heads: int = 2
    n_layers_img: int = 1
    n_layers_text: int = 1
    gen_layers: int = 1
    mlp_layers: int = 2
    max_caption_len: int = 8
    max_seq_len: int = 64
    # evaluation
    exclude_reference: bool = True
    # inert constants for real-image adapters
    image_size: int = 224
    padding_ratio: float = 1.25

    @property
    def aux(self) -> AuxiliaryConfig:
        return AuxiliaryConfig(
            inner_steps=self.aux_inner_steps,
            inner_lr=self.aux_inner_lr,
            init_mode=InitMode[self.aux_init_mode],
            backtracking=self.aux_backtracking,
        )

    def validate(self) -> "TrainConfig":
        """Check ranges and apply cross-field rules; returns self."""
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.align_norm not in ("frobenius", "per_token_mean"):
            raise ConfigError(f"align_norm {self.align_norm!r} not in (frobenius, per_token_mean)")
        if self.aux_inner_steps < 0:
            raise ConfigError("aux_inner_steps must be >= 0")
        if not 0 < self.aux_inner_lr <= 1.0:
            raise ConfigError("aux_inner_lr must be in (0, 1]")
        if self.aux_init_mode not in InitMode.__members__:
            raise ConfigError(
                f"aux_init_mode {self.aux_init_mode!r} not in {sorted(InitMode.__members__)}"
            )
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.schedule != "cosine":
            raise ConfigError(f"schedule {self.schedule!r} unsupported (only 'cosine')")
        for name in ("batch_size", "steps", "prompt_length", "d_model", "d_text", "d_embed", "n_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("n_layers_img", "n_layers_text", "gen_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.mlp_layers < 1:
            raise ConfigError("mlp_layers must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must be in [0, 1]")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0 (0 disables)")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision {self.precision!r} not in (f32, f64)")
        if self.max_caption_len < 1 or self.max_seq_len < self.prompt_length + 1:
            raise ConfigError("max_caption_len must be >= 1 and max_seq_len > prompt_length")
        if self.mechanism is not Mechanism.SPRC:
            # the alignment branch exists only for the full method
            self.gamma = 0.0
            self.aux_inner_steps = 0
        return self

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, enum.Enum) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in data.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], raw)
        return cls(**kwargs).validate()


def _coerce(f: dataclasses.Field, raw):
    """Convert a raw (string or typed) value to the field's declared type."""
    if f.type in ("Mechanism", Mechanism):
        if isinstance(raw, Mechanism):
            return raw
        try:
            return Mechanism[str(raw)]
        except KeyError:
            raise ConfigError(
                f"{f.name}: {raw!r} not in {sorted(Mechanism.__members__)}"
            ) from None
    if f.type in ("PromptMode", PromptMode):
        if isinstance(raw, PromptMode):
            return raw
        try:
            return PromptMode[str(raw)]
        except KeyError:
            raise ConfigError(
                f"{f.name}: {raw!r} not in {sorted(PromptMode.__members__)}"
            ) from None
    base = {"int": int, "float": float, "bool": bool, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]
    if base is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes"):
            return True
        if text in ("false", "0", "no"):
            return False
        raise ConfigError(f"{f.name}: cannot parse {raw!r} as bool")
    try:
        value = base(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{f.name}: cannot parse {raw!r} as {base.__name__}") from None
    if base is float and not math.isfinite(value):
        raise ConfigError(f"{f.name}: value must be finite")
    return value


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    data: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in data:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        data[key] = value
    return TrainConfig.from_dict(data)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"{k} = {v}" for k, v in cfg.to_dict().items()]
    return "\n".join(lines) + "\n"
