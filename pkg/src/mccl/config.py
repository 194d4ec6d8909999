"""Run configuration: namespaced ``key: value`` text files.

One key per line, ``#`` comments and blank lines ignored. Keys are
namespaced by module (``mcc.tau``, ``cpi.k``, ``train.epochs``); unknown
or duplicate keys are configuration errors. Defaults follow the reference
training recipe; desk-scale presets shrink only the knobs that control
capacity.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # cpi.*
    k: int = 2048
    kmeans_iters: int = 100
    kmeans_batch: int = 1024
    # mcc.*
    tau: float = 0.1
    momentum: float = 0.99999
    epsilon: float = 1e-8
    mass_floor: float = 1e-4
    use_reconstructed: bool = True
    # pki.*
    d_model: int = 128
    num_heads: int = 4
    decoder_layers: int = 2
    ffn_factor: int = 4
    share_branch_weights: bool = False
    label_embeddings_path: str = ""
    label_embed_dim: int = 512
    # model.* / backbone.*
    stages: tuple[int, ...] = (-2, -1)
    backbone_mode: str = "passthrough"
    backbone_widths: tuple[int, ...] = (32, 64)
    backbone_downsamples: tuple[int, ...] = (2, 2)
    # train.*
    epochs: int = 20
    batch_size: int = 32
    max_lr: float = 1e-4
    weight_decay: float = 1e-2
    warmup_frac: float = 0.3
    ema_decay: float = 0.9997
    gamma_pos: float = 0.0
    gamma_neg: float = 2.0
    seed: int = 0
    # eval.*
    threshold: float = 0.5

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("cpi.k must be >= 1")
        if self.tau <= 0:
            raise ConfigError("mcc.tau must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("mcc.lambda must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ConfigError("mcc.epsilon must be positive")
        if self.d_model % self.num_heads != 0:
            raise ConfigError("pki.d_model must be divisible by pki.heads")
        if self.decoder_layers < 1:
            raise ConfigError("pki.decoder_layers must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError("train.warmup_frac must lie in (0, 1)")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("train.ema_decay must lie in [0, 1]")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("eval.threshold must lie in (0, 1)")
        if self.max_lr <= 0:
            raise ConfigError("train.max_lr must be positive")

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        """Desk-scale preset: smaller prototype budget, same recipe."""
        base = {"k": 256}
        base.update(overrides)
        return cls(**base)


KEY_TO_FIELD = {
    "cpi.k": "k",
    "cpi.kmeans_iters": "kmeans_iters",
    "cpi.kmeans_batch": "kmeans_batch",
    "mcc.tau": "tau",
    "mcc.lambda": "momentum",
    "mcc.epsilon": "epsilon",
    "mcc.mass_floor": "mass_floor",
    "mcc.enabled": "use_reconstructed",
    "pki.d_model": "d_model",
    "pki.heads": "num_heads",
    "pki.decoder_layers": "decoder_layers",
    "pki.ffn_factor": "ffn_factor",
    "pki.share_branch_weights": "share_branch_weights",
    "pki.label_embeddings": "label_embeddings_path",
    "pki.d_embed": "label_embed_dim",
    "model.stages": "stages",
    "backbone.mode": "backbone_mode",
    "backbone.widths": "backbone_widths",
    "backbone.downsamples": "backbone_downsamples",
    "train.epochs": "epochs",
    "train.batch_size": "batch_size",
    "train.max_lr": "max_lr",
    "train.weight_decay": "weight_decay",
    "train.warmup_frac": "warmup_frac",
    "train.ema_decay": "ema_decay",
    "train.gamma_pos": "gamma_pos",
    "train.gamma_neg": "gamma_neg",
    "train.seed": "seed",
    "eval.threshold": "threshold",
}

FIELD_TO_KEY = {v: k for k, v in KEY_TO_FIELD.items()}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_value(text: str, target_type, key: str):
    text = text.strip()
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    if target_type is str:
        return text
    if target_type is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typing.get_origin(target_type) is tuple:
        if not text:
            return ()
        return tuple(int(v) for v in text.split(","))
    raise ConfigError(f"unsupported config type for key {key}")


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    config = base or RunConfig()
    hints = typing.get_type_hints(RunConfig)
    seen: set[str] = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ConfigError(f"config line {line_no}: expected 'key: value', got {raw!r}")
        key, value = (part.strip() for part in line.split(":", 1))
        if key not in KEY_TO_FIELD:
            raise ConfigError(f"config line {line_no}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"config line {line_no}: duplicate key {key!r}")
        seen.add(key)
        field_name = KEY_TO_FIELD[key]
        try:
            parsed = _parse_value(value, hints[field_name], key)
        except ValueError as exc:
            raise ConfigError(f"config line {line_no}: bad value for {key}: {exc}") from exc
        setattr(config, field_name, parsed)
    config.validate()
    return config


def load_config(path: str | Path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def config_to_text(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{FIELD_TO_KEY[f.name]}: {rendered}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Synthetic generator spec files (same key: value syntax)
# ---------------------------------------------------------------------------

_SYNTH_KEYS = {
    "classes": ("num_classes", int),
    "clues": ("num_clues", int),
    "stage_shapes": ("stage_shapes", "shapes"),
    "samples": ("samples_per_split", "triple"),
    "imbalance_exponent": ("imbalance_exponent", float),
    "noise_std": ("noise_std", float),
    "seed": ("seed", int),
    "mode": ("mode", str),
    "clue_scale": ("clue_scale", float),
    "background_std": ("background_std", float),
    "extra_label_rate": ("extra_label_rate", float),
    "clue_redundancy": ("clue_redundancy", int),
}


def parse_synthetic_spec(text: str):
    """Parse a generator spec file into a SyntheticSpec."""
    from .data import SyntheticSpec, parse_stage_shapes

    kwargs = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ConfigError(f"spec line {line_no}: expected 'key: value', got {raw!r}")
        key, value = (part.strip() for part in line.split(":", 1))
        if key not in _SYNTH_KEYS:
            raise ConfigError(f"spec line {line_no}: unknown key {key!r}")
        field_name, kind = _SYNTH_KEYS[key]
        try:
            if kind == "shapes":
                kwargs[field_name] = tuple(tuple(s) for s in parse_stage_shapes(value))
            elif kind == "triple":
                parts = tuple(int(v) for v in value.split(","))
                if len(parts) != 3:
                    raise ValueError("need train,val,test")
                kwargs[field_name] = parts
            else:
                kwargs[field_name] = kind(value)
        except Exception as exc:
            raise ConfigError(f"spec line {line_no}: bad value for {key}: {exc}") from exc
    spec = SyntheticSpec(**kwargs)
    spec.validate()
    return spec
