from __future__ import annotations

import dataclasses
from dataclasses import dataclass

QUERY_MODES = ("semantic", "previous_visual")


@dataclass(frozen=True)
class ModelConfig:
    height: int = 32
    width: int = 96
    t_max: int = 12  # decode steps and feature-sequence length
    feat_dim: int = 96  # D
    sem_dim: int = 64  # d_s
    vis_dim: int = 64  # VD hidden size
    emb_dim: int = 32  # shared character embedding f
    step_dim: int = 16  # step embedding e_t
    attn_dim: int = 64
    conv_channels: tuple[int, ...] = (16, 32, 64, 96)
    pool_layers: int = 3  # leading conv blocks followed by 2x2 max-pooling
    batch_norm: bool = True
    activation: str = "relu"  # "relu" | "gelu"
    pool: str = "max"  # "max" | "avg"
    extractor_rnn_layers: int = 1
    ctc_rnn_layers: int = 1
    se_rnn_layers: int = 2
    coupled_baseline: bool = False
    feed_prev_symbol: bool = True  # coupled baseline only: y_{t-1} into the VD cell
    query_mode: str = "semantic"

    def __post_init__(self):
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}, got {self.query_mode!r}")
        for name in ("height", "width", "t_max", "feat_dim", "sem_dim", "vis_dim", "emb_dim",
                     "step_dim", "attn_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.feat_dim % 2 or self.sem_dim % 2:
            raise ValueError("feat_dim and sem_dim must be even (bidirectional halves)")
        if not self.conv_channels or min(self.conv_channels) <= 0:
            raise ValueError("conv_channels must be a non-empty list of positive ints")
        if self.activation not in ("relu", "gelu") or self.pool not in ("max", "avg"):
            raise ValueError("activation must be relu|gelu and pool max|avg")
        if not 0 <= self.pool_layers <= len(self.conv_channels):
            raise ValueError("pool_layers exceeds the number of conv blocks")

    @property
    def max_label_len(self) -> int:
        return self.t_max - 1  # room for EoS

    @property
    def has_semantic(self) -> bool:
        return not self.coupled_baseline

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "conv_channels" in d:
            d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """The small geometry used for gradient verification.

    GELU and average pooling keep the loss smooth so central differences are
    meaningful; ReLU and max-pooling kinks sit within a 1e-5 step of random inputs.
    """
    base = dict(height=8, width=16, t_max=4, feat_dim=8, sem_dim=8, vis_dim=8, emb_dim=6,
                step_dim=4, attn_dim=6, conv_channels=(3, 4), pool_layers=1,
                activation="gelu", pool="avg")
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class LossWeights:
    ctc: float = 1.0
    v: float = 1.0
    s: float = 0.2
    f: float = 1.0

    def __post_init__(self):
        if min(self.ctc, self.v, self.s, self.f) < 0:
            raise ValueError("loss weights must be non-negative")
