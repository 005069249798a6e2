"""Model hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass, asdict

from ..errors import ConfigurationError


@dataclass(frozen=True)
class ModelConfig:
    """Encoder-decoder transformer dimensions.

    num_layers applies to encoder and decoder alike. feature_layer picks the
    encoder layer whose states feed the meta-feature comparison; -1 means the
    final (post-norm) states.
    """

    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 0
    max_len: int = 512
    dropout: float = 0.1
    feature_layer: int = -1
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError("num_layers must be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigurationError("hidden_dim must be divisible by num_heads")
        if self.vocab_size < 1:
            raise ConfigurationError("vocab_size must be set (>= 1)")
        if self.max_len < 2:
            raise ConfigurationError("max_len must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)
