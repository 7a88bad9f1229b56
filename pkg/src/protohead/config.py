"""Training configuration: every hyperparameter, seed, and schedule knob.

Lives in its own module because both the head constructors and the trainer
need it.  JSON configs use exactly these field names; unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from protohead.errors import ConfigError
from protohead.losses import LossWeights


@dataclass
class TrainConfig:
    head: str = "ga"
    num_prototypes: int = 10
    num_heads: int = 4
    attention_dim: int = 16
    neighbor_count: int | None = None  # None -> ceil(num_prototypes / 2)
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lambda_cluster: float = 0.1
    lambda_separation: float = 0.1
    lambda_incongruity: float = 0.5
    d_min: float = 1.0
    tau: float = 0.5
    tau_prime: float = 0.1
    projection_period: int = 5
    projection_start: int = 10
    patience: int = 10
    seed: int = 0
    two_view: bool = False
    num_sentiment_prototypes: int = 4
    init_jitter: float = 0.01
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    split_seed: int | None = None  # None -> seed
    parallel: bool = False

    def validate(self) -> None:
        if self.head not in ("ga", "cosine"):
            raise ConfigError(f"head must be 'ga' or 'cosine', got {self.head!r}")
        if self.num_prototypes < 2:
            raise ConfigError(f"num_prototypes must be >= 2, got {self.num_prototypes}")
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.attention_dim < 1:
            raise ConfigError(f"attention_dim must be >= 1, got {self.attention_dim}")
        if self.neighbor_count is not None and not (
                1 <= self.neighbor_count <= self.num_prototypes):
            raise ConfigError(
                f"neighbor_count must lie in [1, num_prototypes={self.num_prototypes}], "
                f"got {self.neighbor_count}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0.0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}")
        if not self.epsilon > 0.0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.projection_period < 1:
            raise ConfigError(f"projection_period must be >= 1, got {self.projection_period}")
        if self.projection_start < 1:
            raise ConfigError(f"projection_start must be >= 1, got {self.projection_start}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0 <= self.seed < 2 ** 63:
            raise ConfigError(f"seed must be a non-negative 64-bit integer, got {self.seed}")
        if self.split_seed is not None and not 0 <= self.split_seed < 2 ** 63:
            raise ConfigError(f"split_seed must be a non-negative 64-bit integer, "
                              f"got {self.split_seed}")
        if self.two_view:
            m = self.num_sentiment_prototypes
            if m < 2 or m % 2 != 0:
                raise ConfigError(
                    f"num_sentiment_prototypes must be even and >= 2 in two-view mode, "
                    f"got {m}")
        if self.init_jitter < 0.0:
            raise ConfigError(f"init_jitter must be >= 0, got {self.init_jitter}")
        for name in ("train_fraction", "val_fraction", "test_fraction"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {total!r}")
        self.loss_weights().validate()

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_cluster=self.lambda_cluster,
            lambda_separation=self.lambda_separation,
            lambda_incongruity=self.lambda_incongruity,
            d_min=self.d_min,
            tau=self.tau,
            tau_prime=self.tau_prime,
        )

    def resolved_neighbor_count(self) -> int:
        if self.neighbor_count is not None:
            return self.neighbor_count
        return math.ceil(self.num_prototypes / 2)

    def resolved_split_seed(self) -> int:
        return self.seed if self.split_seed is None else self.split_seed

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        config = cls(**data)
        config.validate()
        return config
