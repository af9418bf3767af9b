"""Adam optimizer and cosine learning-rate schedule over a ParamStore"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from blocks import ParamStore
from errors import ConfigError, NumericError
from tensorcore import Array

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


@dataclass
class Adam:
    """Adam with bias correction; moments are keyed by parameter path"""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {self.betas}")

    def step(self, store: ParamStore, grads: Mapping[str, Array], lr: float | None = None) -> None:
        """Apply one update to every trainable parameter that received a gradient"""
        rate = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for path, tensor in store.trainable():
            g = grads.get(path)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {path} at optimizer step {self.step_count}")
            m = self.m.get(path)
            v = self.v.get(path)
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            self.m[path], self.v[path] = m, v
            tensor.data -= rate * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self, prefix: str) -> dict[str, Array]:
        """Moments flattened into checkpoint-ready named arrays"""
        out: dict[str, Array] = {}
        for path in sorted(self.m):
            out[f"{prefix}.m.{path}"] = self.m[path]
            out[f"{prefix}.v.{path}"] = self.v[path]
        return out

    def load_state(self, arrays: Mapping[str, Array], prefix: str, step_count: int) -> None:
        self.m = {k[len(prefix) + 3 :]: a.copy() for k, a in arrays.items() if k.startswith(f"{prefix}.m.")}
        self.v = {k[len(prefix) + 3 :]: a.copy() for k, a in arrays.items() if k.startswith(f"{prefix}.v.")}
        self.step_count = step_count


def cosine_lr(base_lr: float, step: int, total_steps: int, final_fraction: float = 0.01) -> float:
    """Cosine decay from base_lr to final_fraction * base_lr over total_steps"""
    if total_steps <= 0:
        return base_lr
    progress = min(max(step / total_steps, 0.0), 1.0)
    floor = final_fraction * base_lr
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * progress))
