from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Parameter


@dataclass
class LinearSchedule:
    """Linear warmup from 0 to 1 over ``warmup_fraction`` of the run, then linear decay to 0."""

    total_steps: int
    warmup_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")

    @property
    def warmup_steps(self) -> float:
        return self.warmup_fraction * self.total_steps

    def factor(self, position: float) -> float:
        warmup = self.warmup_steps
        if position <= 0:
            return 0.0 if warmup > 0 else 1.0
        if position < warmup:
            return position / warmup
        if position >= self.total_steps:
            return 0.0
        remaining = self.total_steps - warmup
        if remaining <= 0:
            return 0.0
        return max(0.0, (self.total_steps - position) / remaining)


def global_grad_norm(params: Iterable[Parameter]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = p.grad * p.dtype.type(factor)
    return norm


@dataclass
class Adam:
    params: List[Parameter]
    learning_rate: float
    schedule: LinearSchedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.learning_rate}")
        for p in self.params:
            self.m.setdefault(p.name, np.zeros_like(p.data))
            self.v.setdefault(p.name, np.zeros_like(p.data))

    def current_rate(self, position: float | None = None) -> float:
        pos = self.step_count if position is None else position
        return self.learning_rate * self.schedule.factor(pos)

    def step(self, schedule_position: float | None = None) -> float:
        """One Adam update at the scheduled rate; gradients are zeroed afterwards."""
        rate = self.current_rate(schedule_position)
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad
            m = self.m[p.name] = self.beta1 * self.m[p.name] + (1.0 - self.beta1) * g
            v = self.v[p.name] = self.beta2 * self.v[p.name] + (1.0 - self.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = (p.data - rate * update).astype(p.dtype, copy=False)
            p.zero_grad()
        return rate

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], step_count: int) -> None:
        for p in self.params:
            self.m[p.name] = arrays[f"optim.m.{p.name}"].astype(p.dtype)
            self.v[p.name] = arrays[f"optim.v.{p.name}"].astype(p.dtype)
        self.step_count = step_count


def adam_step(optimizer: Adam, learning_rate: float, schedule_position: float) -> float:
    """Functional form: apply one update with an explicit peak rate and schedule position."""
    if learning_rate < 0:
        raise ConfigError(f"learning rate must be non-negative, got {learning_rate}")
    optimizer.learning_rate = learning_rate
    return optimizer.step(schedule_position)
