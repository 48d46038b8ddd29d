"""SGD with momentum, Adam, and step learning-rate schedules.

Weight decay is L2-coupled: ``wd * w`` is added to the gradient of every
parameter whose ``decay`` flag is set (conv and FC weights).  Biases and
update rates are never decayed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pcn.tensor import Parameter


def _decayed_grad(p: Parameter, weight_decay: float) -> np.ndarray:
    if p.decay and weight_decay:
        return p.grad + weight_decay * p.data
    return p.grad


class SgdMomentum:
    def __init__(self, params: Sequence[Parameter], lr: float = 0.01, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.params = _unique(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            g = _decayed_grad(p, self.weight_decay)
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        return {f"velocity.{i}": v for i, v in enumerate(self.velocity)}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, v in enumerate(self.velocity):
            v[...] = state[f"velocity.{i}"]

    def scalars(self) -> dict:
        return {}

    def load_scalars(self, d: dict) -> None:
        pass


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-8, weight_decay: float = 5e-4):
        self.params = _unique(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = _decayed_grad(p, self.weight_decay)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m.{i}": m for i, m in enumerate(self.m)}
        out.update({f"v.{i}": v for i, v in enumerate(self.v)})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            m[...] = state[f"m.{i}"]
            v[...] = state[f"v.{i}"]

    def scalars(self) -> dict:
        return {"t": self.t}

    def load_scalars(self, d: dict) -> None:
        self.t = int(d.get("t", 0))


def _unique(params: Sequence[Parameter]) -> list[Parameter]:
    seen: set[int] = set()
    out = []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def sgd_step(params: Sequence[Parameter], opt: SgdMomentum) -> None:
    """Apply one momentum-SGD update using the gradients stored on ``params``."""
    if _unique(params) != opt.params:
        raise ValueError("optimizer was built for a different parameter list")
    opt.step()


def adam_step(params: Sequence[Parameter], opt: Adam) -> None:
    if _unique(params) != opt.params:
        raise ValueError("optimizer was built for a different parameter list")
    opt.step()


@dataclass(frozen=True)
class StepSchedule:
    initial_lr: float
    milestones: tuple[int, ...]
    total_epochs: int
    factor: float = 0.1

    def __post_init__(self):
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        if ms and ms[-1] >= self.total_epochs:
            raise ValueError(f"milestone {ms[-1]} not below total epochs {self.total_epochs}")

    def to_dict(self) -> dict:
        return {"initial_lr": self.initial_lr, "milestones": list(self.milestones),
                "total_epochs": self.total_epochs, "factor": self.factor}


def lr_at(schedule: StepSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside 0..{schedule.total_epochs - 1}")
    drops = sum(1 for m in schedule.milestones if epoch >= m)
    return schedule.initial_lr * schedule.factor ** drops


# CIFAR: 0.01, divided by 10 after 80/140/200 epochs, 250 in total
CIFAR_SCHEDULE = StepSchedule(0.01, (80, 140, 200), 250)
# MNIST/SVHN "20-10-10": 20 epochs at 1e-3, 10 at 1e-4, 10 at 1e-5
ADAM_SCHEDULE = StepSchedule(1e-3, (20, 30), 40)


def scaled_adam_schedule(first: int, second: int, third: int, lr: float = 1e-3) -> StepSchedule:
    """A shortened three-phase Adam schedule, e.g. (8, 4, 3) for 15 epochs."""
    return StepSchedule(lr, (first, first + second), first + second + third)


@dataclass
class OptimizerSpec:
    kind: str = "adam"
    schedule: StepSchedule = field(default_factory=lambda: ADAM_SCHEDULE)

    def build(self, params: Sequence[Parameter]):
        if self.kind == "adam":
            return Adam(params, lr=self.schedule.initial_lr)
        if self.kind == "sgd":
            return SgdMomentum(params, lr=self.schedule.initial_lr)
        raise ValueError(f"unknown optimizer {self.kind!r}")
