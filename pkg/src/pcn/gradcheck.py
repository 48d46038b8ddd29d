"""Finite-difference verification of the BPTT gradients.

Analytical gradients come from the tape (in float32 or float64); the
numerical oracle is always a float64 central difference, so the 32-bit check
measures the float32 gradient error rather than float32 rounding in the
oracle itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pcn import model
from pcn import tensor as tn

GROUPS = ("ff_weights", "fb_weights", "rates", "biases", "fc")


def group_of(name: str) -> str:
    if name.startswith("ff_weight"):
        return "ff_weights"
    if name.startswith("fb_weight"):
        return "fb_weights"
    if name.startswith("rate_"):
        return "rates"
    if name.endswith("bias") or name.startswith("ff_bias"):
        return "biases"
    return "fc"


@dataclass
class GroupResult:
    group: str
    samples: int
    max_rel_error: float
    worst: tuple[str, tuple[int, ...], float, float] | None = None  # name, index, analytic, numeric


@dataclass
class GradCheckReport:
    name: str
    dtype: str
    groups: dict[str, GroupResult] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max((g.max_rel_error for g in self.groups.values()), default=0.0)

    def table(self) -> str:
        lines = [f"{self.name} [{self.dtype}]"]
        for g in self.groups.values():
            lines.append(f"  {g.group:<11} samples={g.samples:<4} max_rel_error={g.max_rel_error:.3e}")
        lines.append(f"  overall max_rel_error={self.max_rel_error:.3e}")
        return "\n".join(lines)


def rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def loss_value(params, images: np.ndarray, labels: np.ndarray, T: int | None) -> float:
    with tn.no_grad():
        logits = model.forward(params, images.astype(params.fc_weight.dtype), T)
        loss, _ = tn.softmax_cross_entropy(logits, labels)
    return float(loss.data)


def analytic_grads(params, images: np.ndarray, labels: np.ndarray, T: int | None) -> dict[str, np.ndarray]:
    tn.zero_grad(params.parameters())
    logits = model.forward(params, images.astype(params.fc_weight.dtype), T)
    loss, _ = tn.softmax_cross_entropy(logits, labels)
    tn.backward(loss)
    return {n: p.grad.copy() for n, p in params.named_parameters()}


def check_gradients(arch: str = "E", T: int | None = 1, tied: bool = False,
                    dataset: str = "mnist", samples: int = 50, dtype=np.float64,
                    seed: int = 0, batch: int = 2, h: float = 1e-6,
                    floor: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients with float64 central differences.

    ``samples`` coordinates are drawn per parameter group (all of them when
    the group is smaller).  ``T=None`` checks the plain network.
    """
    return check_gradients_multi(arch, T, tied, dataset, samples, (dtype,),
                                 seed, batch, h, floor)[0]


def check_gradients_multi(arch: str = "E", T: int | None = 1, tied: bool = False,
                          dataset: str = "mnist", samples: int = 50,
                          dtypes=(np.float32, np.float64), seed: int = 0, batch: int = 2,
                          h: float = 1e-6, floor: float = 1e-4) -> list[GradCheckReport]:
    """Like :func:`check_gradients` for several tape precisions at once.

    The finite-difference oracle is evaluated once and shared, so checking
    float32 and float64 together costs about as much as checking one.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    cfg = model.arch_config(arch, dataset)
    rng = np.random.default_rng(seed)
    with tn.precision(np.float64):
        ref = model.build_plain(cfg, seed) if T is None else model.build_pcn(cfg, tied, seed)
        if T is not None:
            # move rates off their initial constants so every coordinate differs
            for r in ref.rate_a + ref.rate_b:
                r.data[...] += rng.uniform(-0.1, 0.1, size=r.shape)
    images = rng.standard_normal((batch, cfg.input_channels, cfg.input_size, cfg.input_size))
    labels = rng.integers(0, cfg.num_classes, size=batch)

    grads = []
    for dtype in dtypes:
        params = ref if np.dtype(dtype) == np.float64 else model.cast_params(ref, dtype)
        grads.append(analytic_grads(params, images, labels, T))
    named = dict(ref.named_parameters())

    name = model.model_name(arch, T, tied)
    reports = [GradCheckReport(name, np.dtype(d).name) for d in dtypes]
    for group in GROUPS:
        names = [n for n in named if group_of(n) == group]
        if not names:
            continue
        sizes = np.array([named[n].data.size for n in names])
        total = int(sizes.sum())
        picks = (np.arange(total) if total <= samples
                 else rng.choice(total, size=samples, replace=False))
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        worst = [0.0] * len(dtypes)
        worst_info: list = [None] * len(dtypes)
        for flat in picks:
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            pname = names[i]
            p = named[pname]
            idx = np.unravel_index(int(flat - offsets[i]), p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = loss_value(ref, images, labels, T)
            p.data[idx] = orig - h
            down = loss_value(ref, images, labels, T)
            p.data[idx] = orig
            numeric = (up - down) / (2 * h)
            for k, g in enumerate(grads):
                analytic = float(g[pname][idx])
                err = rel_error(analytic, numeric, floor)
                if err >= worst[k]:
                    worst[k] = err
                    worst_info[k] = (pname, tuple(int(v) for v in idx), analytic, numeric)
        for k, rep in enumerate(reports):
            rep.groups[group] = GroupResult(group, len(picks), worst[k], worst_info[k])
    return reports
