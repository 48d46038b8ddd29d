"""Training / evaluation loops, repeated runs, and the checkpoint container."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from pcn import datasets, kernels, model, optim
from pcn import tensor as tn
from pcn.datasets import NormStats, Split

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PCNCKPT1"
CKPT_VERSION = 1
METRICS_HEADER = ["epoch", "train_loss", "train_acc", "test_acc", "lr", "seconds"]


class TrainingDiverged(RuntimeError):
    """Loss (or any intermediate value) became NaN/Inf during training."""


@dataclass
class TrainConfig:
    arch: str = "E"
    dataset: str = "mnist"
    plain: bool = False
    tied: bool = False
    cycles: int = 1
    optimizer: str = "adam"
    lr: float | None = None
    milestones: tuple[int, ...] | None = None
    epochs: int | None = None
    batch_size: int = 128
    seed: int = 0
    subset_size: int | None = None
    augment: bool | None = None  # None: CIFAR only
    eval_every: int = 1  # 0: evaluate after the last epoch only
    eval_batch_size: int = 500
    deterministic: bool = False
    data_dir: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.cycles < 0:
            raise ValueError("cycles must be >= 0")
        if self.arch not in model.CHANNELS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.dataset not in model.DATASET_SHAPES:
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.milestones is not None:
            self.milestones = tuple(int(m) for m in self.milestones)

    @property
    def model_name(self) -> str:
        return model.model_name(self.arch, None if self.plain else self.cycles, self.tied)

    def schedule(self) -> optim.StepSchedule:
        base = optim.ADAM_SCHEDULE if self.optimizer == "adam" else optim.CIFAR_SCHEDULE
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        total = base.total_epochs if self.epochs is None else self.epochs
        if self.milestones is not None:
            ms = self.milestones
        elif total == base.total_epochs:
            ms = base.milestones
        else:
            # stretch the default schedule to the requested length
            scaled = {round(m * total / base.total_epochs) for m in base.milestones}
            ms = tuple(sorted(m for m in scaled if 0 < m < total))
        lr = base.initial_lr if self.lr is None else self.lr
        return optim.StepSchedule(lr, tuple(m for m in ms if m < max(total, 1)), max(total, 1))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["milestones"] is not None:
            d["milestones"] = list(d["milestones"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunMetrics:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float | None] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    best_test_acc: float | None = None

    def record(self, epoch, loss, train_acc, test_acc, lr, seconds) -> bool:
        """Append one epoch; return True when ``test_acc`` is a new best."""
        self.epoch.append(epoch)
        self.train_loss.append(loss)
        self.train_acc.append(train_acc)
        self.test_acc.append(test_acc)
        self.lr.append(lr)
        self.seconds.append(seconds)
        if test_acc is not None and (self.best_test_acc is None or test_acc > self.best_test_acc):
            self.best_test_acc = test_acc
            self.best_epoch = epoch
            return True
        return False

    @property
    def final_test_acc(self) -> float | None:
        evaluated = [a for a in self.test_acc if a is not None]
        return evaluated[-1] if evaluated else None

    def without_timing(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("seconds")
        return d

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunMetrics":
        return cls(**d)

    def to_csv(self, include_seconds: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for i in range(len(self.epoch)):
            ta = self.test_acc[i]
            w.writerow([self.epoch[i], repr(self.train_loss[i]), repr(self.train_acc[i]),
                        "" if ta is None else repr(ta), repr(self.lr[i]),
                        f"{self.seconds[i]:.3f}" if include_seconds else ""])
        return buf.getvalue()


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    params: model.PlainParams
    cycles: int | None  # None for the plain model
    norm_stats: NormStats
    metrics: RunMetrics = field(default_factory=RunMetrics)
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> model.ArchConfig:
        return self.params.config

    @property
    def tied(self) -> bool:
        return isinstance(self.params, model.PcnParams) and self.params.tied

    @property
    def name(self) -> str:
        return model.model_name(self.config.name, self.cycles, self.tied)

    def to_bytes(self) -> bytes:
        tensors = [(n, p.data) for n, p in self.params.named_parameters()]
        tensors += [(f"opt.{n}", a) for n, a in sorted(self.optimizer_state.items())]
        manifest, chunks, offset = [], [], 0
        for name, arr in tensors:
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset,
                             "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        header = {
            "format_version": CKPT_VERSION,
            "arch": self.config.to_dict(),
            "kind": "pcn" if isinstance(self.params, model.PcnParams) else "plain",
            "tied": self.tied,
            "cycles": self.cycles,
            "norm_stats": self.norm_stats.to_dict(),
            "metrics": self.metrics.to_dict(),
            "metadata": self.metadata,
            "tensors": manifest,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return CKPT_MAGIC + struct.pack("<I", len(blob)) + blob + b"".join(chunks)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != CKPT_MAGIC:
            raise ValueError("not a checkpoint: bad magic bytes")
        if len(raw) < 12:
            raise ValueError("truncated checkpoint header")
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        if header.get("format_version") != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        payload = memoryview(raw)[12 + hlen:]
        arrays = {}
        for t in header["tensors"]:
            end = t["offset"] + t["nbytes"]
            if end > len(payload):
                raise ValueError(f"truncated checkpoint payload for tensor {t['name']}")
            arrays[t["name"]] = np.frombuffer(payload[t["offset"]:end], dtype="<f4"
                                              ).reshape(t["shape"]).astype(np.float32)
        cfg = model.ArchConfig.from_dict(header["arch"])
        with tn.precision(np.float32):
            if header["kind"] == "pcn":
                params = model.build_pcn(cfg, tied=header["tied"], seed=0)
            else:
                params = model.build_plain(cfg, seed=0)
        for name, p in params.named_parameters():
            if name not in arrays:
                raise ValueError(f"checkpoint lacks tensor {name}")
            if arrays[name].shape != p.shape:
                raise ValueError(f"tensor {name}: shape {arrays[name].shape} != {p.shape}")
            p.data[...] = arrays[name]
        opt_state = {n[4:]: a for n, a in arrays.items() if n.startswith("opt.")}
        return cls(params, header["cycles"], NormStats.from_dict(header["norm_stats"]),
                   RunMetrics.from_dict(header["metrics"]), opt_state, header["metadata"])

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------------ running


def _forward(params, images, cycles: int | None) -> tn.Tensor:
    return model.forward(params, images, cycles)


def predict_split(params, images: np.ndarray, labels: np.ndarray, cycles: int | None,
                  batch_size: int = 500) -> tuple[float, float]:
    """Top-1 accuracy and mean loss over already-normalized ``images``."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty split")
    correct = 0
    loss_sum = 0.0
    with tn.no_grad():
        for s in range(0, len(labels), batch_size):
            x, y = images[s:s + batch_size], labels[s:s + batch_size]
            logits = _forward(params, x.astype(params.fc_weight.dtype), cycles)
            loss, probs = tn.softmax_cross_entropy(logits, y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            loss_sum += float(loss.data) * len(y)
    return correct / len(labels), loss_sum / len(labels)


def evaluate(checkpoint: Checkpoint, split: Split, T_override: int | None = None,
             batch_size: int = 500) -> tuple[float, float]:
    """Accuracy and mean loss of ``checkpoint`` on a raw (unnormalized) split."""
    cfg = checkpoint.config
    if split.images.shape[1:] != (cfg.input_channels, cfg.input_size, cfg.input_size):
        raise ValueError(f"split images {split.images.shape[1:]} do not fit architecture "
                         f"input {(cfg.input_channels, cfg.input_size, cfg.input_size)}")
    cycles = checkpoint.cycles
    if T_override is not None:
        if not isinstance(checkpoint.params, model.PcnParams):
            raise ValueError("T_override needs a PCN checkpoint")
        cycles = T_override
    images = datasets.normalize(split.images, checkpoint.norm_stats)
    return predict_split(checkpoint.params, images, split.labels, cycles, batch_size)


def param_norms(params) -> dict[str, float]:
    return {n: float(np.linalg.norm(p.data)) for n, p in params.named_parameters()}


def _epoch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch])


def build_params(cfg: TrainConfig):
    arch = model.arch_config(cfg.arch, cfg.dataset)
    if cfg.plain:
        return model.build_plain(arch, cfg.seed)
    return model.build_pcn(arch, tied=cfg.tied, seed=cfg.seed)


def train_run(cfg: TrainConfig, data: tuple[Split, Split] | None = None,
              progress=None) -> tuple[Checkpoint, RunMetrics]:
    """Train one model per ``cfg``; returns the final checkpoint and metrics.

    ``data`` overrides dataset loading with explicit (train, test) splits of
    raw [0,1] pixels.  ``progress`` is called as ``progress(epoch, metrics)``.
    """
    if cfg.deterministic:
        kernels.set_deterministic(True)
    train, test = data if data is not None else datasets.load(cfg.dataset, cfg.data_dir)
    train = train.subset(cfg.subset_size)
    stats = datasets.compute_norm_stats(train)
    train_x = datasets.normalize(train.images, stats)
    test_x = datasets.normalize(test.images, stats)
    augment = cfg.augment if cfg.augment is not None else cfg.dataset.startswith("cifar")

    schedule = cfg.schedule()
    epochs = 0 if cfg.epochs == 0 else schedule.total_epochs
    with tn.precision(np.float32):
        params = build_params(cfg)
    opt = optim.OptimizerSpec(cfg.optimizer, schedule).build(params.parameters())
    cycles = None if cfg.plain else cfg.cycles
    metrics = RunMetrics()
    out = Path(cfg.out_dir) if cfg.out_dir else None
    meta = {"model": cfg.model_name, "train_config": cfg.to_dict(),
            "schedule": schedule.to_dict(), "kernels": kernels.get_backend(),
            "train_checksum": train.checksum()}

    def snapshot() -> Checkpoint:
        return Checkpoint(params, cycles, stats, metrics,
                          {n: a.copy() for n, a in opt.state().items()},
                          {**meta, "optimizer": {"kind": cfg.optimizer, **opt.scalars()}})

    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = optim.lr_at(schedule, epoch)
        opt.lr = lr
        rng = np.random.default_rng(_epoch_seed(cfg.seed, epoch))
        shuffle = int(rng.integers(2 ** 63))
        n_seen = correct = 0
        loss_sum = 0.0
        for b, (x, y) in enumerate(datasets.batches(Split(train_x, train.labels,
                                                          train.num_classes),
                                                    cfg.batch_size, shuffle)):
            if augment:
                x = datasets.augment_batch(x, rng)
            try:
                logits = _forward(params, x, cycles)
                loss, _ = tn.softmax_cross_entropy(logits, y)
                tn.zero_grad(opt.params)
                tn.backward(loss)
                for p in opt.params:
                    tn._check_finite(p.grad, f"gradient of {p.name}")
            except tn.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch} batch {b}: {exc}; "
                    f"parameter norms: {json.dumps(param_norms(params))}") from exc
            opt.step()
            n_seen += len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            loss_sum += float(loss.data) * len(y)
        last = epoch == epochs - 1
        test_acc = None
        if last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
            test_acc, _ = predict_split(params, test_x, test.labels, cycles, cfg.eval_batch_size)
        improved = metrics.record(epoch, loss_sum / n_seen, correct / n_seen, test_acc, lr,
                                  time.perf_counter() - t0)
        log.info("%s epoch %d loss %.4f train %.4f test %s", cfg.model_name, epoch,
                 metrics.train_loss[-1], metrics.train_acc[-1], test_acc)
        if out:
            (out / "metrics.csv").write_text(metrics.to_csv(not cfg.deterministic))
            if improved:
                snapshot().save(out / "best.ckpt")
        if progress:
            progress(epoch, metrics)

    ckpt = snapshot()
    if out:
        ckpt.save(out / "final.ckpt")
        (out / "metrics.csv").write_text(metrics.to_csv(not cfg.deterministic))
        if cfg.deterministic:
            (out / "timing.csv").write_text(
                "epoch,seconds\n" + "".join(f"{e},{s:.3f}\n" for e, s in
                                            zip(metrics.epoch, metrics.seconds)))
    return ckpt, metrics


@dataclass
class RepeatResult:
    name: str
    seeds: list[int]
    accuracies: list[float]

    @property
    def errors(self) -> np.ndarray:
        return 100.0 * (1.0 - np.asarray(self.accuracies))

    @property
    def best(self) -> float:
        return float(max(self.accuracies))

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def table_cell(self) -> str:
        """Error rate in percent, ``best(mean±std)``."""
        e = self.errors
        return format_cell(float(e.min()), float(e.mean()), float(e.std()))


def format_cell(best: float, mean: float, std: float) -> str:
    return f"{best:.2f}({mean:.2f}±{std:.2f})"


def derive_seeds(base_seed: int, n: int) -> list[int]:
    if n < 1:
        raise ValueError("need at least one run")
    state = np.random.SeedSequence(base_seed).generate_state(n, dtype=np.uint64)
    return [int(s % (2 ** 31)) for s in state]


def repeat_runs(cfg: TrainConfig, n: int = 5, data=None) -> RepeatResult:
    """Train ``n`` seeds derived from ``cfg.seed``; aggregate best-epoch accuracy."""
    seeds = derive_seeds(cfg.seed, n)
    accs = []
    for i, s in enumerate(seeds):
        out = str(Path(cfg.out_dir) / f"run{i}") if cfg.out_dir else None
        _, metrics = train_run(dataclasses.replace(cfg, seed=s, out_dir=out), data)
        accs.append(metrics.best_test_acc)
    return RepeatResult(cfg.model_name, seeds, accs)
