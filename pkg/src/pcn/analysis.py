"""Per-cycle dynamics, top-down reconstruction, error energies and FLOP counts."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pcn import datasets, model
from pcn import tensor as tn
from pcn.datasets import Split
from pcn.train import Checkpoint

# ------------------------------------------------------------- cycle traces


@dataclass
class CycleTrace:
    probabilities: np.ndarray  # (T+1, K)
    energies: np.ndarray  # (T+1, L), ||e_l||^2
    norm_energies: np.ndarray  # (T+1, L), divided by var(r_l)
    recon_error: np.ndarray  # (T+1,), ||p_0 - r_0||^2

    @property
    def predictions(self) -> np.ndarray:
        return self.probabilities.argmax(axis=1)

    def __len__(self) -> int:
        return len(self.probabilities)


def _as_batch(image: np.ndarray, cfg: model.ArchConfig) -> np.ndarray:
    x = np.asarray(image, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    want = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ValueError(f"image shape {x.shape} does not fit architecture input {want}")
    return x


def _require_pcn(checkpoint: Checkpoint) -> model.PcnParams:
    if not isinstance(checkpoint.params, model.PcnParams):
        raise ValueError(f"{checkpoint.name} has no feedback path; a PCN checkpoint is needed")
    return checkpoint.params


def cycle_trace(checkpoint: Checkpoint, image: np.ndarray, T: int | None = None) -> CycleTrace:
    """Class probabilities and error energies of one raw image at cycles 0..T."""
    params = _require_pcn(checkpoint)
    T = checkpoint.cycles if T is None else T
    x = datasets.normalize(_as_batch(image, checkpoint.config), checkpoint.norm_stats)
    if len(x) != 1:
        raise ValueError("cycle_trace takes a single image")
    with tn.no_grad():
        _, snaps, _ = model.pcn_forward(params, x, T, trace=True)
    return CycleTrace(
        np.stack([tn.softmax(s.logits.astype(np.float64))[0] for s in snaps]),
        np.array([s.energies for s in snaps]),
        np.array([s.norm_energies for s in snaps]),
        np.array([float(s.recon_error[0]) for s in snaps]),
    )


@dataclass
class SplitDynamics:
    """Aggregates over a split, one entry per cycle 0..T."""

    accuracy: np.ndarray
    recon_error: np.ndarray  # mean over images of ||p_0 - r_0||^2
    energies: np.ndarray  # (T+1, L), mean per image


def split_dynamics(checkpoint: Checkpoint, split: Split, T: int | None = None,
                   batch_size: int = 500) -> SplitDynamics:
    """Probe accuracy and reconstruction error after every cycle over a raw split."""
    params = _require_pcn(checkpoint)
    T = checkpoint.cycles if T is None else T
    n = len(split)
    if n == 0:
        raise ValueError("empty split")
    correct = np.zeros(T + 1)
    recon = np.zeros(T + 1)
    energies = np.zeros((T + 1, checkpoint.config.depth))
    for s in range(0, n, batch_size):
        x = datasets.normalize(split.images[s:s + batch_size], checkpoint.norm_stats)
        y = split.labels[s:s + batch_size]
        with tn.no_grad():
            _, snaps, _ = model.pcn_forward(params, x, T, trace=True)
        for snap in snaps:
            correct[snap.cycle] += int((snap.logits.argmax(axis=1) == y).sum())
            recon[snap.cycle] += float(snap.recon_error.sum())
            energies[snap.cycle] += snap.energies
    return SplitDynamics(correct / n, recon / n, energies / n)


def layer_energy(state: model.PcnState, l: int, normalized: bool = False) -> float:
    """``||e_l||^2``, optionally divided by the sample variance of ``r_l``."""
    if not 0 <= l < len(state.e) or state.e[l] is None:
        raise ValueError(f"no prediction error stored for layer {l}")
    e = state.e[l].data
    return model.error_energy(e, state.r[l].data if normalized else None)


def write_trace_csv(trace: CycleTrace, energy_path, prob_path, normalized: bool = False) -> None:
    table = trace.norm_energies if normalized else trace.energies
    with open(energy_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle", "layer", "energy"])
        for t, row in enumerate(table):
            for l, v in enumerate(row):
                w.writerow([t, l, repr(float(v))])
    with open(prob_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle", "class", "probability"])
        for t, row in enumerate(trace.probabilities):
            for k, v in enumerate(row):
                w.writerow([t, k, repr(float(v))])


# ----------------------------------------------------------- reconstruction


def to_bytes_image(pixels: np.ndarray) -> np.ndarray:
    """CxHxW floats in [0,1] (clamped) -> HxWxC uint8."""
    x = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    return np.rint(x * 255).astype(np.uint8).transpose(1, 2, 0)


def write_pnm(path, pixels: np.ndarray) -> Path:
    """Write a CxHxW [0,1] image as binary PGM (C=1) or PPM (C=3), maxval 255."""
    if pixels.ndim != 3 or pixels.shape[0] not in (1, 3):
        raise ValueError(f"expected a 1- or 3-channel CxHxW image, got {pixels.shape}")
    c, h, w = pixels.shape
    magic = b"P5" if c == 1 else b"P6"
    path = Path(path)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + to_bytes_image(pixels).tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Parse and validate a binary PGM/PPM file; returns HxWxC uint8."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported magic {magic!r}")
    if maxval != 255 or w < 1 or h < 1:
        raise ValueError(f"{path}: bad header {w}x{h} maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    body = raw[pos + 1:]
    if len(body) != w * h * c:
        raise ValueError(f"{path}: payload has {len(body)} bytes, expected {w * h * c}")
    return np.frombuffer(body, np.uint8).reshape(h, w, c)


@dataclass
class Reconstruction:
    input_path: Path
    recon_path: Path
    prediction: np.ndarray  # CxHxW in [0,1]
    squared_error: float  # ||p_0 - r_0||^2 in normalized units


def reconstruct(checkpoint: Checkpoint, image: np.ndarray, T: int | None, out_stem) -> Reconstruction:
    """Write the input and the top-down prediction p_0 after T cycles side by side.

    Files are ``<out_stem>_input.pgm|ppm`` and ``<out_stem>_recon.pgm|ppm``.
    """
    params = _require_pcn(checkpoint)
    T = checkpoint.cycles if T is None else T
    if T < 1:
        raise ValueError("reconstruction needs at least one cycle")
    raw = _as_batch(image, checkpoint.config)
    if len(raw) != 1:
        raise ValueError("reconstruct takes a single image")
    x = datasets.normalize(raw, checkpoint.norm_stats)
    with tn.no_grad():
        _, snaps, state = model.pcn_forward(params, x, T, trace=True)
    pred = datasets.denormalize(state.p[0].data, checkpoint.norm_stats)[0]
    pred = np.clip(pred, 0.0, 1.0)
    ext = ".pgm" if pred.shape[0] == 1 else ".ppm"
    stem = Path(out_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    inp = write_pnm(stem.with_name(stem.name + "_input" + ext), raw[0])
    rec = write_pnm(stem.with_name(stem.name + "_recon" + ext), pred)
    return Reconstruction(inp, rec, pred, float(snaps[-1].recon_error[0]))


# ------------------------------------------------------------------- FLOPs


@dataclass
class LayerFlops:
    stage: str  # "feedforward", "feedback", "error"
    layer: int
    mul: int = 0
    add: int = 0

    @property
    def flops(self) -> int:
        return self.mul + self.add


@dataclass
class FlopReport:
    arch: str
    tied: bool
    T: int
    input_size: int
    feedforward: list[LayerFlops] = field(default_factory=list)
    feedback: list[LayerFlops] = field(default_factory=list)
    error: list[LayerFlops] = field(default_factory=list)
    classifier: LayerFlops = field(default_factory=lambda: LayerFlops("classifier", 0))
    plain_mult_adds: int = 0  # multiply-accumulates of the plain conv and FC layers

    @staticmethod
    def _sum(rows) -> tuple[int, int]:
        return sum(r.mul for r in rows), sum(r.add for r in rows)

    @property
    def plain_flops(self) -> int:
        m, a = self._sum(self.feedforward + [self.classifier])
        return m + a

    @property
    def cycle_flops(self) -> int:
        m, a = self._sum(self.feedback + self.error)
        return m + a

    @property
    def total_flops(self) -> int:
        return self.plain_flops + self.T * self.cycle_flops

    @property
    def ratio(self) -> float:
        return self.total_flops / self.plain_flops

    def table(self) -> str:
        name = model.model_name(self.arch, self.T, self.tied)
        lines = [f"{'stage':<12}{'layer':>6}{'mul':>16}{'add':>16}"]
        for row in self.feedforward + self.feedback + self.error + [self.classifier]:
            lines.append(f"{row.stage:<12}{row.layer:>6}{row.mul:>16,}{row.add:>16,}")
        lines += [
            f"Plain-{self.arch} multiply-adds: {self.plain_mult_adds / 1e9:.4f}G",
            f"Plain-{self.arch} FLOPs (mul+add): {self.plain_flops / 1e9:.4f}G",
            f"{name} FLOPs: {self.total_flops / 1e9:.4f}G",
            f"ratio {name} / Plain-{self.arch}: {self.ratio:.3f}",
        ]
        return "\n".join(lines)


def _conv_counts(c_in: int, c_out: int, size: int, bias: bool) -> tuple[int, int]:
    """3x3 'same' conv over a size x size map, every tap counted."""
    taps = c_in * 9
    outputs = c_out * size * size
    return taps * outputs, (taps if bias else taps - 1) * outputs


def count_flops(arch: str, tied: bool = False, T: int = 0, input_size: int = 32,
                input_channels: int = 3, num_classes: int = 10) -> FlopReport:
    """Multiplies and adds for the plain pass plus T feedback/error cycles.

    ReLU and max-pooling comparisons count as one add each; the bilinear
    upsampling is separable (two taps per axis).  Tied and untied models
    do the same arithmetic.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    if arch not in model.CHANNELS:
        raise ValueError(f"unknown architecture {arch!r}")
    chans = [input_channels] + list(model.CHANNELS[arch])
    base = model.arch_config(arch)
    cfg = model.ArchConfig(arch, tuple(model.LayerSpec(a, b, s.pools_after) for a, b, s in
                                       zip(chans[:-1], chans[1:], base.layers)),
                           num_classes, input_channels, input_size)
    model.validate_config(cfg)
    sizes = cfg.spatial_sizes()
    rep = FlopReport(arch, tied, T, input_size)
    macs = 0
    for k, spec in enumerate(cfg.layers):
        s = sizes[k]
        n_conv = spec.out_channels * s * s
        n_out = spec.out_channels * sizes[k + 1] ** 2
        pool = 3 * n_out if spec.pools_after else 0

        mul, add = _conv_counts(spec.in_channels, spec.out_channels, s, bias=True)
        macs += mul
        rep.feedforward.append(LayerFlops("feedforward", k + 1, mul, add + n_conv + pool))

        # prediction of r[k] from r[k+1]: (upsample), transposed conv, maybe convex update
        mul, add = _conv_counts(spec.out_channels, spec.in_channels, s, bias=False)
        if spec.pools_after:
            h = sizes[k + 1]
            up1 = spec.out_channels * s * h  # rows first
            up2 = spec.out_channels * s * s
            mul += 2 * (up1 + up2)
            add += up1 + up2
        n_in = spec.in_channels * s * s
        if k > 0:
            mul += 2 * n_in  # (1-b) r + b p
            add += n_in + n_in  # sum and ReLU
        rep.feedback.append(LayerFlops("feedback", k + 1, mul, add))

        # e[k] = r[k] - p[k]; r[k+1] = relu(r[k+1] + a * pool(conv(e[k])))
        mul, add = _conv_counts(spec.in_channels, spec.out_channels, s, bias=False)
        add += n_in + pool + 2 * n_out
        mul += n_out
        rep.error.append(LayerFlops("error", k + 1, mul, add))

    top = cfg.layers[-1].out_channels * sizes[-1] ** 2
    c = cfg.layers[-1].out_channels
    fc = c * num_classes
    macs += fc
    rep.classifier = LayerFlops("classifier", 0, c + fc, top + fc)
    rep.plain_mult_adds = macs
    return rep
