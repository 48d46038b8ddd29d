"""Plain CNN and predictive coding network (PCN) construction and forward passes.

Layer indexing: ``r[0]`` is the input image and ``r[l]`` (``1 <= l <= L``)
the output of conv layer ``l``.  ``ff_weights[k]`` maps ``r[k]`` to
``r[k+1]`` and has shape ``[C_{k+1}, C_k, 3, 3]``; ``fb_weights[k]`` has the
same shape and produces the prediction ``p[k]`` of ``r[k]`` from ``r[k+1]``
through a transposed convolution.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from pcn import tensor as tn
from pcn.tensor import Parameter, Tensor

CHANNELS = {
    "A": (64, 64, 128, 128, 256, 256, 256, 256),
    "B": (32, 32, 64, 64, 128, 128, 128, 128),
    "C": (32, 32, 64, 64, 128, 128),
    "D": (32, 32, 64, 64, 128, 128),
    "E": (16, 16, 32, 32, 64, 64),
}

# (input_channels, input_size, num_classes)
DATASET_SHAPES = {
    "mnist": (1, 28, 10),
    "cifar10": (3, 32, 10),
    "cifar100": (3, 32, 100),
}

RATE_A_INIT = 1.0
RATE_B_INIT = 0.5


@dataclass(frozen=True)
class LayerSpec:
    in_channels: int
    out_channels: int
    pools_after: bool


@dataclass(frozen=True)
class ArchConfig:
    name: str
    layers: tuple[LayerSpec, ...]
    num_classes: int = 10
    input_channels: int = 3
    input_size: int = 32

    @property
    def depth(self) -> int:
        return len(self.layers)

    def spatial_sizes(self) -> list[int]:
        """Side length of r[0..L]."""
        sizes = [self.input_size]
        for spec in self.layers:
            sizes.append(sizes[-1] // 2 if spec.pools_after else sizes[-1])
        return sizes

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "input_channels": self.input_channels,
            "input_size": self.input_size,
            "layers": [[s.in_channels, s.out_channels, s.pools_after] for s in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        layers = tuple(LayerSpec(int(a), int(b), bool(p)) for a, b, p in d["layers"])
        cfg = cls(d["name"], layers, int(d["num_classes"]), int(d["input_channels"]),
                  int(d["input_size"]))
        validate_config(cfg)
        return cfg


def arch_config(name: str, dataset: str = "cifar10") -> ArchConfig:
    """One column of the architecture table, sized for ``dataset``."""
    if name not in CHANNELS:
        raise ValueError(f"unknown architecture {name!r}; expected one of {sorted(CHANNELS)}")
    if dataset not in DATASET_SHAPES:
        raise ValueError(f"unknown dataset {dataset!r}; expected one of {sorted(DATASET_SHAPES)}")
    in_ch, size, classes = DATASET_SHAPES[dataset]
    layers = []
    prev = in_ch
    for i, ch in enumerate(CHANNELS[name]):
        # pool after the first conv of each doubled-width block
        pools = i > 0 and ch == 2 * CHANNELS[name][i - 1]
        layers.append(LayerSpec(prev, ch, pools))
        prev = ch
    cfg = ArchConfig(name, tuple(layers), classes, in_ch, size)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ArchConfig) -> None:
    if not cfg.layers:
        raise ValueError("architecture needs at least one conv layer")
    prev = cfg.input_channels
    size = cfg.input_size
    for i, spec in enumerate(cfg.layers):
        if spec.in_channels != prev:
            raise ValueError(f"layer {i + 1}: in_channels {spec.in_channels} != previous {prev}")
        if spec.pools_after:
            if size % 2:
                raise ValueError(f"layer {i + 1}: cannot pool odd feature map of size {size}")
            size //= 2
        prev = spec.out_channels


# ------------------------------------------------------------------ params


@dataclass
class PlainParams:
    config: ArchConfig
    ff_weights: list[Parameter]
    ff_biases: list[Parameter]
    fc_weight: Parameter
    fc_bias: Parameter

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for k, (w, b) in enumerate(zip(self.ff_weights, self.ff_biases)):
            out += [(f"ff_weight.{k}", w), (f"ff_bias.{k}", b)]
        return out + [("fc_weight", self.fc_weight), ("fc_bias", self.fc_bias)]

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


@dataclass
class PcnParams(PlainParams):
    fb_weights: list[Parameter] = field(default_factory=list)
    rate_a: list[Parameter] = field(default_factory=list)
    # rate_b[k] belongs to r[k+1]; only r[1..L-1] receive feedback updates
    rate_b: list[Parameter] = field(default_factory=list)
    tied: bool = True

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = super().named_parameters()
        if not self.tied:
            out += [(f"fb_weight.{k}", w) for k, w in enumerate(self.fb_weights)]
        out += [(f"rate_a.{k}", a) for k, a in enumerate(self.rate_a)]
        out += [(f"rate_b.{k + 1}", b) for k, b in enumerate(self.rate_b)]
        return out


def _uniform(rng: np.random.Generator, shape, fan_in: int, name: str, decay: bool) -> Parameter:
    k = 1.0 / math.sqrt(fan_in)
    data = rng.uniform(-k, k, size=shape).astype(tn.default_dtype())
    return Parameter(data, decay=decay, name=name)


def _seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    ff_seq, fb_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(ff_seq), np.random.default_rng(fb_seq)


def build_plain(config: ArchConfig, seed: int = 0) -> PlainParams:
    validate_config(config)
    rng, _ = _seed_streams(seed)
    ws, bs = [], []
    for k, spec in enumerate(config.layers):
        fan_in = spec.in_channels * 9
        ws.append(_uniform(rng, (spec.out_channels, spec.in_channels, 3, 3), fan_in,
                           f"ff_weight.{k}", True))
        bs.append(_uniform(rng, (spec.out_channels,), fan_in, f"ff_bias.{k}", False))
    feat = config.layers[-1].out_channels
    fc_w = _uniform(rng, (config.num_classes, feat), feat, "fc_weight", True)
    fc_b = _uniform(rng, (config.num_classes,), feat, "fc_bias", False)
    return PlainParams(config, ws, bs, fc_w, fc_b)


def build_pcn(config: ArchConfig, tied: bool = True, seed: int = 0) -> PcnParams:
    """Feedforward part identical to ``build_plain(config, seed)``."""
    plain = build_plain(config, seed)
    _, fb_rng = _seed_streams(seed)
    dtype = tn.default_dtype()
    if tied:
        fb = list(plain.ff_weights)
    else:
        fb = [_uniform(fb_rng, w.shape, spec.in_channels * 9, f"fb_weight.{k}", True)
              for k, (w, spec) in enumerate(zip(plain.ff_weights, config.layers))]
    rate_a = [Parameter(np.full(s.out_channels, RATE_A_INIT, dtype), decay=False,
                        name=f"rate_a.{k}") for k, s in enumerate(config.layers)]
    rate_b = [Parameter(np.full(s.out_channels, RATE_B_INIT, dtype), decay=False,
                        name=f"rate_b.{k + 1}") for k, s in enumerate(config.layers[:-1])]
    return PcnParams(config, plain.ff_weights, plain.ff_biases, plain.fc_weight,
                     plain.fc_bias, fb, rate_a, rate_b, tied)


def cast_params(params: PlainParams, dtype) -> PlainParams:
    """Deep copy with every parameter converted to ``dtype`` (ties preserved)."""
    memo: dict[int, Parameter] = {}

    def conv(p: Parameter) -> Parameter:
        if id(p) not in memo:
            memo[id(p)] = Parameter(p.data.astype(dtype), decay=p.decay, name=p.name,
                                    dtype=dtype)
        return memo[id(p)]

    base = dict(config=params.config, ff_weights=[conv(w) for w in params.ff_weights],
                ff_biases=[conv(b) for b in params.ff_biases],
                fc_weight=conv(params.fc_weight), fc_bias=conv(params.fc_bias))
    if isinstance(params, PcnParams):
        return PcnParams(**base, fb_weights=[conv(w) for w in params.fb_weights],
                         rate_a=[conv(a) for a in params.rate_a],
                         rate_b=[conv(b) for b in params.rate_b], tied=params.tied)
    return PlainParams(**base)


def count_params(params: PlainParams, include_rates: bool = True) -> int:
    """Distinct scalar parameters; tied kernels count once."""
    seen: set[int] = set()
    total = 0
    for name, p in params.named_parameters():
        if not include_rates and name.startswith("rate_"):
            continue
        if id(p) not in seen:
            seen.add(id(p))
            total += p.data.size
    return total


def model_name(arch: str, T: int | None, tied: bool = False) -> str:
    """``Plain-E`` for ``T is None``, else ``PCN-E-4`` / ``PCN-E-1 (tied)``."""
    if T is None:
        return f"Plain-{arch}"
    return f"PCN-{arch}-{T}" + (" (tied)" if tied else "")


_NAME_RE = re.compile(r"^(?:Plain-(?P<parch>[A-E])|PCN-(?P<arch>[A-E])-(?P<T>\d+)(?P<tied> \(tied\))?)$")


def parse_model_name(name: str) -> tuple[str, int | None, bool]:
    """Inverse of :func:`model_name`: ``(arch, T or None, tied)``."""
    m = _NAME_RE.match(name.strip())
    if not m:
        raise ValueError(f"not a model name: {name!r}")
    if m["parch"]:
        return m["parch"], None, False
    return m["arch"], int(m["T"]), bool(m["tied"])


# ----------------------------------------------------------------- forward


def _as_input(images, params: PlainParams) -> Tensor:
    """Wrap raw arrays in the parameters' precision."""
    config = params.config
    x = images if isinstance(images, Tensor) else Tensor(images, dtype=params.fc_weight.dtype)
    want = (config.input_channels, config.input_size, config.input_size)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ValueError(f"images must have shape (B, {want[0]}, {want[1]}, {want[2]}), "
                         f"got {x.shape}")
    return x


def _ff_layer(params: PlainParams, k: int, x: Tensor) -> Tensor:
    out = tn.relu(tn.conv2d(x, params.ff_weights[k], params.ff_biases[k]))
    return tn.maxpool2x2(out) if params.config.layers[k].pools_after else out


def classify(params: PlainParams, top: Tensor) -> Tensor:
    return tn.linear(tn.global_avg_pool(top), params.fc_weight, params.fc_bias)


def plain_forward(params: PlainParams, images) -> Tensor:
    x = _as_input(images, params)
    for k in range(params.config.depth):
        x = _ff_layer(params, k, x)
    return classify(params, x)


@dataclass
class PcnState:
    """Representations r[0..L], predictions p[0..L-1], errors e[0..L-1]."""

    r: list[Tensor]
    p: list[Tensor | None]
    e: list[Tensor | None]


def initial_state(params: PlainParams, images) -> PcnState:
    """The t=0 feedforward pass (bias included), identical to the plain stack."""
    x = _as_input(images, params)
    r = [x]
    for k in range(params.config.depth):
        r.append(_ff_layer(params, k, r[-1]))
    L = params.config.depth
    return PcnState(r, [None] * L, [None] * L)


def predict(params: PcnParams, l: int, r_l: Tensor) -> Tensor:
    """Top-down prediction p[l-1] of r[l-1] from r[l]."""
    L = params.config.depth
    if not 1 <= l <= L:
        raise ValueError(f"predict: layer index {l} outside 1..{L}")
    x = r_l
    if params.config.layers[l - 1].pools_after:
        x = tn.bilinear_upsample2x(x)
    return tn.conv_transpose2d(x, params.fb_weights[l - 1])


def _effective(rate: Parameter) -> Tensor:
    return tn.relu(rate)


def feedback_sweep(params: PcnParams, state: PcnState, linear: bool = False) -> PcnState:
    """Top-down pass: for l = L..1 predict r[l-1]; update r[l-1] when l > 1.

    Each prediction uses the r[l] already refreshed earlier in this sweep.
    ``linear=True`` disables the ReLU (test hook).
    """
    L = params.config.depth
    r = list(state.r)
    p = list(state.p)
    for l in range(L, 0, -1):
        pred = predict(params, l, r[l])
        if pred.shape != r[l - 1].shape:
            raise RuntimeError(f"prediction of layer {l - 1} has shape {pred.shape}, "
                               f"expected {r[l - 1].shape}")
        p[l - 1] = pred
        if l > 1:
            r[l - 1] = tn.convex_mix_relu(r[l - 1], _effective(params.rate_b[l - 2]), pred,
                                          rectify=not linear)
    return PcnState(r, p, list(state.e))


def error_conv(params: PcnParams, k: int, e: Tensor) -> Tensor:
    """Feedforward convolution of an error map (no bias), pooled when the layer pools."""
    delta = tn.conv2d(e, params.ff_weights[k])
    return tn.maxpool2x2(delta) if params.config.layers[k].pools_after else delta


def feedforward_sweep(params: PcnParams, state: PcnState, linear: bool = False) -> PcnState:
    """Bottom-up pass: e[l] = r[l] - p[l]; r[l+1] += a * FFConv(e[l]), l = 0..L-1."""
    L = params.config.depth
    r = list(state.r)
    e = list(state.e)
    for l in range(L):
        if state.p[l] is None:
            raise RuntimeError("feedforward_sweep needs predictions; run feedback_sweep first")
        e[l] = tn.sub(r[l], state.p[l])
        r[l + 1] = tn.axpy_relu(r[l + 1], _effective(params.rate_a[l]),
                                error_conv(params, l, e[l]), rectify=not linear)
    return PcnState(r, list(state.p), e)


def probe_errors(params: PcnParams, state: PcnState) -> PcnState:
    """Fill p/e from the current representations without touching r."""
    L = params.config.depth
    p = [predict(params, l + 1, state.r[l + 1]) for l in range(L)]
    e = [tn.sub(state.r[l], p[l]) for l in range(L)]
    return PcnState(list(state.r), p, e)


@dataclass
class CycleSnapshot:
    cycle: int
    logits: np.ndarray
    energies: list[float]
    norm_energies: list[float]
    recon_error: np.ndarray  # per-image ||p_0 - r_0||^2


VARIANCE_FLOOR = 1e-8


def error_energy(e: np.ndarray, r: np.ndarray | None = None) -> float:
    """``||e||^2``, divided by the sample variance of ``r`` when given."""
    energy = float(np.sum(np.square(e, dtype=np.float64)))
    if r is None:
        return energy
    var = float(np.var(r, dtype=np.float64, ddof=1)) if r.size > 1 else 0.0
    return energy / max(var, VARIANCE_FLOOR)


def pcn_forward(params: PcnParams, images, T: int, trace: bool = False,
                linear: bool = False):
    """Run the t=0 pass then T cycles of feedback + feedforward sweeps.

    Returns ``logits`` or, with ``trace=True``, ``(logits, snapshots, state)``
    where ``snapshots`` has one :class:`CycleSnapshot` per cycle 0..T.  The
    snapshots are read-only probes and never feed the recursion.
    """
    if T < 0:
        raise ValueError(f"cycle count must be non-negative, got {T}")
    state = initial_state(params, images)
    snaps: list[CycleSnapshot] = []
    if trace:
        snaps.append(_snapshot(params, probe_errors_nograd(params, state), 0))
    for t in range(1, T + 1):
        state = feedback_sweep(params, state, linear)
        state = feedforward_sweep(params, state, linear)
        if trace:
            snaps.append(_snapshot(params, state, t))
    logits = classify(params, state.r[-1])
    if trace:
        return logits, snaps, state
    return logits


def probe_errors_nograd(params: PcnParams, state: PcnState) -> PcnState:
    with tn.no_grad():
        return probe_errors(params, state)


def _snapshot(params: PcnParams, state: PcnState, t: int) -> CycleSnapshot:
    with tn.no_grad():
        logits = classify(params, state.r[-1]).data.copy()
    energies = [error_energy(e.data) for e in state.e]
    norm = [error_energy(e.data, r.data) for e, r in zip(state.e, state.r)]
    diff = (state.r[0].data - state.p[0].data).astype(np.float64)
    recon = np.square(diff).reshape(diff.shape[0], -1).sum(axis=1)
    return CycleSnapshot(t, logits, energies, norm, recon)


def forward(params: PlainParams, images, T: int | None) -> Tensor:
    """Dispatch: plain network when ``T is None`` (or params are plain)."""
    if T is None or not isinstance(params, PcnParams):
        return plain_forward(params, images)
    return pcn_forward(params, images, T)
