"""Self-supervised per-voxel fitting engine.

A small network maps the six input channels (five contrasts plus B1) of
every voxel to four physical parameters; its only supervision is the
consistency loss between the acquired signals and the signals re-synthesized
from its own outputs through the forward model.  Because the loss is defined
per voxel, the same weights apply at any matrix size, which is what makes
pre-training on one scan and inferring (or briefly fine-tuning) on another
work.

Architecture: ``n_blocks`` channel-mixing layers (1x1 by default, optionally
3x3 spatial), each intermediate one followed by instance normalization and a
leaky ReLU; the head squashes each output map through a sigmoid scaled to
its configured physical range, so outputs are range-safe by construction.
Instance statistics are taken over all voxels passed in one forward call.

Training follows Adam over slice batches with a held-out validation set
(every 8th slice); both the final and the best-validation weights are
returned.  An optional anisotropic total-variation penalty on the
range-normalized output maps trades detail for noise robustness.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward, conv3x3_forward, instance_norm_forward, sigmoid_forward
from .errors import ConfigError, DomainError, FormatError, NumericError, ShapeError
from .optim import Adam
from .signal_model import IE_MAX, IE_MIN, SequenceTiming, TissueParams, simulate
from .volume_io import B1_MAX, B1_MIN, ParameterMaps, SignalVolume, atomic_write_bytes

__all__ = [
    "NetworkConfig",
    "NetworkWeights",
    "TrainConfig",
    "TrainHistory",
    "DEFAULT_OUTPUT_RANGES",
    "init_weights",
    "forward_maps",
    "normalize_input",
    "physics_loss",
    "total_variation",
    "map_total_variation",
    "train",
    "infer",
    "save_checkpoint",
    "load_checkpoint",
]

QNET_MAGIC = "QNET"
QNET_VERSION = 1

# keep the heads strictly inside their ranges even when the sigmoid
# saturates to exactly 0 or 1 in float64
_SIGMOID_CLIP = 1e-12

MAP_ORDER = ("t1", "t2", "pd", "ie")
# The PD head works in p99-normalized signal units, where a typical voxel
# needs pd ~= 1/|S(pd=1)| (tens, since the low-flip readout gain is a few
# percent); the range leaves ~2x headroom above the weakest-signal tissues.
DEFAULT_OUTPUT_RANGES = {
    "t1": (0.0, 5000.0),
    "t2": (0.0, 2500.0),
    "pd": (0.0, 100.0),
    "ie": (IE_MIN, IE_MAX),
}


@dataclass(frozen=True)
class NetworkConfig:
    n_blocks: int = 5
    features: int = 64
    kernel: str = "1x1"
    leaky_slope: float = 0.01
    in_channels: int = 6
    out_channels: int = 4
    output_ranges: tuple = tuple(DEFAULT_OUTPUT_RANGES[m] for m in MAP_ORDER)
    instance_norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.n_blocks < 2:
            raise ConfigError("need at least an input block and a head")
        if self.features < 1 or self.in_channels < 1:
            raise ConfigError("features and in_channels must be >= 1")
        if self.kernel not in ("1x1", "3x3"):
            raise ConfigError(f"kernel must be 1x1 or 3x3, got {self.kernel!r}")
        if self.out_channels != 4:
            raise ConfigError("out_channels is fixed at 4 (t1, t2, pd, ie)")
        ranges = tuple((float(lo), float(hi)) for lo, hi in self.output_ranges)
        object.__setattr__(self, "output_ranges", ranges)
        if len(ranges) != 4:
            raise ConfigError("output_ranges must give (lo, hi) for t1, t2, pd, ie")
        for lo, hi in ranges:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ConfigError(f"invalid output range ({lo}, {hi})")
        ie_lo, ie_hi = ranges[3]
        if ie_lo < IE_MIN or ie_hi > IE_MAX:
            raise ConfigError(f"ie range must lie within [{IE_MIN}, {IE_MAX}]")

    def layer_shapes(self) -> list[tuple]:
        chans = [self.in_channels] + [self.features] * (self.n_blocks - 1) + [self.out_channels]
        if self.kernel == "1x1":
            return [(chans[i + 1], chans[i]) for i in range(self.n_blocks)]
        return [(chans[i + 1], chans[i], 3, 3) for i in range(self.n_blocks)]

    def to_dict(self) -> dict:
        return {
            "n_blocks": self.n_blocks,
            "features": self.features,
            "kernel": self.kernel,
            "leaky_slope": self.leaky_slope,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "output_ranges": {m: list(r) for m, r in zip(MAP_ORDER, self.output_ranges)},
            "instance_norm_eps": self.instance_norm_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "output_ranges" in d:
            rr = d["output_ranges"]
            if isinstance(rr, dict):
                missing = set(MAP_ORDER) - set(rr)
                if missing:
                    raise ConfigError(f"output_ranges missing maps: {sorted(missing)}")
                d["output_ranges"] = tuple(tuple(rr[m]) for m in MAP_ORDER)
            else:
                d["output_ranges"] = tuple(tuple(r) for r in rr)
        known = {f_.name for f_ in NetworkConfig.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class NetworkWeights:
    config: NetworkConfig
    seed: int
    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.config, self.seed, [(w.copy(), b.copy()) for w, b in self.layers])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 500
    batch_slices: int = 4
    val_every: int = 10
    tv_weight: float = 0.0
    foreground_mask: bool = False
    foreground_threshold: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.epochs < 0 or self.batch_slices < 1 or self.val_every < 1:
            raise ConfigError("invalid training configuration")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.tv_weight < 0:
            raise ConfigError("tv_weight must be >= 0")

    def to_dict(self) -> dict:
        return {f_.name: getattr(self, f_.name) for f_ in TrainConfig.__dataclass_fields__.values()}  # type: ignore[attr-defined]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f_.name for f_ in TrainConfig.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def init_weights(config: NetworkConfig, seed: int) -> NetworkWeights:
    """Uniform weights in +-1/sqrt(fan_in), zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    layers = []
    for shape in config.layer_shapes():
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, shape)
        layers.append((w, np.zeros(shape[0])))
    return NetworkWeights(config, seed, layers)


def _forward_arrays(weights: NetworkWeights, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass; x is (C_in, S, H, W); returns (4, S, H, W)."""
    cfg = weights.config
    spatial = x.shape[1:]
    h = x.reshape(cfg.in_channels, -1) if cfg.kernel == "1x1" else x
    for i, (w, b) in enumerate(weights.layers):
        if cfg.kernel == "1x1":
            h = w @ h + b[:, None]
        else:
            h, _ = conv3x3_forward(w, b, h)
        if i < len(weights.layers) - 1:
            h, _, _ = instance_norm_forward(h, cfg.instance_norm_eps)
            h = np.where(h > 0, h, cfg.leaky_slope * h)
    s = np.clip(sigmoid_forward(h), _SIGMOID_CLIP, 1.0 - _SIGMOID_CLIP)
    out = np.empty((4,) + spatial)
    flat = s.reshape(4, -1)
    for i, (lo, hi) in enumerate(cfg.output_ranges):
        out[i] = (flat[i] * (hi - lo) + lo).reshape(spatial)
    return out


def forward_maps(weights: NetworkWeights, volume: SignalVolume) -> ParameterMaps:
    """Network forward pass over a normalized volume (one instance)."""
    if volume.n_channels != weights.config.in_channels:
        raise ShapeError(
            f"volume has {volume.n_channels} channels, network expects {weights.config.in_channels}"
        )
    stack = _forward_arrays(weights, volume.data)
    return ParameterMaps(stack[0], stack[1], stack[2], stack[3])


def normalize_input(volume: SignalVolume) -> tuple[SignalVolume, float]:
    """Scale the five contrasts by their pooled 99th-percentile magnitude and
    clamp the B1 channel to the calibrated transmit range."""
    if volume.n_channels != 6:
        raise ShapeError("normalize_input needs 5 contrast channels plus B1")
    mags = np.abs(volume.contrasts)
    peak = float(mags.max())
    if peak == 0.0:
        raise NumericError("degenerate input: volume is all zero")
    scale = float(np.percentile(mags, 99.0))
    if scale <= 0.0:
        scale = peak  # nearly empty volume; fall back to the max
    data = volume.data.copy()
    data[:5] /= scale
    data[5] = np.clip(data[5], B1_MIN, B1_MAX)
    return SignalVolume(data, volume.channel_names, volume.voxel_size_mm), scale


def total_variation(map3d: np.ndarray) -> float:
    """Mean absolute in-plane forward difference of one (nz, ny, nx) map."""
    dy = np.abs(np.diff(map3d, axis=1)).sum()
    dx = np.abs(np.diff(map3d, axis=2)).sum()
    count = map3d.shape[0] * (map3d.shape[1] - 1) * map3d.shape[2] + map3d.shape[0] * map3d.shape[1] * (
        map3d.shape[2] - 1
    )
    if count == 0:
        raise ShapeError("map has no in-plane differences")
    return float((dy + dx) / count)


def map_total_variation(maps: ParameterMaps, output_ranges=None) -> float:
    """Sum of range-normalized map TVs; the quantity the TV penalty controls."""
    ranges = output_ranges or tuple(DEFAULT_OUTPUT_RANGES[m] for m in MAP_ORDER)
    total = 0.0
    for arr, (lo, hi) in zip((maps.t1_ms, maps.t2_ms, maps.pd, maps.ie), ranges):
        total += total_variation(arr) / (hi - lo)
    return total


def physics_loss(
    maps: ParameterMaps,
    volume: SignalVolume,
    timing: SequenceTiming,
    tv_weight: float = 0.0,
    output_ranges=None,
    mask: np.ndarray | None = None,
) -> float:
    """Mean squared consistency error between acquired and re-synthesized
    signals, optionally plus a total-variation penalty on the maps."""
    if maps.shape != volume.data.shape[1:]:
        raise ShapeError(f"maps {maps.shape} do not match volume {volume.data.shape[1:]}")
    tissue = TissueParams(
        maps.t1_ms.reshape(-1), maps.t2_ms.reshape(-1), maps.pd.reshape(-1), maps.ie.reshape(-1)
    )
    synth = simulate(timing, tissue, volume.b1.reshape(-1))
    resid2 = (volume.contrasts.reshape(5, -1) - synth) ** 2
    if mask is not None:
        m = mask.reshape(-1)
        if not m.any():
            raise NumericError("foreground mask excluded every voxel")
        loss = float(resid2[:, m].mean())
    else:
        loss = float(resid2.mean())
    if tv_weight > 0.0:
        loss += tv_weight * map_total_variation(maps, output_ranges)
    return loss


# --- taped training step ------------------------------------------------------

def _build_loss(
    weights: NetworkWeights,
    data: np.ndarray,
    timing: SequenceTiming,
    tv_weight: float,
    mask: np.ndarray | None,
):
    """Tape the full network + physics graph for one (6, S, H, W) batch.

    Returns (tape, loss node, parameter nodes in optimizer order).
    """
    cfg = weights.config
    spatial = data.shape[1:]
    n_vox = int(np.prod(spatial))
    tape = Tape()
    params: list = []
    h = tape.constant(
        data.reshape(cfg.in_channels, -1) if cfg.kernel == "1x1" else data, name="input"
    )
    for i, (w, b) in enumerate(weights.layers):
        wn = tape.leaf(w, trainable=True, name=f"w{i}")
        bn = tape.leaf(b, trainable=True, name=f"b{i}")
        params.extend((wn, bn))
        h = tape.matmul_channels(wn, bn, h) if cfg.kernel == "1x1" else tape.conv3x3(wn, bn, h)
        if i < len(weights.layers) - 1:
            h = tape.instance_norm(h, cfg.instance_norm_eps)
            h = tape.leaky_relu(h, cfg.leaky_slope)
    s = tape.clip(tape.sigmoid(h), _SIGMOID_CLIP, 1.0 - _SIGMOID_CLIP)
    if cfg.kernel == "3x3":
        s = tape.reshape(s, (4, n_vox))
    map_rows = []
    for i, (lo, hi) in enumerate(cfg.output_ranges):
        row = tape.take_row(s, i)
        map_rows.append(tape.add(tape.mul(row, tape.constant(hi - lo)), tape.constant(lo)))
    b1 = data[5].reshape(-1)
    synth = tape.signal_model(map_rows[0], map_rows[1], map_rows[2], map_rows[3], b1, timing)
    y = tape.constant(data[:5].reshape(5, -1), name="acquired")
    resid2 = tape.square(tape.sub(synth, y))
    if mask is not None:
        mflat = mask.reshape(-1)
        n_in = int(mflat.sum())
        if n_in == 0:
            raise NumericError("foreground mask excluded every voxel")
        weights_const = tape.constant(np.broadcast_to(mflat, (5, n_vox)) / (5.0 * n_in))
        loss = tape.sum(tape.mul(resid2, weights_const))
    else:
        loss = tape.mean(resid2)
    if tv_weight > 0.0:
        for row, (lo, hi) in zip(map_rows, cfg.output_ranges):
            tv = tape.tv_aniso(tape.reshape(row, spatial))
            loss = tape.add(loss, tape.mul(tv, tape.constant(tv_weight / (hi - lo))))
    return tape, loss, params


@dataclass
class TrainHistory:
    """Per-epoch record plus the artifacts a training run produces."""

    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float | None] = field(default_factory=list)
    best_weights: NetworkWeights | None = None
    best_val_loss: float = np.inf
    initial_loss: float = np.nan
    final_loss: float = np.nan
    norm_scale: float = np.nan

    def to_csv(self, path: str) -> None:
        lines = ["epoch,train_loss,val_loss"]
        for e, tr, va in zip(self.epochs, self.train_loss, self.val_loss):
            lines.append(f"{e},{tr!r},{'' if va is None else repr(va)}")
        atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def _validation_split(nz: int) -> tuple[list[int], list[int]]:
    """Every 8th slice is validation; degenerate volumes use all slices for both."""
    val = [z for z in range(nz) if z % 8 == 0]
    tr = [z for z in range(nz) if z % 8 != 0]
    if not tr:
        return list(range(nz)), list(range(nz))
    return tr, val


def _foreground(volume: SignalVolume, cfg: TrainConfig) -> np.ndarray | None:
    if not cfg.foreground_mask:
        return None
    mags = np.abs(volume.contrasts).max(axis=0)
    return mags > cfg.foreground_threshold * float(mags.max())


def _full_volume_loss(weights: NetworkWeights, volume: SignalVolume, norm: SignalVolume,
                      scale: float, timing: SequenceTiming) -> float:
    """Acquired-unit loss of inference-style maps; identical computation to
    evaluating physics_loss on infer() output."""
    maps = forward_maps(weights, norm)
    maps = ParameterMaps(maps.t1_ms, maps.t2_ms, maps.pd * scale, maps.ie)
    return physics_loss(maps, volume, timing)


def train(
    volume: SignalVolume,
    timing: SequenceTiming,
    net_config: NetworkConfig | None = None,
    train_config: TrainConfig | None = None,
    initial_weights: NetworkWeights | None = None,
) -> tuple[NetworkWeights, TrainHistory]:
    """Scan-specific training (or fine-tuning, when initial weights are given).

    Adam over shuffled slice batches; training loss is recorded every epoch,
    validation every ``val_every`` epochs on the held-out slices.  The
    returned history carries the best-validation weights next to the final
    ones, plus whole-volume losses in acquired units before and after.
    """
    net_config = net_config or NetworkConfig()
    train_config = train_config or TrainConfig()
    if volume.n_channels != net_config.in_channels:
        raise ShapeError("volume channel count does not match the network input")
    if initial_weights is not None:
        if initial_weights.fingerprint != net_config.fingerprint():
            raise FormatError("initial weights were built for a different network config")
        weights = initial_weights.copy()
    else:
        weights = init_weights(net_config, train_config.seed)

    norm, scale = normalize_input(volume)
    nz = volume.data.shape[1]
    train_z, val_z = _validation_split(nz)
    val_norm = norm.subvolume_z(val_z)
    fg = _foreground(norm, train_config)

    history = TrainHistory(norm_scale=scale)
    try:
        history.initial_loss = _full_volume_loss(weights, volume, norm, scale, timing)
    except (DomainError, NumericError) as e:
        raise NumericError(f"training aborted at initialization: {e}") from e
    history.best_weights = weights.copy()

    opt = Adam(
        weights.arrays(),
        lr=train_config.lr,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.adam_eps,
    )
    shuffle_rng = np.random.default_rng(train_config.seed)
    validated = False

    for epoch in range(1, train_config.epochs + 1):
        order = shuffle_rng.permutation(train_z)
        batch_losses = []
        for bi, start in enumerate(range(0, len(order), train_config.batch_slices)):
            batch_z = np.sort(order[start : start + train_config.batch_slices])
            data = norm.data[:, batch_z]
            mask = fg[batch_z] if fg is not None else None
            try:
                tape, loss, params = _build_loss(weights, data, timing, train_config.tv_weight, mask)
                value = float(loss.value)
                if not np.isfinite(value):
                    raise NumericError("non-finite loss")
            except (DomainError, NumericError) as e:
                raise NumericError(f"training aborted at epoch {epoch}, batch {bi}: {e}") from e
            backward(tape, loss)
            opt.step([p.grad for p in params])
            batch_losses.append(value)
        history.epochs.append(epoch)
        history.train_loss.append(float(np.mean(batch_losses)))
        if epoch % train_config.val_every == 0:
            val_maps = forward_maps(weights, val_norm)
            val = physics_loss(
                val_maps, val_norm, timing, train_config.tv_weight, net_config.output_ranges,
                mask=fg[val_z] if fg is not None else None,
            )
            history.val_loss.append(val)
            validated = True
            if val < history.best_val_loss:
                history.best_val_loss = val
                history.best_weights = weights.copy()
        else:
            history.val_loss.append(None)

    if not validated:
        # no validation pass ever ran; the final state is the only candidate
        history.best_weights = weights.copy()
    history.final_loss = _full_volume_loss(weights, volume, norm, scale, timing)
    return weights, history


def infer(
    weights: NetworkWeights, volume: SignalVolume, net_config: NetworkConfig | None = None
) -> tuple[ParameterMaps, float]:
    """Map inference over a whole volume; PD is reported in acquired units.

    Returns (maps, elapsed seconds).  When an expected network config is
    supplied its fingerprint must match the checkpoint's.
    """
    t0 = time.perf_counter()
    if net_config is not None and net_config.fingerprint() != weights.fingerprint:
        raise FormatError(
            f"checkpoint fingerprint {weights.fingerprint} does not match expected "
            f"{net_config.fingerprint()}"
        )
    if volume.n_channels != weights.config.in_channels:
        raise ShapeError("volume channel count does not match the network input")
    norm, scale = normalize_input(volume)
    maps = forward_maps(weights, norm)
    maps = ParameterMaps(maps.t1_ms, maps.t2_ms, maps.pd * scale, maps.ie)
    return maps, time.perf_counter() - t0


# --- checkpoints ----------------------------------------------------------
#
# A .qnet file is one JSON header line followed by every layer's weight and
# bias as raw little-endian float64, in layer order.

def save_checkpoint(weights: NetworkWeights, path: str) -> None:
    if not path.endswith(".qnet"):
        raise FormatError(f"checkpoint path must end in .qnet: {path}")
    header = {
        "magic": QNET_MAGIC,
        "version": QNET_VERSION,
        "config": weights.config.to_dict(),
        "seed": weights.seed,
        "fingerprint": weights.fingerprint,
        "shapes": [[list(w.shape), list(b.shape)] for w, b in weights.layers],
    }
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for w, b in weights.layers for a in (w, b)
    )
    atomic_write_bytes(path, json.dumps(header).encode() + b"\n" + blob)


def load_checkpoint(path: str) -> NetworkWeights:
    try:
        with open(path, "rb") as f:
            line = f.readline()
            blob = f.read()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise FormatError(f"bad checkpoint header in {path}: {e}") from e
    if header.get("magic") != QNET_MAGIC or header.get("version") != QNET_VERSION:
        raise FormatError(f"not a supported checkpoint file: {path}")
    config = NetworkConfig.from_dict(header["config"])
    if header.get("fingerprint") != config.fingerprint():
        raise FormatError(f"checkpoint fingerprint mismatch in {path}")
    expected_shapes = [tuple(s) for s in config.layer_shapes()]
    stored = [tuple(tuple(x) for x in pair) for pair in header["shapes"]]
    if [s[0] for s in stored] != expected_shapes:
        raise FormatError(f"checkpoint layer shapes do not match its config in {path}")
    total = sum(int(np.prod(w)) + int(np.prod(b)) for w, b in stored)
    if len(blob) != total * 8:
        raise FormatError(
            f"checkpoint payload mismatch in {path}: expected {total * 8} bytes, found {len(blob)}"
        )
    layers = []
    offset = 0
    flat = np.frombuffer(blob, dtype="<f8")
    for w_shape, b_shape in stored:
        nw = int(np.prod(w_shape))
        nb = int(np.prod(b_shape))
        w = flat[offset : offset + nw].reshape(w_shape).copy()
        offset += nw
        b = flat[offset : offset + nb].reshape(b_shape).copy()
        offset += nb
        layers.append((w, b))
    return NetworkWeights(config, header["seed"], layers)
