"""Grid-based dictionary matching, the baseline estimation engine.

A dictionary holds the unit-normalized magnitude signals of every (T1, T2,
IE) grid point, simulated at PD = 1 for one B1 value.  Matching a measured
voxel is an exhaustive normalized-inner-product search; PD follows in closed
form as the least-squares scale against the winning atom's unnormalized
signal.  B1 variation across a volume is handled by clamping the map to the
calibrated transmit range, discretizing it into uniform bins, and building
one sub-dictionary per occupied bin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, FormatError, NumericError, ShapeError
from .signal_model import SequenceTiming, TissueParams, simulate
from .volume_io import B1_MAX, B1_MIN, ParameterMaps, SignalVolume, atomic_write_bytes

__all__ = [
    "GridSpec",
    "B1Bins",
    "Dictionary",
    "MatchResult",
    "expand_grid",
    "expand_segments",
    "generate_dictionary",
    "match_voxel",
    "match_volume",
    "DictionaryCache",
    "read_qdict",
    "write_qdict",
]

QDICT_MAGIC = "QDICT"
QDICT_VERSION = 1

# default grids: fine steps for short relaxation times, coarser for long
DEFAULT_T1_SEGMENTS = ((5.0, 3000.0, 5.0), (3000.0, 5000.0, 100.0))
DEFAULT_T2_SEGMENTS = ((1.0, 350.0, 2.0), (350.0, 1000.0, 20.0), (1000.0, 2500.0, 200.0))
DEFAULT_IE_SEGMENTS = ((0.5, 1.0, 0.02),)


@dataclass(frozen=True)
class GridSpec:
    """Per-axis lists of (start, end, step) segments."""

    t1_segments: tuple = DEFAULT_T1_SEGMENTS
    t2_segments: tuple = DEFAULT_T2_SEGMENTS
    ie_segments: tuple = DEFAULT_IE_SEGMENTS

    def __post_init__(self) -> None:
        for name in ("t1_segments", "t2_segments", "ie_segments"):
            segs = tuple(tuple(float(x) for x in seg) for seg in getattr(self, name))
            object.__setattr__(self, name, segs)
            if not segs:
                raise ConfigError(f"{name} is empty")
            prev_end = -np.inf
            for start, end, step in segs:
                if step <= 0:
                    raise ConfigError(f"{name}: step must be > 0")
                if end < start:
                    raise ConfigError(f"{name}: segment end before start")
                if start < prev_end:
                    raise ConfigError(f"{name}: segments overlap")
                prev_end = end

    def to_dict(self) -> dict:
        return {
            "t1_segments": [list(s) for s in self.t1_segments],
            "t2_segments": [list(s) for s in self.t2_segments],
            "ie_segments": [list(s) for s in self.ie_segments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        known = {"t1_segments", "t2_segments", "ie_segments"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**{k: tuple(tuple(s) for s in v) for k, v in d.items()})


def expand_segments(segments) -> np.ndarray:
    """Expand (start, end, step) segments into sorted unique grid values.

    Each segment yields start, start+step, ... up to end; the end value is
    appended when the step does not land on it exactly.  Values within a
    relative step tolerance of the end are snapped onto it, so segment
    boundaries deduplicate exactly.
    """
    values = []
    for start, end, step in segments:
        n = int(np.floor((end - start) / step + 1e-9))
        vals = start + step * np.arange(n + 1)
        if abs(vals[-1] - end) <= 1e-9 * step:
            vals[-1] = end
        else:
            vals = np.append(vals, end)
        values.append(vals)
    out = np.unique(np.concatenate(values))
    if out.size == 0:
        raise ConfigError("grid expansion produced no values")
    return out


def expand_grid(spec: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(t1_values, t2_values, ie_values) for the three axes."""
    return (
        expand_segments(spec.t1_segments),
        expand_segments(spec.t2_segments),
        expand_segments(spec.ie_segments),
    )


@dataclass(frozen=True)
class B1Bins:
    """Uniform discretization of the clamped B1 range."""

    lo: float = B1_MIN
    hi: float = B1_MAX
    n_bins: int = 100

    def __post_init__(self) -> None:
        if not (self.lo < self.hi and self.n_bins >= 1):
            raise ConfigError("B1 bins require lo < hi and n_bins >= 1")

    @property
    def centers(self) -> np.ndarray:
        width = (self.hi - self.lo) / self.n_bins
        return self.lo + width * (np.arange(self.n_bins) + 0.5)

    def index_of(self, b1) -> np.ndarray:
        """Bin index for clamped B1 values; the upper edge maps to the last bin."""
        clamped = np.clip(np.asarray(b1, dtype=float), self.lo, self.hi)
        width = (self.hi - self.lo) / self.n_bins
        idx = np.floor((clamped - self.lo) / width).astype(int)
        return np.clip(idx, 0, self.n_bins - 1)


@dataclass
class Dictionary:
    """K atoms over the (T1, T2, IE) grid, simulated at one B1 value.

    ``atoms`` rows are unit l2 norm; ``norms`` holds the original signal
    norms so PD can be recovered; ``params`` is the (K, 3) lookup in
    lexicographic (T1, T2, IE) order.
    """

    atoms: np.ndarray
    norms: np.ndarray
    params: np.ndarray
    b1_value: float
    timing_fingerprint: str
    grid: GridSpec

    @property
    def k(self) -> int:
        return self.atoms.shape[0]


def generate_dictionary(timing: SequenceTiming, spec: GridSpec, b1_value: float) -> Dictionary:
    """Simulate every grid tuple at PD = 1 and l2-normalize the signals."""
    t1v, t2v, iev = expand_grid(spec)
    t1g, t2g, ieg = np.meshgrid(t1v, t2v, iev, indexing="ij")
    t1g, t2g, ieg = (g.reshape(-1) for g in (t1g, t2g, ieg))
    signals = simulate(timing, TissueParams(t1g, t2g, 1.0, ieg), float(b1_value)).T
    norms = np.linalg.norm(signals, axis=1)
    bad = ~(norms > 0) | ~np.isfinite(norms)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NumericError(
            f"degenerate dictionary atom at (t1={t1g[i]:g}, t2={t2g[i]:g}, ie={ieg[i]:g})"
        )
    atoms = signals / norms[:, None]
    params = np.column_stack([t1g, t2g, ieg])
    return Dictionary(atoms, norms, params, float(b1_value), timing.fingerprint(), spec)


@dataclass(frozen=True)
class MatchResult:
    t1_ms: float
    t2_ms: float
    ie: float
    pd: float
    score: float
    residual: float
    index: int


_SENTINEL = MatchResult(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1)


def match_voxel(signal: np.ndarray, dictionary: Dictionary) -> MatchResult:
    """Best-atom match of one 5-vector; zero signals return a sentinel.

    Score is the normalized inner product; ties break to the lowest atom
    index.  PD is the least-squares scale of the winning unnormalized atom.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape != (5,):
        raise ShapeError(f"signal must have shape (5,), got {signal.shape}")
    nrm = np.linalg.norm(signal)
    if nrm == 0.0:
        return _SENTINEL
    scores = dictionary.atoms @ (signal / nrm)
    k = int(np.argmax(scores))
    pd = float(signal @ dictionary.atoms[k] / dictionary.norms[k])
    fit = pd * dictionary.norms[k] * dictionary.atoms[k]
    residual = float(np.linalg.norm(signal - fit) / nrm)
    t1, t2, ie = dictionary.params[k]
    return MatchResult(float(t1), float(t2), float(ie), pd, float(scores[k]), residual, k)


class DictionaryCache:
    """In-memory sub-dictionary cache keyed by (timing fingerprint, bin index)."""

    def __init__(self) -> None:
        self._store: dict[tuple[str, int], Dictionary] = {}
        self.hits = 0
        self.misses = 0

    def get(self, timing: SequenceTiming, spec: GridSpec, bin_index: int, b1_value: float) -> Dictionary:
        key = (timing.fingerprint(), int(bin_index))
        if key in self._store:
            self.hits += 1
            return self._store[key]
        self.misses += 1
        d = generate_dictionary(timing, spec, b1_value)
        self._store[key] = d
        return d


def _match_block(signals: np.ndarray, dictionary: Dictionary, atom_chunk: int = 32768):
    """Vectorized full-scan argmax for a block of voxels, chunked over atoms."""
    nrm = np.linalg.norm(signals, axis=1)
    ok = nrm > 0
    unit = np.zeros_like(signals)
    unit[ok] = signals[ok] / nrm[ok, None]
    best = np.full(signals.shape[0], -np.inf)
    best_idx = np.zeros(signals.shape[0], dtype=np.int64)
    for start in range(0, dictionary.k, atom_chunk):
        chunk = dictionary.atoms[start : start + atom_chunk]
        scores = unit @ chunk.T
        arg = np.argmax(scores, axis=1)
        val = scores[np.arange(scores.shape[0]), arg]
        upd = val > best  # strict: earlier chunks keep ties at the lowest index
        best[upd] = val[upd]
        best_idx[upd] = arg[upd] + start
    pd = np.einsum("vc,vc->v", signals, dictionary.atoms[best_idx]) / dictionary.norms[best_idx]
    out = np.empty((signals.shape[0], 4))
    out[:, :3] = dictionary.params[best_idx]
    out[:, 3] = pd
    out[~ok] = 0.0
    return out


def match_volume(
    volume: SignalVolume,
    timing: SequenceTiming,
    spec: GridSpec,
    bins: B1Bins | None = None,
    cache: DictionaryCache | None = None,
    voxel_chunk: int = 2048,
    subdict_provider=None,
    threads: int = 1,
) -> ParameterMaps:
    """Voxel-wise matching of a 6-channel volume against per-bin dictionaries.

    The B1 channel is clamped and binned; each occupied bin gets one
    sub-dictionary simulated at the bin center (cached across calls when a
    cache is supplied, or obtained from ``subdict_provider(timing, spec,
    bin_index, b1_center)`` when given, e.g. a disk-backed store).  Voxels
    are independent, so results do not depend on chunking, traversal order,
    or the worker count.
    """
    if volume.n_channels != 6:
        raise ShapeError("match_volume needs 5 contrast channels plus a B1 channel")
    bins = bins or B1Bins()
    if subdict_provider is None:
        cache = cache or DictionaryCache()
        subdict_provider = cache.get
    nzyx = volume.data.shape[1:]
    signals = volume.contrasts.reshape(5, -1).T
    bin_idx = bins.index_of(volume.b1.reshape(-1))
    centers = bins.centers
    out = np.zeros((signals.shape[0], 4))
    for b in np.unique(bin_idx):
        d = subdict_provider(timing, spec, int(b), float(centers[b]))
        sel = np.flatnonzero(bin_idx == b)
        chunks = [sel[s : s + voxel_chunk] for s in range(0, sel.size, voxel_chunk)]
        if threads > 1 and len(chunks) > 1:
            from concurrent.futures import ThreadPoolExecutor

            def work(rows):
                out[rows] = _match_block(signals[rows], d)

            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(work, chunks))
        else:
            for rows in chunks:
                out[rows] = _match_block(signals[rows], d)
    return ParameterMaps(
        out[:, 0].reshape(nzyx), out[:, 1].reshape(nzyx), out[:, 3].reshape(nzyx), out[:, 2].reshape(nzyx)
    )


# --- persistence ---------------------------------------------------------
#
# A .qdict file is one JSON header line followed by the raw little-endian
# float32 atom matrix (row-major) and the float32 norm vector.

def write_qdict(dictionary: Dictionary, path: str) -> None:
    if not path.endswith(".qdict"):
        raise FormatError(f"dictionary path must end in .qdict: {path}")
    header = {
        "magic": QDICT_MAGIC,
        "version": QDICT_VERSION,
        "k": dictionary.k,
        "b1_value": dictionary.b1_value,
        "timing_fingerprint": dictionary.timing_fingerprint,
        "grid": dictionary.grid.to_dict(),
    }
    payload = (
        json.dumps(header).encode() + b"\n"
        + dictionary.atoms.astype("<f4").tobytes()
        + dictionary.norms.astype("<f4").tobytes()
    )
    atomic_write_bytes(path, payload)


def read_qdict(path: str) -> Dictionary:
    with open(path, "rb") as f:
        line = f.readline()
        blob = f.read()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise FormatError(f"bad qdict header in {path}: {e}") from e
    if header.get("magic") != QDICT_MAGIC or header.get("version") != QDICT_VERSION:
        raise FormatError(f"not a supported qdict file: {path}")
    k = header["k"]
    expected = k * 5 * 4 + k * 4
    if len(blob) != expected:
        raise FormatError(f"qdict payload mismatch in {path}: expected {expected} bytes, found {len(blob)}")
    atoms = np.frombuffer(blob[: k * 5 * 4], dtype="<f4").reshape(k, 5).astype(np.float64)
    norms = np.frombuffer(blob[k * 5 * 4 :], dtype="<f4").astype(np.float64)
    grid = GridSpec.from_dict(header["grid"])
    t1v, t2v, iev = expand_grid(grid)
    if t1v.size * t2v.size * iev.size != k:
        raise FormatError(f"qdict grid/k mismatch in {path}")
    t1g, t2g, ieg = np.meshgrid(t1v, t2v, iev, indexing="ij")
    params = np.column_stack([t1g.reshape(-1), t2g.reshape(-1), ieg.reshape(-1)])
    return Dictionary(atoms, norms, params, header["b1_value"], header["timing_fingerprint"], grid)
