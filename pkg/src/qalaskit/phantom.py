"""Synthetic ground-truth scenes and their simulated acquisitions.

Two scene families stand in for hardware phantoms and in-vivo data: a
sphere-plate layout whose T1/T2 ladders span the physiological ranges used
for accuracy validation, and a brain-like slice with white-matter-like,
gray-matter-like, and long-relaxation fluid classes for fluid-exclusion
logic.  All tissue values live in the emitted scene description, never in
result claims.

Rendering is deterministic; acquisition runs the forward model per voxel and
optionally adds seeded Gaussian or Rician noise.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .signal_model import SequenceTiming, TissueParams, simulate
from .volume_io import CONTRAST_CHANNELS, ParameterMaps, SignalVolume

__all__ = [
    "Region",
    "B1Field",
    "SceneSpec",
    "NoiseSpec",
    "render_scene",
    "acquire",
    "nist_like_preset",
    "brain_like_preset",
]


@dataclass(frozen=True)
class Region:
    """One labelled shape: a 3-D ``sphere`` (scalar radius) or an in-plane
    ``ellipse`` spanning every slice (radii (rx, ry))."""

    shape: str
    center: tuple[float, ...]
    radius: float | tuple[float, float]
    tissue: TissueParams

    def __post_init__(self) -> None:
        if self.shape not in ("sphere", "ellipse"):
            raise ConfigError(f"unknown region shape {self.shape!r}")
        if self.shape == "sphere":
            if len(self.center) != 3 or not np.isscalar(self.radius):
                raise ConfigError("sphere needs center (x, y, z) and a scalar radius")
            if self.radius <= 0:
                raise ConfigError("sphere radius must be > 0")
        else:
            if len(self.center) != 2 or np.isscalar(self.radius) or len(self.radius) != 2:
                raise ConfigError("ellipse needs center (x, y) and radii (rx, ry)")
            if min(self.radius) <= 0:
                raise ConfigError("ellipse radii must be > 0")


@dataclass(frozen=True)
class B1Field:
    """Uniform value or a linear left-to-right gradient along x."""

    kind: str = "uniform"
    value: float = 1.0
    lo: float = 0.9
    hi: float = 1.1

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "linear_gradient"):
            raise ConfigError(f"unknown b1 field kind {self.kind!r}")

    def render(self, dims: tuple[int, int, int]) -> np.ndarray:
        nx, ny, nz = dims
        if self.kind == "uniform":
            return np.full((nz, ny, nx), float(self.value))
        ramp = np.full(nx, 0.5 * (self.lo + self.hi)) if nx == 1 else (
            self.lo + (self.hi - self.lo) * np.arange(nx) / (nx - 1)
        )
        return np.broadcast_to(ramp, (nz, ny, nx)).copy()


@dataclass
class SceneSpec:
    dims: tuple[int, int, int]  # (nx, ny, nz)
    background: TissueParams
    regions: list[Region] = field(default_factory=list)
    b1_field: B1Field = B1Field()

    def __post_init__(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"bad scene dims {self.dims}")
        self.dims = tuple(int(d) for d in self.dims)
        nx, ny, nz = self.dims
        for r in self.regions:
            if r.shape == "sphere":
                x, y, z = r.center
                if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
                    raise ConfigError(f"sphere center {r.center} outside dims {self.dims}")
            else:
                x, y = r.center
                if not (0 <= x < nx and 0 <= y < ny):
                    raise ConfigError(f"ellipse center {r.center} outside dims {self.dims}")

    def to_dict(self) -> dict:
        def tissue_dict(t: TissueParams) -> dict:
            return {"t1_ms": float(t.t1_ms), "t2_ms": float(t.t2_ms), "pd": float(t.pd), "ie": float(t.ie)}

        return {
            "dims": list(self.dims),
            "background": tissue_dict(self.background),
            "regions": [
                {
                    "shape": r.shape,
                    "center": list(r.center),
                    "radius": r.radius if r.shape == "sphere" else list(r.radius),
                    "tissue": tissue_dict(r.tissue),
                }
                for r in self.regions
            ],
            "b1_field": {
                "kind": self.b1_field.kind,
                "value": self.b1_field.value,
                "lo": self.b1_field.lo,
                "hi": self.b1_field.hi,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        try:
            regions = [
                Region(
                    shape=r["shape"],
                    center=tuple(r["center"]),
                    radius=r["radius"] if r["shape"] == "sphere" else tuple(r["radius"]),
                    tissue=TissueParams(**r["tissue"]),
                )
                for r in d.get("regions", [])
            ]
            return cls(
                dims=tuple(d["dims"]),
                background=TissueParams(**d["background"]),
                regions=regions,
                b1_field=B1Field(**d.get("b1_field", {})),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"bad scene description: {e}") from e

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        return cls.from_dict(json.loads(text))


def _region_mask(region: Region, dims: tuple[int, int, int]) -> np.ndarray:
    nx, ny, nz = dims
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    if region.shape == "sphere":
        cx, cy, cz = region.center
        return (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= region.radius**2
    cx, cy = region.center
    rx, ry = region.radius
    return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0


def render_scene(spec: SceneSpec) -> tuple[ParameterMaps, np.ndarray, np.ndarray]:
    """Voxelize a scene: (ground-truth maps, uint8 label volume, B1 map).

    Labels are 1-based in region order, 0 for background; overlapping
    regions resolve to the later one with a warning.
    """
    nx, ny, nz = spec.dims
    shape = (nz, ny, nx)
    bg = spec.background
    stack = np.stack(
        [
            np.full(shape, float(bg.t1_ms)),
            np.full(shape, float(bg.t2_ms)),
            np.full(shape, float(bg.pd)),
            np.full(shape, float(bg.ie)),
        ]
    )
    labels = np.zeros(shape, dtype=np.uint8)
    for i, region in enumerate(spec.regions, start=1):
        mask = _region_mask(region, spec.dims)
        if np.any(labels[mask] != 0):
            warnings.warn(f"region {i} overlaps an earlier region; later region wins", stacklevel=2)
        t = region.tissue
        for c, v in enumerate((t.t1_ms, t.t2_ms, t.pd, t.ie)):
            stack[c][mask] = float(v)
        labels[mask] = i
    b1 = spec.b1_field.render(spec.dims)
    return ParameterMaps.from_stack(stack), labels, b1


@dataclass(frozen=True)
class NoiseSpec:
    """none, gaussian(sigma), or rician(sigma); sigma in signal units."""

    model: str = "none"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model not in ("none", "gaussian", "rician"):
            raise ConfigError(f"unknown noise model {self.model!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")


def acquire(
    maps: ParameterMaps, b1: np.ndarray, timing: SequenceTiming, noise: NoiseSpec = NoiseSpec()
) -> SignalVolume:
    """Simulate the five contrasts of a ground-truth scene, plus its B1
    channel; noise (if any) is seeded and independent across voxels."""
    if maps.shape != b1.shape:
        raise ShapeError(f"maps {maps.shape} and b1 {b1.shape} differ")
    tissue = TissueParams(
        maps.t1_ms.reshape(-1), maps.t2_ms.reshape(-1), maps.pd.reshape(-1), maps.ie.reshape(-1)
    )
    sig = simulate(timing, tissue, b1.reshape(-1))
    if noise.model != "none" and noise.sigma > 0:
        rng = np.random.default_rng(noise.seed)
        if noise.model == "gaussian":
            sig = sig + noise.sigma * rng.standard_normal(sig.shape)
        else:  # rician: magnitude of a complex Gaussian perturbation
            re = sig + noise.sigma * rng.standard_normal(sig.shape)
            im = noise.sigma * rng.standard_normal(sig.shape)
            sig = np.sqrt(re**2 + im**2)
    data = np.concatenate([sig.reshape((5,) + maps.shape), b1[None]], axis=0)
    return SignalVolume(data, CONTRAST_CHANNELS + ("b1",))


def _geometric_ladder(lo: float, hi: float, n: int) -> np.ndarray:
    return lo * (hi / lo) ** (np.arange(n) / (n - 1))


def nist_like_preset(dims: tuple[int, int, int] = (64, 64, 8)) -> SceneSpec:
    """Sphere-plate scene: eight spheres along a geometric T1 ladder
    600-3200 ms (labels 1-8) and six along a T2 ladder 40-260 ms (labels
    9-14), in a long-relaxation water-like bath, with a linear B1 gradient.
    """
    nx, ny, nz = dims
    t1_ladder = _geometric_ladder(600.0, 3200.0, 8)
    t2_ladder = _geometric_ladder(40.0, 260.0, 6)
    cz = (nz - 1) / 2.0
    radius = min(nx, ny) / 16.0 + 1.0
    cols = 4
    xs = np.linspace(nx / 8, nx - nx / 8 - 1, cols)
    ys = np.linspace(ny / 8, ny - ny / 8 - 1, 4)
    centers = [(float(xs[i % cols]), float(ys[i // cols])) for i in range(14)]
    regions = [
        Region("sphere", (cx, cy, cz), radius, TissueParams(t1, 80.0, 1.0, 0.95))
        for (cx, cy), t1 in zip(centers[:8], t1_ladder)
    ]
    regions += [
        Region("sphere", (cx, cy, cz), radius, TissueParams(1000.0, t2, 1.0, 0.95))
        for (cx, cy), t2 in zip(centers[8:], t2_ladder)
    ]
    return SceneSpec(
        dims=dims,
        background=TissueParams(2800.0, 1500.0, 1.0, 0.95),
        regions=regions,
        b1_field=B1Field("linear_gradient", lo=0.9, hi=1.1),
    )


def brain_like_preset(dims: tuple[int, int, int] = (96, 96, 1)) -> SceneSpec:
    """Single-slice brain-like scene: gray-matter-like head (label 1),
    white-matter-like core (label 2), and two long-relaxation fluid
    ventricles (labels 3, 4) that exercise fluid exclusion."""
    nx, ny, nz = dims
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    gm = TissueParams(1400.0, 100.0, 0.85, 0.95)
    wm = TissueParams(850.0, 70.0, 0.75, 0.93)
    fluid = TissueParams(4000.0, 2000.0, 1.0, 0.9)
    air = TissueParams(1000.0, 100.0, 0.0, 0.9)
    regions = [
        Region("ellipse", (cx, cy), (0.42 * nx, 0.46 * ny), gm),
        Region("ellipse", (cx, cy), (0.27 * nx, 0.31 * ny), wm),
        Region("ellipse", (cx - 0.08 * nx, cy), (0.05 * nx, 0.13 * ny), fluid),
        Region("ellipse", (cx + 0.08 * nx, cy), (0.05 * nx, 0.13 * ny), fluid),
    ]
    return SceneSpec(dims=dims, background=air, regions=regions, b1_field=B1Field("uniform", 1.0))
