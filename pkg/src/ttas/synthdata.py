"""Synthetic thorax phantoms with crescent-shaped effusions.

Each case is a 2D slab (one slice with an explicit slab thickness) showing two
elliptical lungs on a uniform background, with a fluid crescent under one
lung. The effusion area is steered to a requested fraction of the image by
bisection on the crescent thickness, so effusion volumes are controllable.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MASK_MAGIC = b"SSV1"
IMAGE_MAGIC = b"SSF1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIddd")


class VolumeFormatError(ValueError):
    pass


class PhantomGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomParams:
    image_size: tuple[int, int] = (64, 64)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 5.0)
    effusion_area_range: tuple[float, float] = (0.005, 0.08)
    noise_sigma: float = 0.1
    intensity_levels: tuple[float, float, float] = (0.2, 0.4, 0.8)
    seed: int = 0

    def __post_init__(self):
        for name in ("image_size", "spacing_mm", "effusion_area_range", "intensity_levels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lo, hi = self.effusion_area_range
        if not 0.0 < lo <= hi < 0.5:
            raise ValueError(f"effusion_area_range must satisfy 0 < min <= max < 0.5, got {self.effusion_area_range}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValueError("spacing_mm needs three positive values")
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            raise ValueError("image_size must be (H, W) with both >= 8")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if len(set(self.intensity_levels)) != 3:
            raise ValueError("intensity levels must be pairwise distinct")


@dataclass
class MaskVolume:
    """Binary voxel grid; ``voxels`` has shape (nz, ny, nx) so x varies fastest."""

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    voxels: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        nx, ny, nz = self.dims
        v = np.asarray(self.voxels)
        if v.size != nx * ny * nz:
            raise VolumeFormatError(f"{v.size} voxels do not fill dims {self.dims}")
        v = v.reshape(nz, ny, nx)
        if not np.isin(v, (0, 1)).all():
            raise VolumeFormatError("mask voxels must be 0 or 1")
        self.voxels = v.astype(np.uint8)

    @classmethod
    def from_array(cls, arr: np.ndarray, spacing_mm) -> MaskVolume:
        """Build from a 2D (ny, nx) or 3D (nz, ny, nx) array, binarising at 0.5."""
        a = np.asarray(arr)
        if a.ndim == 2:
            a = a[None]
        if a.ndim != 3:
            raise VolumeFormatError(f"mask array must be 2D or 3D, got shape {a.shape}")
        nz, ny, nx = a.shape
        return cls((nx, ny, nz), spacing_mm, (a > 0.5).astype(np.uint8))

    @property
    def flat(self) -> np.ndarray:
        return self.voxels.reshape(-1)

    def count(self) -> int:
        return int(self.voxels.sum(dtype=np.int64))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskVolume):
            return NotImplemented
        return (self.dims == other.dims and self.spacing_mm == other.spacing_mm
                and np.array_equal(self.voxels, other.voxels))


def volume_ml(mask: MaskVolume) -> float:
    sx, sy, sz = mask.spacing_mm
    return mask.count() * sx * sy * sz / 1000.0


@dataclass
class Case:
    id: str
    image: np.ndarray  # [1, H, W]
    mask: MaskVolume | None
    true_volume_ml: float | None
    stratum: int | None = None

    def unlabeled(self) -> Case:
        return Case(self.id, self.image, None, None, self.stratum)


@dataclass
class Split:
    labeled: list[Case] = field(default_factory=list)
    unlabeled: list[Case] = field(default_factory=list)
    test: list[Case] = field(default_factory=list)
    stratum_bounds_ml: tuple[float, float] = (0.0, 0.0)


# geometry --------------------------------------------------------------------

def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _crescent(yy, xx, lung, cy, cx, ry, rx, t):
    outer = _ellipse(yy, xx, cy + 0.6 * t, cx, ry + 0.4 * t, rx + 0.15 * t)
    return outer & ~lung & (yy >= cy)


def _draw_geometry(rng: np.random.Generator, h: int, w: int):
    rx = w * rng.uniform(0.12, 0.16)
    ry = h * rng.uniform(0.22, 0.28)
    cy = h * rng.uniform(0.36, 0.42)
    left = (cy + h * rng.uniform(-0.02, 0.02), w * rng.uniform(0.27, 0.32), ry * rng.uniform(0.95, 1.05), rx)
    right = (cy + h * rng.uniform(-0.02, 0.02), w * rng.uniform(0.68, 0.73), ry * rng.uniform(0.95, 1.05), rx)
    side = int(rng.integers(2))
    return left, right, side


def _fit_crescent(yy, xx, lung, geom, target: int, h: int):
    cy, cx, ry, rx = geom
    lo, hi = 0.0, float(2 * h)
    if int(_crescent(yy, xx, lung, cy, cx, ry, rx, hi).sum()) < target:
        return None
    best = None
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        n = int(_crescent(yy, xx, lung, cy, cx, ry, rx, mid).sum())
        if best is None or abs(n - target) < abs(best[0] - target):
            best = (n, mid)
        if n < target:
            lo = mid
        else:
            hi = mid
    for t in (lo, hi):
        n = int(_crescent(yy, xx, lung, cy, cx, ry, rx, t).sum())
        if abs(n - target) < abs(best[0] - target):
            best = (n, t)
    n, t = best
    if n == 0:
        return None
    return _crescent(yy, xx, lung, cy, cx, ry, rx, t)


def case_id(seed: int, index: int) -> str:
    return f"s{seed}-c{index:05d}"


def generate_case(params: PhantomParams, case_index: int, area_fraction: float | None = None,
                  stratum: int | None = None) -> Case:
    """Deterministic phantom for ``(params.seed, case_index)``.

    ``area_fraction`` fixes the target effusion area; by default it is drawn
    uniformly from ``params.effusion_area_range``.
    """
    h, w = params.image_size
    rng = np.random.default_rng(np.random.SeedSequence([int(params.seed) & 0xFFFFFFFF, int(case_index)]))
    lo, hi = params.effusion_area_range
    frac = rng.uniform(lo, hi) if area_fraction is None else float(area_fraction)
    target = max(1, int(round(frac * h * w)))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    bg, lung_level, fluid_level = params.intensity_levels
    for _ in range(100):
        left, right, side = _draw_geometry(rng, h, w)
        lungs = [_ellipse(yy, xx, *g) for g in (left, right)]
        effusion = _fit_crescent(yy, xx, lungs[side], (left, right)[side], target, h)
        if effusion is not None:
            break
    else:
        raise PhantomGenerationError(f"case {case_index}: no usable effusion geometry in 100 attempts")

    image = np.full((h, w), bg)
    image[lungs[0] | lungs[1]] = lung_level
    image[effusion] = fluid_level
    if params.noise_sigma > 0:
        image = image + rng.normal(0.0, params.noise_sigma, size=(h, w))
    # float32-representable so the on-disk image format is lossless
    image = image.astype(np.float32).astype(np.float64)[None]
    mask = MaskVolume((w, h, 1), params.spacing_mm, effusion.astype(np.uint8)[None])
    return Case(case_id(params.seed, case_index), image, mask, volume_ml(mask), stratum)


def stratum_bounds(params: PhantomParams) -> tuple[float, float]:
    """Area-fraction boundaries between the small/medium/large thirds."""
    lo, hi = params.effusion_area_range
    step = (hi - lo) / 3.0
    return lo + step, lo + 2 * step


def fraction_to_ml(params: PhantomParams, fraction: float) -> float:
    h, w = params.image_size
    sx, sy, sz = params.spacing_mm
    return fraction * h * w * sx * sy * sz / 1000.0


def generate_split(params: PhantomParams, n_labeled: int, n_unlabeled: int, n_test: int) -> Split:
    """Labeled, unlabeled and test cases with disjoint indices.

    Test cases are spread evenly over three equal-width thirds of the effusion
    area range (small, medium, large); unlabeled cases carry images only.
    """
    if min(n_labeled, n_unlabeled, n_test) < 0:
        raise ValueError("split sizes must be >= 0")
    if n_labeled + n_test < 1:
        raise ValueError("need at least one labeled or test case")
    split = Split()
    split.labeled = [generate_case(params, i) for i in range(n_labeled)]
    split.unlabeled = [generate_case(params, n_labeled + i).unlabeled() for i in range(n_unlabeled)]
    lo, hi = params.effusion_area_range
    width = (hi - lo) / 3.0
    base = n_labeled + n_unlabeled
    for i in range(n_test):
        s = (3 * i) // n_test if n_test else 0
        # stay off the stratum edges so rasterisation cannot cross them
        a = lo + s * width + 0.05 * width
        b = lo + (s + 1) * width - 0.05 * width
        u = np.random.default_rng(np.random.SeedSequence([int(params.seed) & 0xFFFFFFFF, base + i, 7])).uniform()
        split.test.append(generate_case(params, base + i, area_fraction=a + u * (b - a), stratum=s))
    b1, b2 = stratum_bounds(params)
    split.stratum_bounds_ml = (fraction_to_ml(params, b1), fraction_to_ml(params, b2))
    return split


def stack_images(cases: Sequence[Case]) -> np.ndarray:
    if not cases:
        return np.zeros((0, 1, 1, 1))
    return np.stack([c.image for c in cases])


def stack_masks(cases: Sequence[Case]) -> np.ndarray:
    return np.stack([c.mask.voxels.astype(np.float64) for c in cases])


# file formats ----------------------------------------------------------------

def _pack(magic: bytes, dims, spacing, payload: bytes) -> bytes:
    nx, ny, nz = dims
    return _HEADER.pack(magic, FORMAT_VERSION, nx, ny, nz, *spacing) + payload


def _unpack(buf: bytes, magic: bytes, itemsize: int):
    if len(buf) < _HEADER.size:
        raise VolumeFormatError(f"truncated file: {len(buf)} bytes, header needs {_HEADER.size}")
    m, version, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(buf)
    if m != magic:
        raise VolumeFormatError(f"bad magic {m!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"unsupported format version {version}")
    n = nx * ny * nz
    payload = buf[_HEADER.size:]
    if len(payload) < n * itemsize:
        raise VolumeFormatError(f"truncated payload: header promises {n} voxels, file holds {len(payload) // itemsize}")
    if len(payload) > n * itemsize:
        raise VolumeFormatError(f"dims {nx}x{ny}x{nz} do not match payload of {len(payload)} bytes")
    return (nx, ny, nz), (sx, sy, sz), payload


def write_mask(path, mask: MaskVolume) -> None:
    Path(path).write_bytes(_pack(MASK_MAGIC, mask.dims, mask.spacing_mm, mask.flat.astype("u1").tobytes()))


def read_mask(path) -> MaskVolume:
    dims, spacing, payload = _unpack(Path(path).read_bytes(), MASK_MAGIC, 1)
    vox = np.frombuffer(payload, dtype="u1")
    if vox.size and vox.max() > 1:
        raise VolumeFormatError("mask payload contains values other than 0/1")
    return MaskVolume(dims, spacing, vox.copy())


def write_image(path, image: np.ndarray, spacing_mm=(1.0, 1.0, 1.0)) -> None:
    """Write a [1, H, W], [H, W] or [nz, ny, nx] float image as f32."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if not np.all(np.isfinite(a)):
        raise VolumeFormatError("image contains NaN or Inf")
    nz, ny, nx = a.shape
    Path(path).write_bytes(_pack(IMAGE_MAGIC, (nx, ny, nz), spacing_mm, a.astype("<f4").tobytes()))


def read_image(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Returns the image as float64 of shape (nz, ny, nx) and its spacing."""
    (nx, ny, nz), spacing, payload = _unpack(Path(path).read_bytes(), IMAGE_MAGIC, 4)
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(nz, ny, nx), spacing


# manifests -------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str | None
    split: str


def write_dataset(out_dir, split: Split, params: PhantomParams) -> Path:
    """Write images, masks and ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for tag, cases in (("labeled", split.labeled), ("unlabeled", split.unlabeled), ("test", split.test)):
        for c in cases:
            img_rel = f"images/{c.id}.ssf"
            write_image(out / img_rel, c.image, params.spacing_mm)
            mask_rel = "-"
            if c.mask is not None:
                mask_rel = f"masks/{c.id}.ssv"
                write_mask(out / mask_rel, c.mask)
            lines.append("\t".join((c.id, img_rel, mask_rel, tag)))
    path = out / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise VolumeFormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        cid, img, mask, tag = parts
        entries.append(ManifestEntry(cid, img, None if mask == "-" else mask, tag))
    return entries


def load_cases(manifest_path, split: str | None = None) -> list[Case]:
    root = Path(manifest_path).parent
    cases = []
    for e in read_manifest(manifest_path):
        if split is not None and e.split != split:
            continue
        img, _ = read_image(root / e.image_path)
        mask = read_mask(root / e.mask_path) if e.mask_path else None
        cases.append(Case(e.id, img, mask, volume_ml(mask) if mask is not None else None))
    return cases


def threshold_segment(image: np.ndarray, level: float = 0.5) -> np.ndarray:
    return (np.asarray(image) > level).astype(np.uint8)


__all__ = [
    "PhantomParams", "MaskVolume", "Case", "Split", "ManifestEntry", "VolumeFormatError",
    "PhantomGenerationError", "generate_case", "generate_split", "volume_ml", "write_mask", "read_mask",
    "write_image", "read_image", "write_dataset", "read_manifest", "load_cases", "stack_images",
    "stack_masks", "stratum_bounds", "fraction_to_ml", "case_id", "threshold_segment",
]
