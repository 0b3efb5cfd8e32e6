"""Synthetic two-domain lesion volumes, a volume file format and preprocessing.

Two presets stand in for the source and target domains: ``ms-like`` volumes
carry many small bright lesions, ``tumor-like`` volumes one large blob. Both
sit inside an ellipsoidal "tissue" region with additive Gaussian noise.

Each lesion is an ellipsoid with half-axes ``r``; its intensity bump is
``contrast * 2**(-q)`` where ``q = sum(((x - c) / r)**2)``, so the bump is
half its peak exactly on the mask boundary ``q = 1``. The mask is the union
of the ``q <= 1`` supports and is stored directly, never re-thresholded.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from dwpseg.errors import FormatError, VersionError


@dataclass
class Volume:
    intensities: np.ndarray
    mask: np.ndarray
    domain: str = ""
    seed: int = -1

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.intensities.ndim != 3:
            raise ValueError(f"intensities must be 3-D, got shape {self.intensities.shape}")
        if self.intensities.shape != self.mask.shape:
            raise ValueError(f"intensity shape {self.intensities.shape} != mask shape {self.mask.shape}")
        if self.mask.size and self.mask.max() > 1:
            raise ValueError("mask must be binary")
        if not np.all(np.isfinite(self.intensities)):
            raise ValueError("intensities must be finite")

    @property
    def shape(self) -> tuple:
        return self.intensities.shape


@dataclass(frozen=True)
class DomainPreset:
    name: str
    shape: tuple = (32, 32, 32)
    n_lesions: tuple = (1, 1)
    radius: tuple = (4.0, 8.0)
    anisotropy: float = 1.0
    contrast: float = 1.0
    noise_sigma: float = 0.1
    tissue_intensity: float = 0.4

    def __post_init__(self):
        if self.radius[0] < 1.0:
            raise ValueError("lesion radii must be at least one voxel")
        if self.n_lesions[0] < 0 or self.n_lesions[0] > self.n_lesions[1]:
            raise ValueError("bad lesion count range")


PRESETS: Dict[str, DomainPreset] = {
    "ms-like": DomainPreset(
        "ms-like", n_lesions=(6, 14), radius=(1.0, 2.0), anisotropy=1.3,
        contrast=1.0, noise_sigma=0.15, tissue_intensity=0.4,
    ),
    "tumor-like": DomainPreset(
        "tumor-like", n_lesions=(1, 1), radius=(4.0, 8.0), anisotropy=1.25,
        contrast=0.8, noise_sigma=0.1, tissue_intensity=0.5,
    ),
}


def get_preset(name: str) -> DomainPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _grid(shape):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")


def _one_volume(preset: DomainPreset, rng: np.random.Generator, seed: int) -> Volume:
    shape = tuple(preset.shape)
    grid = _grid(shape)
    center = np.array([(n - 1) / 2.0 for n in shape])
    tissue_axes = np.array([0.42 * n for n in shape]) * rng.uniform(0.9, 1.05, size=3)
    q_tissue = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, tissue_axes))
    # soft-edged tissue region
    intensities = preset.tissue_intensity / (1.0 + np.exp((np.sqrt(q_tissue) - 1.0) * 12.0))
    mask = np.zeros(shape, dtype=bool)

    n_les = int(rng.integers(preset.n_lesions[0], preset.n_lesions[1] + 1))
    for _ in range(n_les):
        r = rng.uniform(*preset.radius)
        axes = r * np.exp(rng.uniform(-0.5, 0.5, size=3) * math.log(preset.anisotropy))
        axes = np.maximum(axes, 1.0)
        # keep the lesion centre inside the tissue ellipsoid, away from its rim
        while True:
            u = rng.uniform(-1.0, 1.0, size=3)
            if np.sum(u * u) <= 1.0:
                break
        room = np.maximum(tissue_axes - axes.max(), 0.0)
        c = center + u * room
        q = sum(((g - ci) / ai) ** 2 for g, ci, ai in zip(grid, c, axes))
        intensities = intensities + preset.contrast * np.exp2(-q)
        mask |= q <= 1.0

    intensities = intensities + rng.normal(0.0, preset.noise_sigma, size=shape)
    return Volume(intensities.astype(np.float32), mask.astype(np.uint8), preset.name, seed)


def generate(preset, n: int, seed: int) -> List[Volume]:
    """``n`` volumes from ``preset`` (a DomainPreset or preset name); deterministic in ``seed``."""
    if isinstance(preset, str):
        preset = get_preset(preset)
    if n < 1:
        raise ValueError("n must be >= 1")
    if preset.contrast <= preset.noise_sigma:
        warnings.warn(f"preset {preset.name!r}: contrast {preset.contrast} <= noise {preset.noise_sigma}; task may be unlearnable")
    children = np.random.SeedSequence(seed).spawn(n)
    out = []
    for child in children:
        vol_seed = int(child.generate_state(1, dtype=np.uint32)[0])
        out.append(_one_volume(preset, np.random.default_rng(child), vol_seed))
    return out


def threshold_segment(volume: Volume, preset: DomainPreset, smoothing: float = 0.7) -> np.ndarray:
    """Hand-tuned baseline: lightly smooth, then keep voxels brighter than tissue + half the lesion contrast."""
    from scipy.ndimage import gaussian_filter

    img = volume.intensities.astype(np.float64)
    if smoothing > 0:
        img = gaussian_filter(img, smoothing)
    return img > preset.tissue_intensity + 0.5 * preset.contrast


# --------------------------------------------------------------------------
# file format
#
#   0   4   magic b"DWPV"
#   4   2   version (uint16)
#   6   1   dtype tag (uint8; 1 = float32 intensities)
#   7   12  shape D, H, W (3 x uint32)
#   19  2   domain tag length L (uint16)
#   21  L   domain tag, UTF-8
#   21+L 8  seed (int64, -1 if unknown)
#   ..      intensities, float32 little-endian, C order
#   ..      mask, uint8, C order

VOLUME_MAGIC = b"DWPV"
VOLUME_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f4")}
_HEAD = struct.Struct("<4sHB3IH")

# suffix -> loader; plug external formats (NIfTI, ...) in here
LOADERS: Dict[str, Callable[[Path], Volume]] = {}


def register_loader(suffix: str, fn: Callable[[Path], Volume]) -> None:
    LOADERS[suffix.lower()] = fn


def save_volume(volume: Volume, path) -> None:
    if volume.intensities.size == 0:
        raise ValueError("refusing to save a zero-sized volume")
    tag = volume.domain.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(VOLUME_MAGIC, VOLUME_VERSION, 1, *volume.shape, len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<q", int(volume.seed)))
        fh.write(np.ascontiguousarray(volume.intensities, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(volume.mask, dtype=np.uint8).tobytes())


def load_volume(path) -> Volume:
    path = Path(path)
    loader = LOADERS.get(path.suffix.lower())
    if loader is not None:
        return loader(path)
    data = path.read_bytes()
    if len(data) < _HEAD.size:
        raise FormatError(f"{path}: truncated volume header")
    magic, version, tag_code, d, h, w, tag_len = _HEAD.unpack_from(data, 0)
    if magic != VOLUME_MAGIC:
        raise VersionError(f"{path}: bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise VersionError(f"{path}: volume format version {version}, expected {VOLUME_VERSION}")
    if tag_code not in _DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag_code}")
    if d * h * w == 0:
        raise FormatError(f"{path}: zero-sized volume")
    pos = _HEAD.size
    if len(data) < pos + tag_len + 8:
        raise FormatError(f"{path}: truncated volume header")
    try:
        domain = data[pos : pos + tag_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: malformed domain tag") from exc
    pos += tag_len
    (seed,) = struct.unpack_from("<q", data, pos)
    pos += 8
    n = d * h * w
    dt = _DTYPE_TAGS[tag_code]
    need = pos + n * dt.itemsize + n
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(data)}")
    inten = np.frombuffer(data, dtype=dt, count=n, offset=pos).reshape(d, h, w)
    mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos + n * dt.itemsize).reshape(d, h, w)
    if mask.max() > 1:
        raise FormatError(f"{path}: mask is not binary")
    return Volume(inten.astype(np.float32), mask.copy(), domain, seed)


# --------------------------------------------------------------------------
# preprocessing


def _crop_or_pad(arr: np.ndarray, target: Sequence[int]) -> np.ndarray:
    out = arr
    for axis, t in enumerate(target):
        n = out.shape[axis]
        if n > t:
            lo = (n - t) // 2
            out = np.take(out, np.arange(lo, lo + t), axis=axis)
        elif n < t:
            before = (t - n) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (before, t - n - before)
            out = np.pad(out, pad)
    return out


def preprocess(volume: Volume, target_shape: Sequence[int] = (32, 32, 32), normalize: bool = True) -> Volume:
    """Centre crop-or-pad to ``target_shape``; optionally z-score the intensities."""
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != 3 or min(target_shape) < 8:
        raise ValueError("target_shape must have three axes, each >= 8")
    inten = _crop_or_pad(volume.intensities, target_shape).astype(np.float64)
    mask = _crop_or_pad(volume.mask, target_shape)
    if normalize:
        inten = inten - inten.mean()
        std = inten.std()
        if std > 0:
            inten = inten / std
    return replace(volume, intensities=inten.astype(np.float32), mask=mask)


def stack(volumes: Sequence[Volume]) -> tuple[np.ndarray, np.ndarray]:
    """``[N, 1, D, H, W]`` float32 images and ``[N, D, H, W]`` uint8 masks."""
    images = np.stack([v.intensities for v in volumes])[:, None]
    masks = np.stack([v.mask for v in volumes])
    return images, masks
