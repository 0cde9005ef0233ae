"""Synthetic volumetric data, preprocessing, augmentation and volume I/O.

The generator builds a desk-scale stand-in for abdominal segmentation:
one large smooth organ, one small irregular organ touching it, and
distractor blobs that share the small organ's intensity distribution
but belong to the background.  A model can only separate the small
organ from the distractors by using context (the small organ always
sits next to the large one), which is exactly the localisation problem
attention gating is meant to solve.

Volumes are stored as raw little-endian payloads (f32 intensities, u8
labels) with a JSON sidecar describing dims, spacing, dtype and kind.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DimensionError, FormatError

__all__ = [
    "Volume",
    "LabelVolume",
    "SyntheticSpec",
    "generate_synthetic",
    "normalize_intensity",
    "AugmentParams",
    "sample_augment_params",
    "apply_augment",
    "augment",
    "write_volume",
    "read_volume",
]

FORMAT_VERSION = 1


@dataclass
class Volume:
    """Scalar intensity grid with physical voxel spacing in mm."""

    data: np.ndarray  # (D, H, W) float64
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimensionError(f"volume must be 3-D with positive extents, got {self.data.shape}")
        if min(self.spacing) <= 0:
            raise DimensionError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelVolume:
    """Integer class-id grid aligned with a Volume."""

    labels: np.ndarray  # (D, H, W) uint8
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise DimensionError("labels must be integers")
        self.labels = self.labels.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.labels.ndim != 3 or min(self.labels.shape) < 1:
            raise DimensionError(f"labels must be 3-D with positive extents, got {self.labels.shape}")
        if min(self.spacing) <= 0:
            raise DimensionError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic scene.

    Classes: 0 background, 1 large smooth organ, 2 small irregular
    organ (with n_classes=2 the large organ is dropped and the small
    organ takes class 1).  Distractor blobs replicate the small organ's
    geometry and intensity but keep the background label; they are
    placed away from the large organ while the small organ always sits
    adjacent to it.
    """

    dims: tuple[int, int, int] = (48, 48, 48)
    n_classes: int = 3
    contrast: tuple[float, ...] = (0.0, 0.5, 1.0)  # per-class mean intensity
    noise_sigma: float = 0.08
    large_radius: tuple[float, float] = (10.0, 14.0)
    small_radius: tuple[float, float] = (4.0, 5.5)
    lobe_amplitude: float = 0.35
    distractor_count: int = 3
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes not in (2, 3):
            raise ConfigurationError("generator supports 2 or 3 classes")
        if len(self.contrast) < self.n_classes:
            raise ConfigurationError(
                f"need {self.n_classes} per-class contrast values, got {len(self.contrast)}"
            )
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.distractor_count < 0:
            raise ConfigurationError("distractor_count must be >= 0")
        for lo, hi in (self.large_radius, self.small_radius):
            if not (0 < lo <= hi):
                raise ConfigurationError("radius ranges must satisfy 0 < lo <= hi")
        limit = min(self.dims) / 2.0
        largest = self.small_radius[1] * (1.0 + self.lobe_amplitude)
        if self.n_classes == 3:
            largest = max(largest, self.large_radius[1])
        if largest >= limit:
            raise ConfigurationError(
                f"radii up to {largest:.1f} voxels do not fit inside dims {self.dims}"
            )


def _blob_mask(
    dims: tuple[int, int, int],
    center: np.ndarray,
    radii: np.ndarray,
    rng: np.random.Generator | None = None,
    lobe_amplitude: float = 0.0,
    n_lobes: int = 4,
) -> np.ndarray:
    """Implicit-surface blob: an ellipsoid, optionally deformed by random
    Gaussian lobes that push the surface in and out."""
    zz, yy, xx = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    f = 1.0 - (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    )
    if lobe_amplitude > 0.0 and rng is not None:
        r_mean = float(np.mean(radii))
        for _ in range(n_lobes):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            q = center + direction * r_mean
            amp = rng.uniform(-lobe_amplitude, lobe_amplitude) * 2.0
            width = r_mean * rng.uniform(0.5, 0.9)
            d2 = (zz - q[0]) ** 2 + (yy - q[1]) ** 2 + (xx - q[2]) ** 2
            f += amp * np.exp(-d2 / (2.0 * width**2))
    return f > 0.0


def generate_synthetic(spec: SyntheticSpec) -> tuple[Volume, LabelVolume]:
    """Deterministic per seed; intensities are quantized to f32 so a
    write/read cycle through the volume format is bitwise."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dims = tuple(int(d) for d in spec.dims)
    center = np.asarray(dims, dtype=np.float64) / 2.0
    labels = np.zeros(dims, dtype=np.uint8)

    has_large = spec.n_classes == 3
    large_mask = None
    large_r = 0.0
    if has_large:
        jitter = rng.uniform(-0.06, 0.06, size=3) * np.asarray(dims)
        large_center = center + jitter
        radii = rng.uniform(*spec.large_radius, size=3)
        large_r = float(radii.max())
        large_mask = _blob_mask(dims, large_center, radii)
        labels[large_mask] = 1
    else:
        large_center = center

    small_class = 2 if has_large else 1

    def place_blob(min_dist: float, max_dist: float, forbidden: np.ndarray | None) -> np.ndarray:
        """A lobed blob whose center lies in a spherical shell around the
        large organ and whose mask avoids `forbidden`."""
        for _ in range(200):
            r_base = rng.uniform(*spec.small_radius)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            dist = rng.uniform(min_dist, max_dist)
            c = large_center + direction * dist
            margin = r_base * (1.0 + spec.lobe_amplitude) + 1.0
            if np.any(c < margin) or np.any(c > np.asarray(dims) - margin):
                continue
            mask = _blob_mask(
                dims, c, np.full(3, r_base), rng, lobe_amplitude=spec.lobe_amplitude
            )
            if not mask.any():
                continue
            if forbidden is not None and (mask & forbidden).any():
                continue
            return mask
        raise ConfigurationError(
            "could not place a blob; radii or distractor count are infeasible for these dims"
        )

    small_lo = large_r + spec.small_radius[1] + 1.0
    small_mask = place_blob(small_lo, small_lo + 3.0, large_mask)
    labels[small_mask] = small_class

    occupied = small_mask if large_mask is None else (large_mask | small_mask)
    distractors = np.zeros(dims, dtype=bool)
    distract_lo = large_r + spec.small_radius[1] + 6.0
    distract_hi = max(distract_lo + 1.0, float(min(dims)) * 0.75)
    for _ in range(spec.distractor_count):
        d_mask = place_blob(distract_lo, distract_hi, occupied)
        occupied |= d_mask
        distractors |= d_mask  # intensity of the small organ, label stays background

    data = np.full(dims, float(spec.contrast[0]))
    if has_large:
        data[large_mask] = spec.contrast[1]
    data[small_mask] = spec.contrast[small_class]
    data[distractors] = spec.contrast[small_class]
    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=dims)
    data = data.astype(np.float32).astype(np.float64)

    return Volume(data, spec.spacing), LabelVolume(labels, spec.spacing)


def normalize_intensity(v: Volume) -> Volume:
    """Shift/scale to zero mean and unit variance; constant input maps to
    all zeros.  Idempotent, and invariant to affine input transforms."""
    mean = v.data.mean()
    std = v.data.std()
    if std == 0.0:
        return Volume(np.zeros_like(v.data), v.spacing)
    return Volume((v.data - mean) / std, v.spacing)


@dataclass
class AugmentParams:
    rotation_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    flip_axial: bool = False
    crop_offset: tuple[int, int, int] | None = None
    crop_size: tuple[int, int, int] | None = None


def sample_augment_params(
    rng: np.random.Generator,
    dims: tuple[int, int, int],
    crop_size: int | tuple[int, int, int] | None = None,
    max_rotation_deg: float = 10.0,
    scale_range: tuple[float, float] = (0.9, 1.1),
    flip_probability: float = 0.5,
) -> AugmentParams:
    rotation = tuple(rng.uniform(-max_rotation_deg, max_rotation_deg, size=3))
    scale = float(rng.uniform(*scale_range))
    flip = bool(rng.random() < flip_probability)
    offset = None
    size = None
    if crop_size is not None:
        size = (crop_size,) * 3 if isinstance(crop_size, int) else tuple(crop_size)
        if any(s > d for s, d in zip(size, dims)):
            raise ConfigurationError(f"crop {size} exceeds volume dims {dims}")
        offset = tuple(int(rng.integers(0, d - s + 1)) for s, d in zip(size, dims))
    return AugmentParams(rotation, scale, flip, offset, size)


def _rotation_matrix(rotation_deg: tuple[float, float, float]) -> np.ndarray:
    a, b, c = (math.radians(r) for r in rotation_deg)
    rz = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    ry = np.array([[math.cos(b), 0, math.sin(b)], [0, 1, 0], [-math.sin(b), 0, math.cos(b)]])
    rx = np.array([[math.cos(c), -math.sin(c), 0], [math.sin(c), math.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def apply_augment(v: Volume, l: LabelVolume, params: AugmentParams) -> tuple[Volume, LabelVolume]:
    """Affine (rotate + isotropic scale about the center), optional flip
    along the first spatial axis, then crop.  Intensities resample
    trilinearly, labels by nearest neighbor, on identical grids.
    Identity parameters return the inputs unchanged (bitwise)."""
    if v.dims != l.dims:
        raise DimensionError(f"volume {v.dims} and labels {l.dims} disagree")
    data, labels = v.data, l.labels

    if params.scale != 1.0 or any(r != 0.0 for r in params.rotation_deg):
        rot = _rotation_matrix(params.rotation_deg)
        inv = rot.T / params.scale  # output coordinate -> input coordinate
        center = (np.asarray(v.dims) - 1) / 2.0
        offset = center - inv @ center
        data = ndimage.affine_transform(data, inv, offset=offset, order=1, mode="constant", cval=0.0)
        labels = ndimage.affine_transform(
            labels, inv, offset=offset, order=0, mode="constant", cval=0
        )

    if params.flip_axial:
        data = np.flip(data, axis=0)
        labels = np.flip(labels, axis=0)

    if params.crop_size is not None:
        off = params.crop_offset or (0, 0, 0)
        sl = tuple(slice(o, o + s) for o, s in zip(off, params.crop_size))
        if any(o + s > d for o, s, d in zip(off, params.crop_size, v.dims)):
            raise DimensionError(f"crop {off}+{params.crop_size} exceeds dims {v.dims}")
        data = data[sl]
        labels = labels[sl]

    return Volume(np.ascontiguousarray(data), v.spacing), LabelVolume(
        np.ascontiguousarray(labels), l.spacing
    )


def augment(
    v: Volume, l: LabelVolume, seed: int, crop_size: int | tuple[int, int, int] | None = None
) -> tuple[Volume, LabelVolume]:
    """Randomly parameterized apply_augment, deterministic per seed."""
    rng = np.random.default_rng(seed)
    return apply_augment(v, l, sample_augment_params(rng, v.dims, crop_size=crop_size))


def _payload_path(stem) -> str:
    return f"{stem}.raw"


def _sidecar_path(stem) -> str:
    return f"{stem}.json"


def write_volume(stem, v: Volume | LabelVolume) -> None:
    """Write <stem>.raw plus <stem>.json.  Intensities are stored as
    little-endian f32, labels as u8; write-then-read round-trips bitwise."""
    if isinstance(v, Volume):
        payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
        dtype, kind = "f32", "intensity"
        dims = v.dims
    elif isinstance(v, LabelVolume):
        payload = np.ascontiguousarray(v.labels, dtype=np.uint8).tobytes()
        dtype, kind = "u8", "labels"
        dims = v.dims
    else:
        raise TypeError(f"cannot write {type(v).__name__} as a volume")
    sidecar = {
        "format_version": FORMAT_VERSION,
        "dims": list(dims),
        "spacing": list(v.spacing),
        "dtype": dtype,
        "kind": kind,
    }
    with open(_sidecar_path(stem), "w") as f:
        json.dump(sidecar, f, sort_keys=True)
        f.write("\n")
    with open(_payload_path(stem), "wb") as f:
        f.write(payload)


_DTYPE_SIZE = {"f32": 4, "u8": 1}


def read_volume(stem) -> Volume | LabelVolume:
    sidecar_path = _sidecar_path(stem)
    if not os.path.exists(sidecar_path):
        raise FormatError(f"missing sidecar {sidecar_path}")
    try:
        with open(sidecar_path) as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt sidecar {sidecar_path}: {e}") from e
    required = {"format_version", "dims", "spacing", "dtype", "kind"}
    if set(meta) != required:
        raise FormatError(
            f"sidecar {sidecar_path} must contain exactly {sorted(required)}, got {sorted(meta)}"
        )
    if meta["format_version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported volume format version {meta['format_version']}")
    if meta["dtype"] not in _DTYPE_SIZE or meta["kind"] not in ("intensity", "labels"):
        raise FormatError(f"sidecar {sidecar_path} has unknown dtype/kind")
    dims = tuple(int(d) for d in meta["dims"])
    expected = _DTYPE_SIZE[meta["dtype"]] * int(np.prod(dims))
    with open(_payload_path(stem), "rb") as f:
        payload = f.read()
    if len(payload) != expected:
        raise FormatError(
            f"payload {_payload_path(stem)}: expected {expected} bytes, found {len(payload)}"
        )
    spacing = tuple(meta["spacing"])
    if meta["kind"] == "intensity":
        data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
        return Volume(data, spacing)
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()
    return LabelVolume(labels, spacing)
