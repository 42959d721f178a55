"""Volume container format, synthetic hemorrhage cohorts and augmentation.

On disk a volume is a directory::

    meta.json   {"patient_id", "shape": [S, H, W], "image_dtype": "f32le",
                 "mask_dtype": "u8", "slice_thickness_mm", "pixel_spacing_mm": [h, w]}
    image.raw   S*H*W little-endian float32, row-major
    mask.raw    S*H*W uint8 in {0, 1}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .losses import ContrastViewSet, VoxelGeometry, blood_volume

__all__ = [
    "DataError",
    "SegVolume",
    "read_segvol",
    "write_segvol",
    "write_dataset",
    "load_dataset",
    "SynthSpec",
    "generate_synthetic",
    "AUGMENTATIONS",
    "augment",
    "adjust_contrast",
    "hflip",
    "elastic",
    "make_views",
    "view_weight",
]

IMAGE_DTYPE = np.dtype("<f4")
MASK_DTYPE = np.dtype("u1")
INDEX_FILE = "index.json"


class DataError(ValueError):
    """Malformed or inconsistent data on disk or in memory."""


@dataclass
class SegVolume:
    image: np.ndarray  # (S, H, W) float32 in [0, 1]
    mask: np.ndarray  # (S, H, W) uint8 in {0, 1}
    geom: VoxelGeometry
    patient_id: str

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 3:
            raise DataError(f"image must be (S, H, W), got shape {self.image.shape}")
        if self.image.shape != self.mask.shape:
            raise DataError(f"image {self.image.shape} and mask {self.mask.shape} differ")
        if self.mask.size and not np.isin(self.mask, (0, 1)).all():
            raise DataError("mask must be binary")
        if not np.isfinite(self.image).all():
            raise DataError("image contains non-finite values")
        self.mask = self.mask.astype(np.uint8)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.image.shape)

    def annotated_ml(self) -> float:
        return blood_volume(self.mask, self.geom)


def write_segvol(vol: SegVolume, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "patient_id": vol.patient_id,
        "shape": list(vol.shape),
        "image_dtype": "f32le",
        "mask_dtype": "u8",
        "slice_thickness_mm": float(vol.geom.slice_thickness),
        "pixel_spacing_mm": [float(vol.geom.pixel_height), float(vol.geom.pixel_width)],
    }
    (path / "image.raw").write_bytes(np.ascontiguousarray(vol.image, dtype=IMAGE_DTYPE).tobytes())
    (path / "mask.raw").write_bytes(np.ascontiguousarray(vol.mask, dtype=MASK_DTYPE).tobytes())
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def read_segvol(path) -> SegVolume:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: missing meta.json") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}/meta.json: {e}") from None
    if meta.get("image_dtype") != "f32le" or meta.get("mask_dtype") != "u8":
        raise DataError(f"{path}: unsupported dtypes {meta.get('image_dtype')}/{meta.get('mask_dtype')}")
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 3:
        raise DataError(f"{path}: shape must have 3 entries")
    n = int(np.prod(shape))
    img_bytes = _read_raw(path / "image.raw")
    mask_bytes = _read_raw(path / "mask.raw")
    if len(img_bytes) != n * IMAGE_DTYPE.itemsize:
        raise DataError(f"{path}/image.raw: expected {n * IMAGE_DTYPE.itemsize} bytes, found {len(img_bytes)}")
    if len(mask_bytes) != n:
        raise DataError(f"{path}/mask.raw: expected {n} bytes, found {len(mask_bytes)}")
    mask = np.frombuffer(mask_bytes, dtype=MASK_DTYPE).reshape(shape)
    if mask.size and mask.max() > 1:
        raise DataError(f"{path}/mask.raw: non-binary value {int(mask.max())}")
    image = np.frombuffer(img_bytes, dtype=IMAGE_DTYPE).reshape(shape).astype(np.float32)
    ph, pw = meta["pixel_spacing_mm"]
    geom = VoxelGeometry(float(meta["slice_thickness_mm"]), float(ph), float(pw))
    return SegVolume(image, mask.copy(), geom, str(meta["patient_id"]))


def _read_raw(p: Path) -> bytes:
    try:
        return p.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing {p}") from None


def write_dataset(volumes: Sequence[SegVolume], out_dir, extra: Optional[dict] = None) -> Path:
    """One subdirectory per patient plus ``index.json`` listing ids in order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for v in volumes:
        write_segvol(v, out / v.patient_id)
    index = {"patients": [v.patient_id for v in volumes]}
    if extra:
        index.update(extra)
    (out / INDEX_FILE).write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path, ids: Optional[Iterable[str]] = None) -> List[SegVolume]:
    path = Path(path)
    idx = path / INDEX_FILE
    if not idx.exists():
        raise DataError(f"{path}: no {INDEX_FILE}")
    listed = json.loads(idx.read_text())["patients"]
    if ids is not None:
        wanted = set(ids)
        listed = [p for p in listed if p in wanted]
    return [read_segvol(path / pid) for pid in listed]


# --------------------------------------------------------------------------
# synthetic cohort


@dataclass
class SynthSpec:
    """Parameters of a synthetic cohort.

    Intensities are on the normalised [0, 1] scale. Each patient's target
    volume is drawn uniformly from ``volume_ml``; the mask is then the
    ``n`` brightest voxels of a sum of Gaussian blobs restricted to the
    brain, with ``n`` the voxel count of that target.
    """

    patient_count: int = 6
    slices: int = 8
    image_size: Tuple[int, int] = (64, 64)
    blob_count: Tuple[int, int] = (2, 5)
    blob_radius_px: Tuple[float, float] = (2.0, 5.0)
    volume_ml: Tuple[float, float] = (10.0, 250.0)
    brain_intensity: float = 0.45
    csf_intensity: float = 0.2
    contrast: float = 0.35
    noise: float = 0.02
    slice_thickness_mm: float = 5.0
    pixel_spacing_mm: Tuple[float, float] = (3.0, 3.0)
    max_fill: float = 0.6
    seed: int = 0
    id_prefix: str = "synth"

    def __post_init__(self) -> None:
        self.image_size = tuple(int(v) for v in self.image_size)
        self.blob_count = tuple(int(v) for v in self.blob_count)
        self.blob_radius_px = tuple(float(v) for v in self.blob_radius_px)
        self.volume_ml = tuple(float(v) for v in self.volume_ml)
        self.pixel_spacing_mm = tuple(float(v) for v in self.pixel_spacing_mm)

    @property
    def geometry(self) -> VoxelGeometry:
        return VoxelGeometry(self.slice_thickness_mm, *self.pixel_spacing_mm)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


def _brain_mask(H: int, W: int, S: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    cy, cx = (H - 1) / 2, (W - 1) / 2
    out = np.zeros((S, H, W), dtype=bool)
    for s in range(S):
        # brain shrinks toward the ends of the stack
        t = 1.0 - 0.25 * abs(2 * s / max(S - 1, 1) - 1) ** 2
        ry, rx = 0.44 * H * t, 0.36 * W * t
        out[s] = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return out


def _validate_synth(spec: SynthSpec) -> None:
    H, W = spec.image_size
    if spec.patient_count < 1 or spec.slices < 1:
        raise ValueError("patient_count and slices must be >= 1")
    if H % 4 or W % 4 or H < 8 or W < 8:
        raise ValueError(f"image_size must be divisible by 4 and >= 8, got {spec.image_size}")
    lo, hi = spec.blob_count
    if lo < 1 or hi < lo:
        raise ValueError("blob_count must satisfy 1 <= lo <= hi (every patient has hemorrhage)")
    rlo, rhi = spec.blob_radius_px
    if rlo <= 0 or rhi < rlo:
        raise ValueError("blob_radius_px must satisfy 0 < lo <= hi")
    vlo, vhi = spec.volume_ml
    if not (0 < vlo <= vhi <= 300):
        raise ValueError("volume_ml must lie within (0, 300]")
    if not (0 < spec.max_fill <= 1):
        raise ValueError("max_fill must be in (0, 1]")
    brain_px = int(_brain_mask(H, W, spec.slices).sum())
    max_ml = brain_px * spec.max_fill * spec.geometry.voxel_mm3 / 1000
    if vhi > max_ml:
        raise ValueError(
            f"infeasible volume range: {vhi} mL needs more than {spec.max_fill:.0%} of the "
            f"{brain_px} brain voxels ({max_ml:.1f} mL available)"
        )
    min_ml = spec.geometry.voxel_mm3 / 1000
    if vlo < min_ml:
        raise ValueError(f"volume_ml lower bound below one voxel ({min_ml} mL)")


def _one_patient(spec: SynthSpec, rng: np.random.Generator, pid: str) -> SegVolume:
    S, (H, W) = spec.slices, spec.image_size
    geom = spec.geometry
    brain = _brain_mask(H, W, S)
    target_ml = rng.uniform(*spec.volume_ml)
    n_target = max(1, int(round(target_ml * 1000 / geom.voxel_mm3)))

    # blob field: Gaussian bumps centred inside the brain, spread in z
    zz, yy, xx = np.mgrid[0:S, 0:H, 0:W].astype(np.float64)
    field_ = np.zeros((S, H, W))
    inside = np.argwhere(brain)
    n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    for _ in range(n_blobs):
        cz, cy, cx = inside[rng.integers(len(inside))]
        r = rng.uniform(*spec.blob_radius_px)
        rz = max(r * geom.pixel_height / geom.slice_thickness, 0.75)
        field_ += np.exp(-0.5 * (((yy - cy) / r) ** 2 + ((xx - cx) / r) ** 2 + ((zz - cz) / rz) ** 2))
    field_ += 1e-3 * gaussian_filter(rng.standard_normal((S, H, W)), 1.5)
    field_[~brain] = -np.inf
    order = np.argsort(field_, axis=None, kind="stable")[::-1][:n_target]
    mask = np.zeros(S * H * W, dtype=np.uint8)
    mask[order] = 1
    mask = mask.reshape(S, H, W)

    # intensities: brain, two darker ventricles, bright blood, noise
    image = np.zeros((S, H, W))
    image[brain] = spec.brain_intensity
    cy, cx = (H - 1) / 2, (W - 1) / 2
    for side in (-1, 1):
        vy, vx = cy + rng.uniform(-0.05, 0.05) * H, cx + side * 0.1 * W
        vent = ((yy - vy) / (0.14 * H)) ** 2 + ((xx - vx) / (0.05 * W)) ** 2 <= 1.0
        image[vent & brain] = spec.csf_intensity
    image[mask.astype(bool)] = spec.brain_intensity + spec.contrast
    image += spec.noise * rng.standard_normal((S, H, W))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegVolume(image, mask, geom, pid)


def generate_synthetic(spec: SynthSpec) -> List[SegVolume]:
    """Deterministic cohort of ``spec.patient_count`` volumes."""
    _validate_synth(spec)
    root = np.random.SeedSequence(spec.seed)
    out = []
    for j, child in enumerate(root.spawn(spec.patient_count)):
        rng = np.random.default_rng(child)
        out.append(_one_patient(spec, rng, f"{spec.id_prefix}{j:03d}"))
    return out


# --------------------------------------------------------------------------
# augmentation

AUGMENTATIONS = ("contrast", "hflip", "elastic")


def adjust_contrast(image: np.ndarray, gamma: float) -> np.ndarray:
    """Monotone gamma remap of a [0, 1] image."""
    img = np.clip(image, 0.0, 1.0)
    if gamma == 1.0:
        return img.astype(np.float32)
    return np.power(img, gamma).astype(np.float32)


def hflip(image: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return image[..., ::-1].copy(), mask[..., ::-1].copy()


def elastic(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    alpha: float = 30.0,
    sigma: float = 4.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Smooth random displacement per slice: bilinear for the image, nearest for the mask.

    ``alpha`` scales the Gaussian-smoothed (``sigma`` px) uniform noise field.
    """
    S, H, W = image.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img_out = np.empty_like(image, dtype=np.float32)
    mask_out = np.empty_like(mask)
    for s in range(S):
        dy = gaussian_filter(rng.uniform(-1, 1, (H, W)), sigma, mode="constant") * alpha
        dx = gaussian_filter(rng.uniform(-1, 1, (H, W)), sigma, mode="constant") * alpha
        coords = np.stack([yy + dy, xx + dx])
        img_out[s] = map_coordinates(image[s].astype(np.float64), coords, order=1, mode="reflect")
        mask_out[s] = map_coordinates(mask[s], coords, order=0, mode="constant", cval=0)
    return img_out, mask_out


def augment(
    vol: SegVolume,
    kinds: Iterable[str],
    seed: int,
    gamma_range: Tuple[float, float] = (0.7, 1.4),
    flip_prob: float = 0.5,
    elastic_alpha: float = 30.0,
    elastic_sigma: float = 4.0,
) -> SegVolume:
    """Apply contrast, flip and/or elastic deformation; returns a new volume.

    Order is elastic, flip, contrast. Contrast only touches the image.
    """
    kinds = set(kinds)
    unknown = kinds - set(AUGMENTATIONS)
    if unknown:
        raise ValueError(f"unknown augmentation(s) {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    image, mask = vol.image, vol.mask
    # draw every variate even when unused so each kind sees the same stream
    gamma = float(rng.uniform(*gamma_range))
    flip = bool(rng.random() < flip_prob)
    el_rng = np.random.default_rng(rng.integers(2**63))
    if "elastic" in kinds:
        image, mask = elastic(image, mask, el_rng, elastic_alpha, elastic_sigma)
    if "hflip" in kinds and flip:
        image, mask = hflip(image, mask)
    if "contrast" in kinds:
        image = adjust_contrast(image, gamma)
    return SegVolume(np.array(image, dtype=np.float32), np.array(mask), vol.geom, vol.patient_id)


def view_weight(distortion: float) -> float:
    return 1.0 / (1.0 + distortion)


def make_views(image, n_views: int = 3, seed: int = 0, max_offset: float = 0.3) -> ContrastViewSet:
    """Reference image plus ``n_views - 1`` gamma-perturbed copies.

    View ``i`` uses gamma offset ``d_i = max_offset * i / (n_views - 1)``
    with a random sign and weight ``1 / (1 + d_i)``. Works on numpy arrays
    and torch tensors alike.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng(seed)
    views, weights, dist = [image], [1.0], [0.0]
    for i in range(1, n_views):
        d = max_offset * i / (n_views - 1)
        gamma = 1.0 + d if rng.random() < 0.5 else 1.0 - d
        views.append(image.clip(0.0, 1.0) ** gamma)
        weights.append(view_weight(d))
        dist.append(d)
    return ContrastViewSet(views, weights, dist)
