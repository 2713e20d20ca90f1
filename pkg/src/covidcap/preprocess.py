"""CT preprocessing: resampling, intensity windowing, lung masking and the
canonical 138x256x256 training grid."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import ClassLabel, ScanRecord, infection_ratio
from .volumes import Volume, load_volume, save_volume

WINDOW_LOW_HU = -1350.0
WINDOW_HIGH_HU = 150.0

# (z, y, x) in mm and voxels.
DEFAULT_SPACING = (1.25, 0.7168, 0.7168)
DEFAULT_SHAPE = (138, 256, 256)


@dataclass(frozen=True)
class PreprocessConfig:
    """Target spacing (mm) and final grid shape, both ordered (z, y, x)."""

    target_spacing: tuple[float, float, float] = DEFAULT_SPACING
    target_shape: tuple[int, int, int] = DEFAULT_SHAPE

    def __post_init__(self) -> None:
        if len(self.target_spacing) != 3 or any(s <= 0 for s in self.target_spacing):
            raise ValueError(f"target_spacing must be three positive floats: {self.target_spacing}")
        if len(self.target_shape) != 3 or any(int(d) < 1 for d in self.target_shape):
            raise ValueError(f"target_shape must be three positive ints: {self.target_shape}")

    def cache_key(self) -> str:
        payload = json.dumps(
            {"spacing": list(self.target_spacing), "shape": list(self.target_shape)},
            sort_keys=True,
        )
        return hashlib.sha1(payload.encode()).hexdigest()[:10]


@dataclass
class PreprocessedSample:
    """A scan on the canonical grid, ready for training.

    ``image`` is float32 in [0, 1] with voxels outside the lung exactly 0;
    ``lung_mask``/``infection_mask`` are uint8 on the same grid. ``ratio`` is
    the infected lung fraction measured at the resampled (pre-downscale)
    resolution.
    """

    scan_id: str
    label: ClassLabel
    image: Volume
    lung_mask: Volume
    infection_mask: Volume
    ratio: float


def _interpolate(grid: np.ndarray, size: tuple[int, int, int], mode: str) -> np.ndarray:
    """Resize a 3D array with torch.  ``mode`` is 'trilinear' or 'nearest'."""
    src = torch.from_numpy(np.ascontiguousarray(grid, dtype=np.float32))
    src = src[None, None]
    if mode == "trilinear":
        out = F.interpolate(src, size=size, mode="trilinear", align_corners=False)
    elif mode == "nearest":
        out = F.interpolate(src, size=size, mode="nearest-exact")
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    return out[0, 0].numpy()


def resample(
    volume: Volume,
    target_spacing: tuple[float, float, float],
    mode: str = "trilinear",
) -> Volume:
    """Resample onto an isotropic-per-axis grid with the given spacing.

    Output dimensions are ``round(dim * spacing / target_spacing)`` per axis
    (at least 1).  Use ``mode='nearest'`` for label masks.
    """
    if len(target_spacing) != 3 or any(s <= 0 for s in target_spacing):
        raise ValueError(f"target_spacing must be three positive floats: {target_spacing}")
    out_shape = tuple(
        max(1, int(round(d * s_in / s_out)))
        for d, s_in, s_out in zip(volume.shape, volume.spacing, target_spacing)
    )
    spacing = tuple(float(s) for s in target_spacing)
    if out_shape == volume.shape:
        return Volume(grid=volume.grid.copy(), spacing=spacing)
    out = _interpolate(volume.grid, out_shape, mode)
    if mode == "nearest":
        out = out.astype(volume.grid.dtype)
    return Volume(grid=out, spacing=spacing)


def window_normalize(volume: Volume) -> Volume:
    """Clamp HU to [-1350, 150] and rescale linearly to [0, 1] (float32)."""
    grid = np.clip(volume.grid.astype(np.float32), WINDOW_LOW_HU, WINDOW_HIGH_HU)
    grid = (grid - WINDOW_LOW_HU) / (WINDOW_HIGH_HU - WINDOW_LOW_HU)
    return Volume(grid=grid, spacing=volume.spacing)


def apply_lung_mask(volume: Volume, lung_mask: Volume) -> Volume:
    """Zero every voxel outside the lung mask."""
    if volume.shape != lung_mask.shape:
        raise ValueError(f"volume/mask shapes differ: {volume.shape} vs {lung_mask.shape}")
    keep = lung_mask.grid > 0
    return Volume(grid=volume.grid * keep.astype(volume.grid.dtype), spacing=volume.spacing)


def downscale_pad(
    volume: Volume,
    target_shape: tuple[int, int, int] = DEFAULT_SHAPE,
    mode: str = "trilinear",
) -> Volume:
    """Uniformly shrink (never enlarge) to fit inside ``target_shape``, then
    zero-pad symmetrically to exactly that shape.

    A single scale factor ``s = min(1, min(target/dim))`` is shared by all
    axes so anatomy keeps its aspect ratio; padding splits floor-before,
    ceil-after.
    """
    if len(target_shape) != 3 or any(int(d) < 1 for d in target_shape):
        raise ValueError(f"target_shape must be three positive ints: {target_shape}")
    scale = min(1.0, *(t / d for t, d in zip(target_shape, volume.shape)))
    content = tuple(max(1, int(round(d * scale))) for d in volume.shape)
    if content == volume.shape:
        grid = volume.grid
    else:
        grid = _interpolate(volume.grid, content, mode)
        if mode == "nearest":
            grid = grid.astype(volume.grid.dtype)
    pads = []
    for t, c in zip(target_shape, content):
        before = (t - c) // 2
        pads.append((before, t - c - before))
    out = np.pad(grid, pads, mode="constant", constant_values=0)
    spacing = tuple(s * d / c for s, d, c in zip(volume.spacing, volume.shape, content))
    return Volume(grid=out, spacing=spacing)


def preprocess_record(
    record: ScanRecord, config: PreprocessConfig = PreprocessConfig()
) -> PreprocessedSample:
    """Run the full pipeline for one scan.

    Order: resample image (trilinear) and masks (nearest) to the target
    spacing; window-normalize; zero outside the lung; downscale-and-pad
    everything onto the canonical grid.  The infection ratio is measured on
    the resampled masks, before downscaling.
    """
    image = load_volume(record.volume_path)
    lung = load_volume(record.lung_mask_path)
    infection = load_volume(record.infection_mask_path)
    if lung.shape != image.shape or infection.shape != image.shape:
        raise ValueError(
            f"{record.scan_id}: mask shapes {lung.shape}/{infection.shape} "
            f"do not match image shape {image.shape}"
        )

    image = resample(image, config.target_spacing, mode="trilinear")
    lung = resample(lung, config.target_spacing, mode="nearest")
    infection = resample(infection, config.target_spacing, mode="nearest")
    if np.count_nonzero(lung.grid) == 0:
        raise ValueError(f"{record.scan_id}: lung mask is empty after resampling")
    ratio = infection_ratio(infection.grid, lung.grid)

    image = window_normalize(image)
    image = apply_lung_mask(image, lung)
    image = downscale_pad(image, config.target_shape, mode="trilinear")
    lung = downscale_pad(lung, config.target_shape, mode="nearest")
    infection = downscale_pad(infection, config.target_shape, mode="nearest")
    # Trilinear downscaling bleeds intensity across the lung border; re-mask
    # so voxels outside the transformed lung are exactly zero.
    image = apply_lung_mask(image, lung)

    return PreprocessedSample(
        scan_id=record.scan_id,
        label=record.class_label,
        image=image,
        lung_mask=Volume(lung.grid.astype(np.uint8), lung.spacing),
        infection_mask=Volume(infection.grid.astype(np.uint8), infection.spacing),
        ratio=ratio,
    )


def _cache_paths(cache_dir: Path, key: str, scan_id: str) -> dict[str, Path]:
    stem = cache_dir / key / scan_id
    return {
        "image": stem.with_name(stem.name + "_image.nii.gz"),
        "lung": stem.with_name(stem.name + "_lung.nii.gz"),
        "infection": stem.with_name(stem.name + "_infection.nii.gz"),
        "meta": stem.with_name(stem.name + "_meta.json"),
    }


def load_or_preprocess(
    record: ScanRecord,
    config: PreprocessConfig = PreprocessConfig(),
    cache_dir: str | Path | None = None,
) -> PreprocessedSample:
    """Preprocess one scan, reading/writing a NIfTI + JSON sidecar cache."""
    if cache_dir is None:
        return preprocess_record(record, config)
    paths = _cache_paths(Path(cache_dir), config.cache_key(), record.scan_id)
    if all(p.exists() for p in paths.values()):
        with open(paths["meta"], "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        return PreprocessedSample(
            scan_id=meta["scan_id"],
            label=ClassLabel(meta["label"]),
            image=load_volume(paths["image"]),
            lung_mask=load_volume(paths["lung"]),
            infection_mask=load_volume(paths["infection"]),
            ratio=float(meta["ratio"]),
        )
    sample = preprocess_record(record, config)
    paths["image"].parent.mkdir(parents=True, exist_ok=True)
    save_volume(sample.image, paths["image"])
    save_volume(sample.lung_mask, paths["lung"])
    save_volume(sample.infection_mask, paths["infection"])
    meta = {"scan_id": sample.scan_id, "label": sample.label.value, "ratio": sample.ratio}
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        json.dump(meta, fh)
    return sample
