"""Synthetic chest CT phantoms: two textured lungs inside a soft-tissue body,
with class-dependent infection blobs of a controllable size."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import ClassLabel, Manifest, ScanRecord, save_manifest
from .volumes import Volume, save_volume

AIR_HU = -1000.0
BODY_HU = 40.0
LUNG_HU = -850.0
COVID_HU = (-700.0, -500.0)  # many peripheral, high-frequency blobs
CAP_HU = (-300.0, -100.0)  # one central, low-frequency region

# Parenchyma texture: a patchy smooth field plus per-voxel speckle.  The
# amplitudes are chosen so the dimmest (COVID-like) infections sit only a few
# noise standard deviations above the background — visible, but not free.
LUNG_NOISE_SMOOTH_HU = 90.0
LUNG_NOISE_FINE_HU = 70.0

# Every lung also carries a handful of small bright clutter blobs
# (vessel-section/atelectasis-band stand-ins) drawn from the same intensity
# range as CAP consolidations.  A small bright spot is therefore never by
# itself diagnostic; only its being the one deep consolidation (or simply
# being large) is.
CLUTTER_HU = CAP_HU
CLUTTER_COUNT = (8, 14)  # blobs per phantom, inclusive range
CLUTTER_RATIO = (0.00015, 0.0009)  # per-blob size as a fraction of lung voxels

DEFAULT_PHANTOM_SPACING = (2.5, 1.4336, 1.4336)


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one phantom: geometry, class, infection size and seed."""

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    class_label: ClassLabel
    target_ratio: float
    texture_seed: int

    def __post_init__(self) -> None:
        if len(self.shape) != 3 or any(int(d) < 16 for d in self.shape):
            raise ValueError(f"phantom shape must be at least 16 per axis, got {self.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")
        if not 0.0 <= self.target_ratio < 0.9:
            raise ValueError(f"target_ratio must be in [0, 0.9), got {self.target_ratio}")


@dataclass(frozen=True)
class RatioLaw:
    """Per-class distribution of target infection ratios.

    Each class mixes over (lo, hi) bands with the given probabilities and
    draws log-uniformly inside the chosen band.  Bands need not be contiguous.
    The defaults skew COVID toward large infections with a small minority of
    very small ones, and CAP toward very small infections — the clinical size
    imbalance the size-balanced sampler exists to fix.
    """

    covid_bands: tuple[tuple[float, float], ...] = (
        (0.0004, 0.001),
        (0.005, 0.030),
        (0.030, 0.20),
    )
    covid_probs: tuple[float, ...] = (0.30, 0.05, 0.65)
    cap_bands: tuple[tuple[float, float], ...] = (
        (0.0004, 0.001),
        (0.002, 0.030),
        (0.030, 0.10),
    )
    cap_probs: tuple[float, ...] = (0.65, 0.25, 0.10)

    def __post_init__(self) -> None:
        for bands, probs in ((self.covid_bands, self.covid_probs), (self.cap_bands, self.cap_probs)):
            if len(bands) != len(probs):
                raise ValueError("one probability per band is required")
            if abs(sum(probs) - 1.0) > 1e-9 or any(p < 0 for p in probs):
                raise ValueError(f"band probabilities must be >= 0 and sum to 1, got {probs}")
            for lo, hi in bands:
                if not 0 < lo < hi:
                    raise ValueError(f"bad band ({lo}, {hi})")

    def sample(self, label: ClassLabel, rng: np.random.Generator) -> float:
        bands, probs = (
            (self.covid_bands, self.covid_probs)
            if label is ClassLabel.COVID
            else (self.cap_bands, self.cap_probs)
        )
        lo, hi = bands[rng.choice(len(bands), p=np.asarray(probs, dtype=float))]
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma)
    std = field.std()
    return field / std if std > 0 else field


def _paint_smooth(field: np.ndarray, inside: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map a smooth field's values over ``inside`` voxels onto [lo, hi]."""
    patch = field[inside]
    span = patch.max() - patch.min()
    unit = (patch - patch.min()) / span if span > 0 else np.full_like(patch, 0.5)
    return lo + unit * (hi - lo)


def _nearest_lung_voxels(
    coords: np.ndarray, seeds: np.ndarray, spacing, count: int
) -> np.ndarray:
    """Indices (into coords) of the ``count`` lung voxels closest to any seed."""
    deltas = (coords[:, None, :] - seeds[None, :, :]) * np.asarray(spacing)
    dist = np.sqrt((deltas**2).sum(axis=2)).min(axis=1)
    return np.argpartition(dist, count - 1)[:count]


def _chest_geometry(shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Boolean body and lung masks (two ellipsoids inside an ellipsoidal torso)."""
    nz, ny, nx = shape
    z, y, x = np.ogrid[:nz, :ny, :nx]
    zc, yc = (nz - 1) / 2, (ny - 1) / 2

    def ellipsoid(xc, semi):
        az, ay, ax = semi
        return (
            ((z - zc) / az) ** 2 + ((y - yc) / ay) ** 2 + ((x - xc) / ax) ** 2
        ) <= 1.0

    body = ellipsoid((nx - 1) / 2, (0.48 * nz, 0.45 * ny, 0.48 * nx))
    lungs = ellipsoid(0.30 * (nx - 1), (0.40 * nz, 0.35 * ny, 0.17 * nx)) | ellipsoid(
        0.70 * (nx - 1), (0.40 * nz, 0.35 * ny, 0.17 * nx)
    )
    return body, lungs & body


def _infection_mask(
    spec: PhantomSpec, lung: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Grow blobs from class-dependent seed points until the target voxel
    count is reached exactly (n nearest lung voxels to any seed)."""
    n_lung = int(np.count_nonzero(lung))
    n_target = int(round(spec.target_ratio * n_lung))
    mask = np.zeros(spec.shape, dtype=np.uint8)
    if spec.target_ratio == 0.0:
        return mask
    achieved = n_target / n_lung
    if n_target == 0 or abs(achieved - spec.target_ratio) > 0.2 * spec.target_ratio:
        raise ValueError(
            f"target_ratio {spec.target_ratio:.6f} is infeasible at shape {spec.shape}: "
            f"nearest achievable is {achieved:.6f}"
        )

    depth = ndimage.distance_transform_edt(lung, sampling=spec.spacing)
    coords = np.argwhere(lung)
    depths = depth[lung]
    if spec.class_label is ClassLabel.COVID:
        # Several seeds in the shallow (peripheral) third of the lung.
        shell = depths <= np.quantile(depths, 0.35)
        candidates = coords[shell]
        n_seeds = int(rng.integers(3, 6))
        seeds = candidates[rng.choice(len(candidates), size=n_seeds, replace=False)]
    else:
        # One seed near the deepest (most central) point.
        order = np.argsort(depths)
        central = coords[order[-max(1, len(order) // 50) :]]
        seeds = central[rng.choice(len(central), size=1)]

    chosen = _nearest_lung_voxels(coords, seeds, spec.spacing, n_target)
    mask[tuple(coords[chosen].T)] = 1
    return mask


def _clutter_mask(
    shape: tuple[int, int, int],
    spacing: tuple[float, float, float],
    lung: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Small bright blobs scattered through the lung (present in every class)."""
    coords = np.argwhere(lung)
    n_lung = len(coords)
    mask = np.zeros(shape, dtype=bool)
    n_blobs = int(rng.integers(CLUTTER_COUNT[0], CLUTTER_COUNT[1] + 1))
    lo, hi = np.log(CLUTTER_RATIO[0]), np.log(CLUTTER_RATIO[1])
    for _ in range(n_blobs):
        size = max(2, int(round(n_lung * np.exp(rng.uniform(lo, hi)))))
        seed = coords[rng.integers(n_lung)][None, :]
        chosen = _nearest_lung_voxels(coords, seed, spacing, min(size, n_lung))
        mask[tuple(coords[chosen].T)] = True
    return mask


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Volume, Volume]:
    """Render one phantom; returns (image HU, lung mask, infection mask).

    Deterministic for a fixed spec.  COVID infections are several peripheral
    high-frequency blobs in [-700, -500] HU; CAP is a single central
    low-frequency region in [-300, -100] HU; both lie inside the lung.  Every
    lung additionally carries small bright clutter blobs (in both classes)
    that are not part of the infection mask.
    """
    rng = np.random.default_rng(spec.texture_seed)
    body, lung = _chest_geometry(spec.shape)

    image = np.full(spec.shape, AIR_HU, dtype=np.float32)
    image[body] = BODY_HU + 15.0 * _smooth_noise(rng, spec.shape, sigma=3.0)[body]
    parenchyma = (
        LUNG_HU
        + LUNG_NOISE_SMOOTH_HU * _smooth_noise(rng, spec.shape, sigma=2.0)
        + LUNG_NOISE_FINE_HU * rng.standard_normal(spec.shape)
    )
    image[lung] = parenchyma[lung]

    consolidation_field = _smooth_noise(rng, spec.shape, sigma=3.0)
    clutter = _clutter_mask(spec.shape, spec.spacing, lung, rng)
    if clutter.any():
        image[clutter] = _paint_smooth(consolidation_field, clutter, *CLUTTER_HU)

    infection = _infection_mask(spec, lung, rng)
    inside = infection > 0
    if inside.any():
        if spec.class_label is ClassLabel.COVID:
            lo, hi = COVID_HU
            values = rng.uniform(lo, hi, size=int(inside.sum()))
        else:
            values = _paint_smooth(consolidation_field, inside, *CAP_HU)
        image[inside] = values

    spacing = spec.spacing
    return (
        Volume(image.astype(np.float32), spacing),
        Volume(lung.astype(np.uint8), spacing),
        Volume(infection, spacing),
    )


def generate_dataset(
    n_covid: int,
    n_cap: int,
    out_dir: str | Path,
    ratio_law: RatioLaw = RatioLaw(),
    seed: int = 0,
    shape: tuple[int, int, int] = (69, 128, 128),
    spacing: tuple[float, float, float] = DEFAULT_PHANTOM_SPACING,
) -> Manifest:
    """Write a phantom dataset (NIfTI volumes + JSONL manifest) to ``out_dir``.

    Each phantom gets its own patient id and a seed derived from ``seed`` and
    its index, so regeneration is reproducible scan by scan.
    """
    if n_covid < 0 or n_cap < 0 or n_covid + n_cap == 0:
        raise ValueError("empty manifest: need at least one phantom")
    out_dir = Path(out_dir)
    scans_dir = out_dir / "scans"
    scans_dir.mkdir(parents=True, exist_ok=True)

    labels = [ClassLabel.COVID] * n_covid + [ClassLabel.CAP] * n_cap
    children = np.random.SeedSequence(seed).spawn(len(labels))
    records: list[ScanRecord] = []
    for i, (label, child) in enumerate(zip(labels, children)):
        rng = np.random.default_rng(child)
        target = ratio_law.sample(label, rng)
        spec = PhantomSpec(
            shape=tuple(shape),
            spacing=tuple(spacing),
            class_label=label,
            target_ratio=target,
            texture_seed=int(rng.integers(2**63)),
        )
        image, lung, infection = generate_phantom(spec)
        scan_id = f"{label.value.lower()}_{i:04d}"
        paths = {
            "volume": scans_dir / f"{scan_id}_volume.nii.gz",
            "lung": scans_dir / f"{scan_id}_lung.nii.gz",
            "infection": scans_dir / f"{scan_id}_infection.nii.gz",
        }
        save_volume(image, paths["volume"])
        save_volume(lung, paths["lung"])
        save_volume(infection, paths["infection"])
        ratio = int(np.count_nonzero(infection.grid)) / int(np.count_nonzero(lung.grid))
        records.append(
            ScanRecord(
                scan_id=scan_id,
                patient_id=f"P{i:04d}",
                class_label=label,
                volume_path=str(paths["volume"]),
                lung_mask_path=str(paths["lung"]),
                infection_mask_path=str(paths["infection"]),
                infection_ratio=ratio,
            )
        )

    manifest = Manifest(records=records, split_tag="all")
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
