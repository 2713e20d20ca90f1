"""Dataset manifests, scan records and the size/severity grouping rules."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np


class ClassLabel(Enum):
    COVID = "COVID"
    CAP = "CAP"


class SamplingGroup(Enum):
    """Training groups for the size-balanced sampler."""

    COVID_SMALL = "covid_small"
    COVID_LARGE = "covid_large"
    CAP_SMALL = "cap_small"
    CAP_LARGE = "cap_large"


class EvalGroup(Enum):
    """Infection-size bands used for group-wise evaluation."""

    LOW = "low"
    MID = "mid"
    HIGH = "high"


# A COVID scan counts as small-infection below this lung fraction; a CAP scan
# counts as large-infection above the second threshold.
COVID_SMALL_BELOW = 0.030
CAP_LARGE_ABOVE = 0.001

# Evaluation bands: [0, 0.005), [0.005, 0.030], (0.030, 1].
EVAL_LOW_BELOW = 0.005
EVAL_HIGH_ABOVE = 0.030

_MANIFEST_KEYS = {
    "scan_id",
    "patient_id",
    "class_label",
    "volume_path",
    "lung_mask_path",
    "infection_mask_path",
    "infection_ratio",
}


@dataclass
class ScanRecord:
    """One CT scan: file locations plus label and cached infection ratio.

    Paths are absolute once loaded; ``infection_ratio`` is the infected
    fraction of the lung volume, or None when not yet computed.
    """

    scan_id: str
    patient_id: str
    class_label: ClassLabel
    volume_path: str
    lung_mask_path: str
    infection_mask_path: str
    infection_ratio: float | None = None

    def __post_init__(self) -> None:
        if not self.scan_id:
            raise ValueError("scan_id must be non-empty")
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        if self.infection_ratio is not None:
            r = float(self.infection_ratio)
            if not np.isfinite(r) or r < 0:
                raise ValueError(f"infection_ratio must be >= 0, got {r}")
            self.infection_ratio = r


@dataclass
class Manifest:
    """An ordered collection of scan records with a split tag."""

    records: list[ScanRecord]
    split_tag: str = "all"

    def __post_init__(self) -> None:
        if not self.records:
            raise ValueError("empty manifest")
        seen: set[str] = set()
        for rec in self.records:
            if rec.scan_id in seen:
                raise ValueError(f"duplicate scan_id {rec.scan_id!r}")
            seen.add(rec.scan_id)

    def __len__(self) -> int:
        return len(self.records)

    def patient_ids(self) -> set[str]:
        return {r.patient_id for r in self.records}


def load_manifest(path: str | Path, split_tag: str = "all") -> Manifest:
    """Load a JSONL manifest; relative paths resolve against its directory.

    Raises ValueError naming the offending line for malformed rows, and for
    empty manifests or duplicate scan ids.
    """
    path = Path(path)
    base = path.parent
    records: list[ScanRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: manifest line {lineno}: invalid JSON ({exc})") from exc
            if not isinstance(row, dict):
                raise ValueError(f"{path}: manifest line {lineno}: expected an object")
            missing = _MANIFEST_KEYS - row.keys()
            if missing:
                raise ValueError(
                    f"{path}: manifest line {lineno}: missing keys {sorted(missing)}"
                )
            try:
                label = ClassLabel(row["class_label"])
            except ValueError:
                raise ValueError(
                    f"{path}: manifest line {lineno}: class_label must be 'COVID' or 'CAP', "
                    f"got {row['class_label']!r}"
                ) from None
            ratio = row["infection_ratio"]
            if ratio is not None and not isinstance(ratio, (int, float)):
                raise ValueError(
                    f"{path}: manifest line {lineno}: infection_ratio must be a number or null"
                )
            try:
                rec = ScanRecord(
                    scan_id=str(row["scan_id"]),
                    patient_id=str(row["patient_id"]),
                    class_label=label,
                    volume_path=str(base / row["volume_path"]),
                    lung_mask_path=str(base / row["lung_mask_path"]),
                    infection_mask_path=str(base / row["infection_mask_path"]),
                    infection_ratio=ratio,
                )
            except ValueError as exc:
                raise ValueError(f"{path}: manifest line {lineno}: {exc}") from exc
            records.append(rec)
    if not records:
        raise ValueError(f"{path}: empty manifest")
    return Manifest(records=records, split_tag=split_tag)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest as JSONL, with paths relative to the output directory."""
    path = Path(path)
    base = path.parent
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            row = {
                "scan_id": rec.scan_id,
                "patient_id": rec.patient_id,
                "class_label": rec.class_label.value,
                "volume_path": os.path.relpath(rec.volume_path, base),
                "lung_mask_path": os.path.relpath(rec.lung_mask_path, base),
                "infection_mask_path": os.path.relpath(rec.infection_mask_path, base),
                "infection_ratio": rec.infection_ratio,
            }
            fh.write(json.dumps(row) + "\n")


def infection_ratio(infection_mask: np.ndarray, lung_mask: np.ndarray) -> float:
    """Fraction of lung voxels that are infected.

    Counts nonzero voxels; raises if shapes differ or the lung mask is empty.
    """
    infection_mask = np.asarray(infection_mask)
    lung_mask = np.asarray(lung_mask)
    if infection_mask.shape != lung_mask.shape:
        raise ValueError(
            f"mask shapes differ: {infection_mask.shape} vs {lung_mask.shape}"
        )
    lung_count = int(np.count_nonzero(lung_mask))
    if lung_count == 0:
        raise ValueError("lung mask is empty")
    return int(np.count_nonzero(infection_mask)) / lung_count


def assign_sampling_group(label: ClassLabel, ratio: float) -> SamplingGroup:
    """Map a (class, infection ratio) pair to its training sampling group."""
    if ratio < 0 or not np.isfinite(ratio):
        raise ValueError(f"infection ratio must be finite and >= 0, got {ratio}")
    if label is ClassLabel.COVID:
        return SamplingGroup.COVID_SMALL if ratio < COVID_SMALL_BELOW else SamplingGroup.COVID_LARGE
    return SamplingGroup.CAP_LARGE if ratio > CAP_LARGE_ABOVE else SamplingGroup.CAP_SMALL


def assign_eval_group(ratio: float) -> EvalGroup:
    """Map an infection ratio to its evaluation band."""
    if ratio < 0 or not np.isfinite(ratio):
        raise ValueError(f"infection ratio must be finite and >= 0, got {ratio}")
    if ratio < EVAL_LOW_BELOW:
        return EvalGroup.LOW
    if ratio <= EVAL_HIGH_ABOVE:
        return EvalGroup.MID
    return EvalGroup.HIGH


def patient_level_folds(
    manifest: Manifest, k: int = 5, seed: int = 0
) -> list[tuple[Manifest, Manifest]]:
    """Split into k (train, validation) manifest pairs at the patient level.

    Patients are shuffled by ``seed`` and dealt round-robin to folds, so no
    patient appears in both halves of any pair and fold assignment is
    reproducible.
    """
    if k < 2:
        raise ValueError(f"need at least 2 folds, got k={k}")
    patients = sorted(manifest.patient_ids())
    if len(patients) < k:
        raise ValueError(f"need at least k={k} distinct patients, got {len(patients)}")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    fold_of = {pid: i % k for i, pid in enumerate(order)}

    folds: list[tuple[Manifest, Manifest]] = []
    for i in range(k):
        train = [r for r in manifest.records if fold_of[r.patient_id] != i]
        val = [r for r in manifest.records if fold_of[r.patient_id] == i]
        tag = manifest.split_tag
        folds.append(
            (
                Manifest(records=[replace(r) for r in train], split_tag=f"{tag}/fold{i}-train"),
                Manifest(records=[replace(r) for r in val], split_tag=f"{tag}/fold{i}-val"),
            )
        )
    return folds
