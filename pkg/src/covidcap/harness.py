"""Training harness: single-model training, 5-fold patient-level
cross-validation of the US/SS pair, ensemble evaluation and attention export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import ClassLabel, Manifest, load_manifest, patient_level_folds
from .losses import DEFAULT_ATTENTION_WEIGHT, attention_loss, batch_objective
from .metrics import (
    MetricReport,
    confusion_metrics,
    dual_weight,
    fuse,
    groupwise_report,
)
from .network import (
    AttentionNet3d,
    NetworkConfig,
    grad_cam,
    init_model,
    load_checkpoint,
    save_checkpoint,
    soft_mask,
)
from .preprocess import PreprocessConfig, PreprocessedSample, load_or_preprocess
from .sampling import (
    GROUP_ORDER,
    GroupCounts,
    group_indices,
    size_balanced_epoch,
    size_balanced_probabilities,
    uniform_epoch,
)
from .volumes import Volume, save_volume

UNIFORM = "US"
SIZE_BALANCED = "SS"
STRATEGIES = (UNIFORM, SIZE_BALANCED)


@dataclass
class TrainConfig:
    """Everything one training run needs; mirrors the JSON config file."""

    manifest: str = ""
    val_manifest: str | None = None
    checkpoint_dir: str = "checkpoints"
    cache_dir: str | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    preprocessing: PreprocessConfig = field(default_factory=PreprocessConfig)
    sampling_strategy: str = UNIFORM
    learning_rate: float = 2e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 5
    lr_warmup_epochs: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    batch_size: int = 20
    epochs: int = 20
    attention_weight: float = DEFAULT_ATTENTION_WEIGHT
    grad_clip: float | None = None
    augment_flips: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sampling_strategy not in STRATEGIES:
            raise ValueError(f"sampling_strategy must be one of {STRATEGIES}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.lr_warmup_epochs < 0:
            raise ValueError(
                f"lr_warmup_epochs must be nonnegative, got {self.lr_warmup_epochs}"
            )
        positive = {
            "learning_rate": self.learning_rate,
            "lr_decay_factor": self.lr_decay_factor,
            "lr_decay_every": self.lr_decay_every,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        for name, value in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")
        if self.weight_decay < 0 or self.attention_weight < 0:
            raise ValueError("weight_decay and attention_weight must be nonnegative")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["network"] = self.network.to_dict()
        d["preprocessing"] = {
            "target_spacing": list(self.preprocessing.target_spacing),
            "target_shape": list(self.preprocessing.target_shape),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "network" in d:
            d["network"] = NetworkConfig.from_dict(d["network"])
        if "preprocessing" in d:
            p = d["preprocessing"]
            d["preprocessing"] = PreprocessConfig(
                target_spacing=tuple(p["target_spacing"]),
                target_shape=tuple(p["target_shape"]),
            )
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_cls_loss: float
    mean_attn_loss: float | None
    validation: MetricReport
    group_frequencies: dict[str, int]


@dataclass
class RunResult:
    """One training run: per-epoch stats plus the selected checkpoint."""

    epochs: list[EpochStats]
    best_checkpoint: str
    best_val_auc: float
    best_epoch: int


@dataclass
class EvaluationResult:
    """Ensemble metrics for one scan set."""

    overall: MetricReport
    by_group: dict
    per_scan: list[dict]


@dataclass
class FoldOutcome:
    fold: int
    us: RunResult
    ss: RunResult
    per_scan: list[dict]


@dataclass
class CrossValResult:
    folds: list[FoldOutcome]
    overall: dict[str, MetricReport]
    by_group: dict[str, dict]
    per_scan: list[dict]
    report_path: str


def load_samples(
    manifest: Manifest,
    preprocessing: PreprocessConfig = PreprocessConfig(),
    cache_dir: str | Path | None = None,
) -> list[PreprocessedSample]:
    """Preprocess every record of a manifest (through the cache if given)."""
    return [load_or_preprocess(r, preprocessing, cache_dir) for r in manifest.records]


def _stack(samples: list[PreprocessedSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(
        np.stack([s.image.grid.astype(np.float32) for s in samples])
    )[:, None]
    masks = torch.from_numpy(
        np.stack([(s.infection_mask.grid > 0).astype(np.float32) for s in samples])
    )
    labels = torch.tensor(
        [1.0 if s.label is ClassLabel.COVID else 0.0 for s in samples]
    )
    return images, masks, labels


def _ratios(manifest: Manifest, samples: list[PreprocessedSample]) -> np.ndarray:
    """Per-scan infection ratio: the manifest's cached value when present,
    otherwise the one measured during preprocessing."""
    out = []
    for rec, sample in zip(manifest.records, samples):
        out.append(rec.infection_ratio if rec.infection_ratio is not None else sample.ratio)
    return np.asarray(out, dtype=float)


def epoch_lr(config: TrainConfig, epoch: int) -> float:
    """Step-decayed learning rate with an optional linear warmup ramp.

    Warmup scales epoch k (1-based) by k / (lr_warmup_epochs + 1), reaching
    the full scheduled rate on the first epoch after the ramp."""
    lr = config.learning_rate * config.lr_decay_factor ** (
        (epoch - 1) // config.lr_decay_every
    )
    if config.lr_warmup_epochs:
        lr *= min(1.0, epoch / (config.lr_warmup_epochs + 1))
    return lr


def flip_batch(
    images: torch.Tensor, masks: torch.Tensor, flips: np.ndarray
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mirror a training batch along the spatial axes selected by ``flips``
    (three booleans for depth/height/width), keeping images and their
    infection masks aligned.  Images are (B, C, D, H, W); masks (B, D, H, W)."""
    axes = [d for d, f in enumerate(flips) if f]
    if not axes:
        return images, masks
    return (
        torch.flip(images, [a + 2 for a in axes]),
        torch.flip(masks, [a + 1 for a in axes]),
    )


def predict_scores(model: AttentionNet3d, images: torch.Tensor, batch_size: int = 8) -> np.ndarray:
    """Sigmoid of the model logit for a stack of images, in eval mode."""
    was_training = model.training
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            out = model(images[start : start + batch_size])
            scores.append(torch.sigmoid(out.logit))
    model.train(was_training)
    return torch.cat(scores).numpy().astype(float)


def train(
    config: TrainConfig,
    train_manifest: Manifest | None = None,
    val_manifest: Manifest | None = None,
) -> RunResult:
    """Train one model with the configured sampling strategy.

    Manifests may be passed directly (as cross_validate does) or read from
    the config paths; without any validation manifest the training split
    doubles as one (smoke runs).  Deterministic for a fixed config and seed
    up to floating-point reduction order.
    """
    if train_manifest is None:
        train_manifest = load_manifest(config.manifest)
    if val_manifest is None:
        val_manifest = (
            load_manifest(config.val_manifest) if config.val_manifest else train_manifest
        )

    train_samples = load_samples(train_manifest, config.preprocessing, config.cache_dir)
    val_samples = load_samples(val_manifest, config.preprocessing, config.cache_dir)
    images, masks, labels = _stack(train_samples)
    val_images, _, val_labels = _stack(val_samples)
    input_shape = tuple(images.shape[2:])
    n = len(train_samples)

    train_labels = [s.label for s in train_samples]
    ratios = _ratios(train_manifest, train_samples)
    groups = group_indices(train_labels, ratios)
    index_group = {}
    for g, members in groups.items():
        for i in members:
            index_group[i] = g
    probs = None
    if config.sampling_strategy == SIZE_BALANCED:
        try:
            probs = size_balanced_probabilities(GroupCounts.from_groups(groups))
        except ValueError as exc:
            raise ValueError(
                f"{exc}: size-balanced sampling needs all four groups populated; "
                "fall back to sampling_strategy='US' for this split"
            ) from exc

    torch.manual_seed(config.seed)
    model = init_model(config.network, config.seed)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)

    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    tag = config.sampling_strategy.lower()
    ckpt_path = ckpt_dir / f"{tag}_best.pt"
    log_path = ckpt_dir / f"train_log_{tag}.jsonl"

    stats: list[EpochStats] = []
    best_auc = -math.inf
    best_epoch = -1
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(1, config.epochs + 1):
            lr = epoch_lr(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            epoch_seed = int(rng.integers(2**63))
            if config.sampling_strategy == UNIFORM:
                order = uniform_epoch(n, epoch_seed)
            else:
                order = size_balanced_epoch(
                    groups, probs, n, np.random.default_rng(epoch_seed)
                )
            freq = {g.value: 0 for g in GROUP_ORDER}
            for i in order:
                freq[index_group[int(i)].value] += 1

            model.train()
            cls_sum = 0.0
            attn_sum = 0.0
            covid_seen = 0
            for start in range(0, n, config.batch_size):
                idx = torch.as_tensor(order[start : start + config.batch_size])
                x, y, m = images[idx], labels[idx], masks[idx]
                if config.augment_flips:
                    x, m = flip_batch(x, m, rng.random(3) < 0.5)
                out = model(x)
                covid = y > 0.5
                attn_vec = None
                if config.attention_weight != 0 and bool(covid.any()):
                    t = soft_mask(
                        out.attention[covid],
                        input_shape,
                        alpha=config.network.alpha,
                        beta=config.network.beta,
                    )
                    per_sample = attention_loss(t, m[covid])
                    attn_vec = torch.zeros_like(out.logit)
                    attn_vec[covid] = per_sample
                objective, breakdown = batch_objective(
                    out.logit, y, attn_vec, config.attention_weight
                )
                optimizer.zero_grad()
                objective.backward()
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()

                cls_sum += breakdown.classification * len(idx)
                n_covid = int(covid.sum())
                if breakdown.attention is not None:
                    attn_sum += breakdown.attention * n_covid
                    covid_seen += n_covid

            mean_cls = cls_sum / n
            mean_attn = attn_sum / covid_seen if covid_seen else None
            val_scores = predict_scores(model, val_images)
            report = confusion_metrics(val_scores, val_labels.numpy().astype(int))
            stats.append(
                EpochStats(
                    epoch=epoch,
                    lr=lr,
                    mean_cls_loss=mean_cls,
                    mean_attn_loss=mean_attn,
                    validation=report,
                    group_frequencies=freq,
                )
            )
            log.write(
                json.dumps(
                    {
                        "epoch": epoch,
                        "lr": lr,
                        "mean_l_c": mean_cls,
                        "mean_l_ex": mean_attn,
                        "val_auc": report.auc,
                        "group_frequencies": freq,
                    }
                )
                + "\n"
            )
            log.flush()

            auc_key = report.auc if report.auc is not None else -1.0
            if auc_key > best_auc:
                best_auc = auc_key
                best_epoch = epoch
                save_checkpoint(
                    model,
                    ckpt_path,
                    epoch=epoch,
                    val_auc=auc_key,
                    seed=config.seed,
                    sampling_strategy=config.sampling_strategy,
                )

    return RunResult(
        epochs=stats,
        best_checkpoint=str(ckpt_path),
        best_val_auc=best_auc,
        best_epoch=best_epoch,
    )


def evaluate(
    us_checkpoint: str | Path,
    ss_checkpoint: str | Path,
    manifest: Manifest | str | Path,
    *,
    preprocessing: PreprocessConfig = PreprocessConfig(),
    cache_dir: str | Path | None = None,
    out_path: str | Path | None = None,
) -> EvaluationResult:
    """Score every scan with both models, fuse per the ratio-conditioned
    weight, and report overall plus per-band metrics (optionally as JSON)."""
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    us_model, us_meta = load_checkpoint(us_checkpoint)
    ss_model, ss_meta = load_checkpoint(ss_checkpoint)
    if us_meta["config"] != ss_meta["config"]:
        raise ValueError(
            "checkpoint mismatch: US and SS models were built from different network configs"
        )

    samples = load_samples(manifest, preprocessing, cache_dir)
    images, _, labels = _stack(samples)
    ratios = _ratios(manifest, samples)
    p_us = predict_scores(us_model, images)
    p_ss = predict_scores(ss_model, images)

    rows = []
    for rec, ratio, pu, ps, label in zip(
        manifest.records, ratios, p_us, p_ss, labels.numpy()
    ):
        w = dual_weight(float(ratio))
        rows.append(
            {
                "scan_id": rec.scan_id,
                "label": int(label),
                "ratio": float(ratio),
                "p_us": float(pu),
                "p_ss": float(ps),
                "w": w,
                "p_final": fuse(float(pu), float(ps), w),
            }
        )
    p_final = np.array([r["p_final"] for r in rows])
    int_labels = labels.numpy().astype(int)
    overall = confusion_metrics(p_final, int_labels)
    by_group = groupwise_report(p_final, int_labels, ratios)
    result = EvaluationResult(overall=overall, by_group=by_group, per_scan=rows)
    if out_path is not None:
        _write_report(out_path, {"DS": overall}, {"DS": by_group}, rows)
    return result


def _write_report(path, overall: dict, by_group: dict, rows: list[dict]) -> None:
    payload = {
        "overall": {k: v.to_dict() for k, v in overall.items()},
        "groups": {
            k: {g.value: (r.to_dict() if r is not None else None) for g, r in gr.items()}
            for k, gr in by_group.items()
        },
        "per_scan": rows,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)


def cross_validate(config: TrainConfig, k: int = 5) -> CrossValResult:
    """Patient-level k-fold run of the full two-model pipeline.

    Each fold trains one US and one SS model (seeds derived from the master
    seed), fuses their validation predictions, and the pooled predictions
    across folds form the combined report written to the checkpoint dir.
    """
    manifest = load_manifest(config.manifest)
    folds = patient_level_folds(manifest, k=k, seed=config.seed)
    base_dir = Path(config.checkpoint_dir)

    outcomes: list[FoldOutcome] = []
    all_rows: list[dict] = []
    for i, (train_m, val_m) in enumerate(folds):
        fold_dir = base_dir / f"fold{i}"
        results: dict[str, RunResult] = {}
        for j, strategy in enumerate(STRATEGIES):
            seed_ij = int(
                np.random.SeedSequence((config.seed, i, j)).generate_state(1)[0]
            )
            cfg = replace(
                config,
                sampling_strategy=strategy,
                seed=seed_ij,
                checkpoint_dir=str(fold_dir),
            )
            results[strategy] = train(cfg, train_manifest=train_m, val_manifest=val_m)
        fold_eval = evaluate(
            results[UNIFORM].best_checkpoint,
            results[SIZE_BALANCED].best_checkpoint,
            val_m,
            preprocessing=config.preprocessing,
            cache_dir=config.cache_dir,
        )
        rows = [dict(r, fold=i) for r in fold_eval.per_scan]
        outcomes.append(
            FoldOutcome(
                fold=i, us=results[UNIFORM], ss=results[SIZE_BALANCED], per_scan=rows
            )
        )
        all_rows.extend(rows)

    labels = np.array([r["label"] for r in all_rows])
    ratios = np.array([r["ratio"] for r in all_rows])
    overall: dict[str, MetricReport] = {}
    by_group: dict[str, dict] = {}
    for key, column in (("US", "p_us"), ("SS", "p_ss"), ("DS", "p_final")):
        scores = np.array([r[column] for r in all_rows])
        overall[key] = confusion_metrics(scores, labels)
        by_group[key] = groupwise_report(scores, labels, ratios)

    report_path = base_dir / "cv_report.json"
    _write_report(report_path, overall, by_group, all_rows)
    return CrossValResult(
        folds=outcomes,
        overall=overall,
        by_group=by_group,
        per_scan=all_rows,
        report_path=str(report_path),
    )


def _save_overlay(image2d: np.ndarray, heat2d: np.ndarray, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image2d, cmap="gray", vmin=0.0, vmax=1.0)
    ax.imshow(heat2d, cmap="jet", alpha=0.4, vmin=0.0, vmax=1.0)
    ax.axis("off")
    fig.savefig(path, bbox_inches="tight", dpi=100)
    plt.close(fig)


def export_attention(
    checkpoint: str | Path,
    manifest: Manifest | str | Path,
    out_dir: str | Path,
    include_grad_cam: bool = False,
    *,
    preprocessing: PreprocessConfig = PreprocessConfig(),
    cache_dir: str | Path | None = None,
) -> list[Path]:
    """Write each scan's soft attention mask as NIfTI plus axial/coronal
    mid-slice overlay images; optionally the gradient-based baseline too."""
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    model, _ = load_checkpoint(checkpoint)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written: list[Path] = []
    for record in manifest.records:
        sample = load_or_preprocess(record, preprocessing, cache_dir)
        image = sample.image.grid.astype(np.float32)
        x = torch.from_numpy(image)[None, None]
        with torch.no_grad():
            fw = model(x)
            t = soft_mask(
                fw.attention,
                tuple(image.shape),
                alpha=model.config.alpha,
                beta=model.config.beta,
            )[0].numpy()

        maps = {"attention": t}
        if include_grad_cam:
            maps["gradcam"] = grad_cam(model, x)[0].numpy()
        nz, ny, _ = image.shape
        for name, heat in maps.items():
            nifti_path = out_dir / f"{record.scan_id}_{name}.nii.gz"
            save_volume(Volume(heat.astype(np.float32), sample.image.spacing), nifti_path)
            axial = out_dir / f"{record.scan_id}_{name}_axial.png"
            coronal = out_dir / f"{record.scan_id}_{name}_coronal.png"
            _save_overlay(image[nz // 2], heat[nz // 2], axial)
            _save_overlay(image[:, ny // 2, :], heat[:, ny // 2, :], coronal)
            written += [nifti_path, axial, coronal]
    return written
