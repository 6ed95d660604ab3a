"""Two-stage, k-fold training: annotator-weighted KLD first on everything,
then a uniform-weight fine-tune on the high-quality subset, with warmup+cosine
learning rate, per-epoch validation, and best-checkpoint retention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .augment import AugmentConfig, apply_array
from .data import (
    HIGH_QUALITY_MIN_VOTES,
    DatasetManifest,
    FoldAssignment,
    read_signal,
    split_folds,
)
from .model import (
    ModelConfig,
    ModelParams,
    backward_batch,
    forward_batch,
    init_params,
    kl_div_rows,
    project_rows_simplex,
    save_checkpoint,
)
from .preprocess import FilterSpec, clip_scale_array, filter_array

WEIGHT_ANNOTATORS = "annotator_count"
WEIGHT_UNIFORM = "uniform"
SCOPE_ALL = "all"
SCOPE_HIGH_QUALITY = "high_quality_only"


@dataclass(frozen=True)
class StageConfig:
    lr_base: float
    epochs: int
    sample_weighting: str
    data_scope: str
    batch_size: int = 32
    min_lr: float = 1e-6
    warmup_frac: float = 0.1

    def __post_init__(self):
        # lr_base == min_lr == 0 is the degenerate frozen stage
        if not (self.lr_base >= self.min_lr >= 0.0):
            raise ValueError("need lr_base >= min_lr >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.sample_weighting not in (WEIGHT_ANNOTATORS, WEIGHT_UNIFORM):
            raise ValueError(f"unknown sample_weighting {self.sample_weighting!r}")
        if self.data_scope not in (SCOPE_ALL, SCOPE_HIGH_QUALITY):
            raise ValueError(f"unknown data_scope {self.data_scope!r}")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def default_stage1(**overrides) -> StageConfig:
    base = dict(
        lr_base=1e-3,
        epochs=15,
        sample_weighting=WEIGHT_ANNOTATORS,
        data_scope=SCOPE_ALL,
    )
    base.update(overrides)
    return StageConfig(**base)


def default_stage2(**overrides) -> StageConfig:
    base = dict(
        lr_base=3e-4,
        epochs=5,
        sample_weighting=WEIGHT_UNIFORM,
        data_scope=SCOPE_HIGH_QUALITY,
    )
    base.update(overrides)
    return StageConfig(**base)


def kld_loss(y: np.ndarray, p: np.ndarray, weight: float = 1.0) -> float:
    """weight * KL(y || p) for one sample; y must already be normalized."""
    y = np.asarray(y, dtype=np.float64)
    if abs(y.sum() - 1.0) > 1e-9:
        raise ValueError(f"target not normalized: sums to {y.sum()}")
    return float(weight * kl_div_rows(y[None], np.asarray(p, dtype=np.float64)[None])[0])


def lr_at(step: int, total_steps: int, cfg: StageConfig) -> float:
    """Linear warmup to lr_base, then cosine decay landing exactly on min_lr
    at the final step."""
    if not (0 <= step < total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warmup = int(cfg.warmup_frac * total_steps)
    if step < warmup:
        return cfg.lr_base * step / warmup
    span = max(total_steps - 1 - warmup, 1)
    progress = (step - warmup) / span
    return cfg.min_lr + 0.5 * (cfg.lr_base - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adaptive moment estimation over the named trainable arrays."""

    def __init__(self, params: ModelParams, cfg: ModelConfig,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.names = params.trainable_names(cfg)
        self.m = {n: np.zeros_like(params.get(n)) for n in self.names}
        self.v = {n: np.zeros_like(params.get(n)) for n in self.names}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for n in self.names:
            g = grads.get(n)
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            mhat = self.m[n] / bc1
            vhat = self.v[n] / bc2
            arr = params.get(n)
            arr -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(arr.dtype)


@dataclass
class Dataset:
    """Filtered (still in microvolts) segments plus labels, ready to augment
    and scale."""

    x_uv: np.ndarray  # (N, channels, T) float32, bandpassed
    y: np.ndarray  # (N, n_classes) soft labels
    n_votes: np.ndarray  # (N,) annotator counts
    patient_ids: list[str]
    segment_ids: list[str]

    def __len__(self) -> int:
        return self.x_uv.shape[0]


def load_dataset(manifest: DatasetManifest, spec: FilterSpec,
                 data_dir: Path | None = None) -> Dataset:
    segs = []
    for e in manifest.entries:
        p = Path(data_dir) / e.path if data_dir is not None else manifest.segment_path(e)
        seg = read_signal(p)
        segs.append(filter_array(seg.samples, spec))
    return Dataset(
        x_uv=np.stack(segs).astype(np.float32),
        y=manifest.soft_labels(),
        n_votes=manifest.votes_matrix().sum(axis=1).astype(np.float64),
        patient_ids=[e.patient_id for e in manifest.entries],
        segment_ids=[e.segment_id for e in manifest.entries],
    )


def sample_weights(n_votes: np.ndarray, mode: str) -> np.ndarray:
    if mode == WEIGHT_ANNOTATORS:
        return n_votes.astype(np.float64)
    return np.ones_like(n_votes, dtype=np.float64)


def scope_indices(n_votes: np.ndarray, scope: str) -> np.ndarray:
    if scope == SCOPE_HIGH_QUALITY:
        return np.nonzero(n_votes >= HIGH_QUALITY_MIN_VOTES)[0]
    return np.arange(len(n_votes))


def predict_batched(x_scaled: np.ndarray, params: ModelParams, cfg: ModelConfig,
                    batch_size: int = 64) -> np.ndarray:
    out = np.empty((x_scaled.shape[0], cfg.n_classes))
    for i in range(0, x_scaled.shape[0], batch_size):
        probs, _ = forward_batch(x_scaled[i : i + batch_size], params, cfg)
        out[i : i + batch_size] = probs
    return out


def validation_loss(x_scaled: np.ndarray, y: np.ndarray, params: ModelParams,
                    cfg: ModelConfig) -> float:
    """Unweighted mean KLD on already-scaled validation segments."""
    probs = predict_batched(x_scaled, params, cfg)
    return float(kl_div_rows(y, probs).mean())


@dataclass
class StageResult:
    params: ModelParams
    best_val_loss: float
    history: list[dict] = field(default_factory=list)


def train_stage(
    params: ModelParams,
    model_cfg: ModelConfig,
    stage: StageConfig,
    train_ds: Dataset,
    train_idx: np.ndarray,
    x_val_scaled: np.ndarray,
    y_val: np.ndarray,
    augment_cfg: AugmentConfig | None,
    rng: np.random.Generator,
    log: Callable[[dict], None] | None = None,
) -> StageResult:
    """One stage of optimization. Mutates params in place and returns the
    best-validation snapshot (which is also copied back into params).

    Batch objective: sum_i w_i KLD_i / sum_i w_i. Embedding kernels are
    re-projected onto the simplex after every optimizer step.
    """
    idx = np.intersect1d(train_idx, scope_indices(train_ds.n_votes, stage.data_scope))
    if idx.size == 0:
        raise ValueError("stage received an empty training slice")
    weights_all = sample_weights(train_ds.n_votes, stage.sample_weighting)

    n_batches = -(-idx.size // stage.batch_size)
    total_steps = stage.epochs * n_batches
    adam = Adam(params, model_cfg)
    best = StageResult(params=params.copy(), best_val_loss=float("inf"))
    step = 0
    for epoch in range(stage.epochs):
        order = rng.permutation(idx)
        epoch_losses = []
        for b in range(n_batches):
            sel = order[b * stage.batch_size : (b + 1) * stage.batch_size]
            xb = np.empty((sel.size,) + train_ds.x_uv.shape[1:], dtype=np.float32)
            for j, i in enumerate(sel):
                seg = train_ds.x_uv[i]
                if augment_cfg is not None:
                    seg = apply_array(seg, augment_cfg, rng)
                xb[j] = seg
            xb_scaled = clip_scale_array(xb)
            yb = train_ds.y[sel]
            wb = weights_all[sel]
            _, _, cache = forward_batch(
                xb_scaled, params, model_cfg, train=True, rng=rng, want_cache=True
            )
            loss_sum, grads = backward_batch(yb, wb, params, model_cfg, cache)
            wsum = wb.sum()
            batch_loss = loss_sum / wsum
            for name in adam.names:
                g = grads.get(name)
                g *= 1.0 / wsum
            lr = lr_at(step, total_steps, stage)
            adam.step(params, grads, lr)
            if model_cfg.learnable_embedding:
                g_, k_, l_ = params.embedding.shape
                params.embedding = project_rows_simplex(
                    params.embedding.reshape(-1, l_)
                ).reshape(g_, k_, l_)
            epoch_losses.append(batch_loss)
            step += 1
        val = validation_loss(x_val_scaled, y_val, params, model_cfg)
        record = {
            "epoch": epoch,
            "step": step,
            "lr": lr_at(step - 1, total_steps, stage),
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val,
        }
        best.history.append(record)
        if log is not None:
            log(record)
        if val < best.best_val_loss:
            best.best_val_loss = val
            best.params = params.copy()
    # restore the best snapshot so the caller continues from it
    restored = best.params.copy()
    params.embedding = restored.embedding
    params.conv_w = restored.conv_w
    params.conv_b = restored.conv_b
    params.dense_w = restored.dense_w
    params.dense_b = restored.dense_b
    return best


@dataclass
class FoldResult:
    fold: int
    val_indices: np.ndarray
    oof_probs: np.ndarray
    stage1_history: list[dict]
    stage2_history: list[dict]
    best_val_loss: float
    checkpoint: Path | None


@dataclass
class CvResult:
    folds: list[FoldResult]
    oof_probs: np.ndarray  # (N, n_classes), aligned with the manifest
    fold_assignment: FoldAssignment

    def fold_val_losses(self) -> list[float]:
        return [f.best_val_loss for f in self.folds]


def run_cv(
    manifest: DatasetManifest,
    ds: Dataset,
    model_cfg: ModelConfig,
    stage1: StageConfig,
    stage2: StageConfig,
    augment_cfg: AugmentConfig | None,
    k: int = 5,
    seed: int = 0,
    out_dir: Path | None = None,
    log: Callable[[dict], None] | None = None,
    pretrained_backbone: tuple[list[np.ndarray], list[np.ndarray]] | None = None,
) -> CvResult:
    """Patient-grouped k-fold: per fold, stage 1 on all non-fold data, stage 2
    on its high-quality subset, out-of-fold predictions on the held-out fold.
    """
    folds = split_folds(manifest, k=k, seed=seed)
    patient_fold = np.array([folds.fold_of_patient[p] for p in ds.patient_ids])
    x_scaled_all = clip_scale_array(ds.x_uv)
    oof = np.full((len(ds), model_cfg.n_classes), np.nan)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for f in range(k):
        train_idx = np.nonzero(patient_fold != f)[0]
        val_idx = np.nonzero(patient_fold == f)[0]
        if val_idx.size == 0:
            raise ValueError(f"fold {f} holds no segments; reduce k or add patients")
        rng = np.random.default_rng([seed, f])
        backbone = pretrained_backbone if model_cfg.pretrained else None
        params = init_params(model_cfg, seed=seed * 1000 + f, backbone=backbone)
        x_val = x_scaled_all[val_idx]
        y_val = ds.y[val_idx]

        def plog(rec, fold=f, stage_name=None):
            if log is not None:
                log({"fold": fold, "stage": stage_name, **rec})

        r1 = train_stage(
            params, model_cfg, stage1, ds, train_idx, x_val, y_val,
            augment_cfg, rng, log=lambda rec: plog(rec, stage_name=1),
        )
        r2 = train_stage(
            params, model_cfg, stage2, ds, train_idx, x_val, y_val,
            augment_cfg, rng, log=lambda rec: plog(rec, stage_name=2),
        )
        oof[val_idx] = predict_batched(x_val, params, model_cfg)
        ckpt = None
        if out_dir is not None:
            ckpt = out_dir / f"fold{f}.ckpt"
            save_checkpoint(
                ckpt, params, model_cfg,
                meta={"fold": f, "seed": seed, "best_val_loss": r2.best_val_loss},
            )
        results.append(
            FoldResult(
                fold=f,
                val_indices=val_idx,
                oof_probs=oof[val_idx].copy(),
                stage1_history=r1.history,
                stage2_history=r2.history,
                best_val_loss=r2.best_val_loss,
                checkpoint=ckpt,
            )
        )
    if np.isnan(oof).any():
        raise RuntimeError("out-of-fold predictions did not cover every sample")
    return CvResult(folds=results, oof_probs=oof, fold_assignment=folds)


def ensemble_predict(
    param_sets: list[tuple[ModelParams, ModelConfig]], x_scaled: np.ndarray
) -> np.ndarray:
    """Arithmetic mean of per-model probabilities; renormalizes only when the
    mean drifts off the simplex by more than 1e-12."""
    if not param_sets:
        raise ValueError("need at least one model")
    all_probs = []
    ref_shape = None
    for params, cfg in param_sets:
        p = predict_batched(x_scaled, params, cfg)
        if ref_shape is None:
            ref_shape = p.shape
        elif p.shape != ref_shape:
            raise ValueError(f"prediction shape mismatch: {p.shape} vs {ref_shape}")
        all_probs.append(p)
    mean = np.mean(all_probs, axis=0)
    sums = mean.sum(axis=1, keepdims=True)
    off = np.abs(sums - 1.0) > 1e-12
    if off.any():
        mean = np.where(off, mean / sums, mean)
    return mean


PREDICTION_COLUMNS = (
    "id",
    "seizure_vote",
    "lpd_vote",
    "gpd_vote",
    "lrda_vote",
    "grda_vote",
    "other_vote",
)


def export_predictions(path: Path, ids: list[str], probs: np.ndarray,
                       header_comment: str | None = None) -> None:
    if len(ids) != probs.shape[0]:
        raise ValueError("id/probability count mismatch")
    with open(path, "w") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        f.write(",".join(PREDICTION_COLUMNS) + "\n")
        # 12 decimals keeps parsed row sums within ~3e-12 of 1
        for sid, row in zip(ids, probs):
            f.write(sid + "," + ",".join(f"{v:.12f}" for v in row) + "\n")


def load_predictions(path: Path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if parts[0] == "id":
                if tuple(parts) != PREDICTION_COLUMNS:
                    raise ValueError(f"{path}: unexpected columns {parts}")
                continue
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    return ids, np.array(rows)
