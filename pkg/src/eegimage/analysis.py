"""Ablation harness, backbone pretraining pretext, embedding extraction for
t-SNE, and report/figure emission.

Pretraining note: full-size transfer learning needs an external image corpus,
so the backbone is pretrained here on a procedural 8-way oriented-grating
classification task instead. That preserves the mechanism being ablated
(transfer vs random init) while staying self-contained and seed-deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .data import DatasetManifest
from .metrics import EvalReport, confusion_to_csv, roc_to_csv, wilcoxon_rank_sum
from .model import (
    ABLATION_VARIANTS,
    ModelConfig,
    conv2d_backward,
    conv2d_forward,
    forward_batch,
    init_params,
    kl_div_rows,
    silu,
    silu_backward,
    softmax,
    variant_config,
)
from .plots import ablation_svg, confusion_svg, roc_svg, tsne_svg
from .train import Dataset, StageConfig, run_cv
from .tsne import tsne_to_csv


@dataclass(frozen=True)
class PretextConfig:
    image_size: int = 32
    n_orientations: int = 8
    n_train: int = 1024
    n_test: int = 256
    epochs: int = 6
    batch_size: int = 64
    lr: float = 1e-3
    min_accuracy: float = 0.60


def grating_dataset(n: int, size: int, n_classes: int, channels: int,
                    rng: np.random.Generator):
    """Procedural oriented gratings in the 0-255 range, one orientation bin
    per class."""
    u, v = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    x = np.empty((n, size, size, channels), dtype=np.float64)
    y = rng.integers(0, n_classes, size=n)
    for i in range(n):
        theta = y[i] * np.pi / n_classes + rng.uniform(-np.pi / 36, np.pi / 36)
        freq = rng.uniform(0.08, 0.25)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(80.0, 120.0)
        wave = np.sin(2.0 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)
        for c in range(channels):
            scale = rng.uniform(0.8, 1.0)
            x[i, :, :, c] = 127.5 + amp * scale * wave
        x[i] += rng.normal(0.0, 8.0, size=(size, size, channels))
    return np.clip(x, 0.0, 255.0), y


def _pretext_forward(x, conv_w, conv_b, head_w, head_b, stride, want_cache=False):
    h = x
    caches, preacts = [], []
    for w, b in zip(conv_w, conv_b):
        z, cc = conv2d_forward(h, w, b, stride)
        h = silu(z)
        caches.append(cc)
        preacts.append(z)
    feat = h.mean(axis=(1, 2))
    probs = softmax(feat @ head_w + head_b)
    if not want_cache:
        return probs, feat
    return probs, feat, (caches, preacts, h.shape, feat)


def pretrain_backbone(cfg: ModelConfig, seed: int, pretext: PretextConfig | None = None):
    """Train the conv stack on the grating pretext and hand back its weights.

    Returns (conv_w, conv_b, held_out_accuracy). Raises if accuracy lands
    under pretext.min_accuracy, which indicates a broken training loop rather
    than a hard task.
    """
    px = pretext or PretextConfig()
    rng = np.random.default_rng([seed, 9001])
    n_cls = px.n_orientations
    x_all, y_all = grating_dataset(
        px.n_train + px.n_test, px.image_size, n_cls, cfg.groups, rng
    )
    x_tr, y_tr = x_all[: px.n_train], y_all[: px.n_train]
    x_te, y_te = x_all[px.n_train :], y_all[px.n_train :]

    proto = init_params(cfg, seed=seed + 17)
    conv_w = [w.astype(np.float64) for w in proto.conv_w]
    conv_b = [b.astype(np.float64) for b in proto.conv_b]
    head_w = np.zeros((cfg.backbone_channels[-1], n_cls))
    head_b = np.zeros(n_cls)

    names = [f"w{i}" for i in range(len(conv_w))] + [f"b{i}" for i in range(len(conv_b))]
    names += ["hw", "hb"]

    def get(n):
        if n == "hw":
            return head_w
        if n == "hb":
            return head_b
        i = int(n[1:])
        return conv_w[i] if n[0] == "w" else conv_b[i]

    m = {n: np.zeros_like(get(n)) for n in names}
    v = {n: np.zeros_like(get(n)) for n in names}
    onehot = np.eye(n_cls)
    t = 0
    for _ in range(px.epochs):
        order = rng.permutation(px.n_train)
        for s in range(0, px.n_train, px.batch_size):
            sel = order[s : s + px.batch_size]
            xb, yb = x_tr[sel], onehot[y_tr[sel]]
            probs, _, (caches, preacts, _, feat) = _pretext_forward(
                xb, conv_w, conv_b, head_w, head_b, cfg.conv_stride, want_cache=True
            )
            dlogits = (probs - yb) / len(sel)
            g = {"hw": feat.T @ dlogits, "hb": dlogits.sum(axis=0)}
            dfeat = dlogits @ head_w.T
            _, hh, wwid, _ = preacts[-1].shape  # post-silu spatial == preact spatial
            dh = np.broadcast_to(
                (dfeat / (hh * wwid))[:, None, None, :], preacts[-1].shape
            ).copy()
            for i in reversed(range(len(conv_w))):
                dz = silu_backward(dh, preacts[i])
                dh, dw, db = conv2d_backward(dz, caches[i])
                g[f"w{i}"] = dw
                g[f"b{i}"] = db
            t += 1
            bc1 = 1.0 - 0.9**t
            bc2 = 1.0 - 0.999**t
            for n in names:
                arr = get(n)
                m[n] = 0.9 * m[n] + 0.1 * g[n]
                v[n] = 0.999 * v[n] + 0.001 * g[n] * g[n]
                arr -= px.lr * (m[n] / bc1) / (np.sqrt(v[n] / bc2) + 1e-8)

    probs_te, _ = _pretext_forward(x_te, conv_w, conv_b, head_w, head_b, cfg.conv_stride)
    acc = float((probs_te.argmax(axis=1) == y_te).mean())
    if acc < px.min_accuracy:
        raise RuntimeError(
            f"pretext accuracy {acc:.3f} below {px.min_accuracy}; training loop broken"
        )
    dt = cfg.np_dtype
    return [w.astype(dt) for w in conv_w], [b.astype(dt) for b in conv_b], acc


@dataclass
class AblationRow:
    variant: str
    mean_kld: float
    per_seed_kld: list[float]
    p_vs_full: float | None
    patient_kld: np.ndarray = field(repr=False, default=None)


def patient_level_kld(ds: Dataset, oof_probs: np.ndarray) -> np.ndarray:
    """Mean KLD per patient (sorted by patient id) from out-of-fold
    predictions."""
    per_sample = kl_div_rows(ds.y, oof_probs)
    patients = sorted(set(ds.patient_ids))
    pid = np.array(ds.patient_ids)
    return np.array([per_sample[pid == p].mean() for p in patients])


def run_ablation(
    manifest: DatasetManifest,
    ds: Dataset,
    base_cfg: ModelConfig,
    stage1: StageConfig,
    stage2: StageConfig,
    augment_cfg: AugmentConfig | None,
    seeds: list[int],
    k: int = 5,
    pretext: PretextConfig | None = None,
    variants: tuple[str, ...] = ABLATION_VARIANTS,
    log=None,
) -> list[AblationRow]:
    """Retrain each component-removal variant with identical hyperparameters
    and compare patient-level KLD against the full model."""
    if not seeds:
        raise ValueError("need at least one seed")
    if "full" not in variants:
        raise ValueError("ablation requires the full variant as reference")
    backbones = {}
    per_variant_seed_kld: dict[str, list[float]] = {t: [] for t in variants}
    per_variant_patient: dict[str, list[np.ndarray]] = {t: [] for t in variants}
    for seed in seeds:
        for tag in variants:
            cfg = variant_config(base_cfg, tag)
            backbone = None
            if cfg.pretrained:
                if seed not in backbones:
                    backbones[seed] = pretrain_backbone(cfg, seed, pretext)[:2]
                backbone = backbones[seed]
            cv = run_cv(
                manifest, ds, cfg, stage1, stage2, augment_cfg,
                k=k, seed=seed, pretrained_backbone=backbone, log=log,
            )
            per_sample_kld = float(kl_div_rows(ds.y, cv.oof_probs).mean())
            per_variant_seed_kld[tag].append(per_sample_kld)
            per_variant_patient[tag].append(patient_level_kld(ds, cv.oof_probs))
    rows = []
    full_vec = np.concatenate(per_variant_patient["full"])
    for tag in variants:
        vec = np.concatenate(per_variant_patient[tag])
        p = None
        if tag != "full":
            _, p = wilcoxon_rank_sum(full_vec, vec)
        rows.append(
            AblationRow(
                variant=tag,
                mean_kld=float(np.mean(per_variant_seed_kld[tag])),
                per_seed_kld=per_variant_seed_kld[tag],
                p_vs_full=p,
                patient_kld=vec,
            )
        )
    return rows


def ablation_to_csv(rows: list[AblationRow], comment: str | None = None) -> str:
    n_seeds = len(rows[0].per_seed_kld) if rows else 0
    header = "variant,mean_kld,p_vs_full," + ",".join(
        f"kld_seed{i}" for i in range(n_seeds)
    )
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append(header)
    for r in rows:
        p = "" if r.p_vs_full is None else f"{r.p_vs_full:.6g}"
        lines.append(
            f"{r.variant},{r.mean_kld:.6f},{p},"
            + ",".join(f"{v:.6f}" for v in r.per_seed_kld)
        )
    return "\n".join(lines) + "\n"


def extract_embeddings(
    param_sets, x_scaled: np.ndarray, use_probs: bool = False, batch_size: int = 64
) -> np.ndarray:
    """Fold-averaged model outputs for t-SNE: pooled penultimate features by
    default, softmax probabilities behind the flag."""
    outs = []
    for params, cfg in param_sets:
        chunks = []
        for i in range(0, x_scaled.shape[0], batch_size):
            probs, feat = forward_batch(x_scaled[i : i + batch_size], params, cfg)
            chunks.append(probs if use_probs else feat)
        outs.append(np.concatenate(chunks, axis=0))
    return np.mean(outs, axis=0)


def _write(path: Path, content: str) -> None:
    try:
        with open(path, "w") as f:
            f.write(content)
    except OSError as e:
        raise OSError(f"failed writing {path}: {e}") from e


def emit_report(
    out_dir: Path,
    report: EvalReport | None = None,
    report_json: str | None = None,
    roc_points: dict[str, tuple] | None = None,
    tsne_data: tuple[np.ndarray, np.ndarray, list[str]] | None = None,
    ablation_rows: list[AblationRow] | None = None,
    comment: str | None = None,
) -> list[Path]:
    """Write report.json, per-class ROC CSVs, confusion.csv, tsne.csv,
    ablation.csv and matching SVGs into out_dir. Sections whose inputs are
    None (or empty, for ROC) are skipped; everything else is still written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if report is not None:
        p = out_dir / "report.json"
        _write(p, report_json if report_json is not None else _report_json(report, comment))
        written.append(p)
        p = out_dir / "confusion.csv"
        body = confusion_to_csv(report.confusion)
        _write(p, (f"# {comment}\n" if comment else "") + body)
        written.append(p)
        p = out_dir / "confusion.svg"
        _write(p, confusion_svg(report.confusion, comment))
        written.append(p)

    if roc_points:
        curves, marks = {}, {}
        for name, (fpr, tpr, thr, opt) in sorted(roc_points.items()):
            p = out_dir / f"roc_{name.lower()}.csv"
            body = roc_to_csv(fpr, tpr, thr)
            _write(p, (f"# {comment}\n" if comment else "") + body)
            written.append(p)
            curves[name] = (fpr, tpr)
            sel = np.argmin(np.abs(np.asarray(thr) - opt))
            marks[name] = (float(fpr[sel]), float(tpr[sel]))
        aurocs = report.auroc if report is not None else {}
        p = out_dir / "roc.svg"
        _write(p, roc_svg(curves, marks, aurocs, comment))
        written.append(p)

    if tsne_data is not None:
        coords, labels, ids = tsne_data
        p = out_dir / "tsne.csv"
        body = tsne_to_csv(coords, labels, ids)
        _write(p, (f"# {comment}\n" if comment else "") + body)
        written.append(p)
        p = out_dir / "tsne.svg"
        _write(p, tsne_svg(coords, labels, comment))
        written.append(p)

    if ablation_rows is not None:
        p = out_dir / "ablation.csv"
        _write(p, ablation_to_csv(ablation_rows, comment))
        written.append(p)
        p = out_dir / "ablation.svg"
        svg_rows = [
            {"variant": r.variant, "mean_kld": r.mean_kld, "p_vs_full": r.p_vs_full}
            for r in ablation_rows
        ]
        _write(p, ablation_svg(svg_rows, comment))
        written.append(p)

    return written


def _report_json(report: EvalReport, comment: str | None) -> str:
    from .metrics import report_to_json

    text = report_to_json(report)
    if comment:
        d = json.loads(text)
        d["run_info"] = comment
        text = json.dumps(d, sort_keys=True, indent=1) + "\n"
    return text
