"""The network: simplex-constrained EEG-to-image embedding, a small stride-2
convolutional backbone, central temporal selection, pooling and a softmax
head, with exact hand-written reverse-mode gradients.

Everything is plain numpy. Forward in eval mode is a pure function; training
code gets gradients from :func:`loss_and_grads` and owns the parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.special import expit

from .util import config_hash, to_jsonable

CHECKPOINT_MAGIC = b"EEGIMG01"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {"float32": 0, "float64": 1}
_DTYPE_FROM_CODE = {0: "<f4", 1: "<f8"}


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 16
    groups: int = 3
    kernels_per_group: int = 10
    kernel_len: int = 10
    stride: int = 10
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    conv_kernel: int = 3
    conv_stride: int = 2
    dropout_rate: float = 0.2
    n_classes: int = 6
    row_layout: str = "channel_major"  # or "kernel_major"
    central_fraction: int = 5
    pool_full_width: bool = False
    learnable_embedding: bool = True
    pretrained: bool = True
    input_mean: float = 127.5
    dtype: str = "float32"

    def __post_init__(self):
        if self.row_layout not in ("channel_major", "kernel_major"):
            raise ValueError(f"unknown row_layout {self.row_layout!r}")
        if self.kernel_len > self.stride:
            raise ValueError("kernel_len must not exceed stride")
        if self.dtype not in _DTYPE_CODES:
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        if not self.backbone_channels:
            raise ValueError("backbone needs at least one stage")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def image_height(self) -> int:
        return self.n_channels * self.kernels_per_group

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def image_width(self, t: int) -> int:
        if t % self.stride != 0:
            raise ValueError(f"T={t} not divisible by stride {self.stride}")
        return t // self.stride

    def feature_width(self, t: int) -> int:
        w = self.image_width(t)
        for _ in self.backbone_channels:
            w = -(-w // self.conv_stride)
        return w


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector onto {w >= 0, sum w = 1}.

    Sort-and-threshold: find the largest k for which the top-k entries stay
    positive after sharing the excess mass, then clamp.
    """
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def project_rows_simplex(mat: np.ndarray) -> np.ndarray:
    """Row-wise simplex projection (used on every kernel after each step)."""
    m = np.asarray(mat, dtype=np.float64)
    u = np.sort(m, axis=-1)[..., ::-1]
    css = np.cumsum(u, axis=-1) - 1.0
    idx = np.arange(1, m.shape[-1] + 1)
    cond = u - css / idx > 0
    rho = cond.shape[-1] - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1.0)
    return np.maximum(m - theta, 0.0).astype(mat.dtype)


def init_embedding(cfg: ModelConfig, seed: int = 0) -> np.ndarray:
    """Kernel k = 0.5*onehot(k) + 0.5*uniform, projected to the simplex.

    Deterministic (no noise term): the initial embedding is close to an
    information-preserving interleaved reshape. seed is accepted for
    interface stability.
    """
    g, k, l = cfg.groups, cfg.kernels_per_group, cfg.kernel_len
    emb = np.full((g, k, l), 0.5 / l, dtype=np.float64)
    for i in range(k):
        emb[:, i, i % l] += 0.5
    # kernels stay float64 whatever the training dtype: the simplex
    # invariant (|sum-1| <= 1e-9) is tighter than float32 resolution
    return project_rows_simplex(emb.reshape(-1, l)).reshape(g, k, l)


def fixed_embedding(cfg: ModelConfig) -> np.ndarray:
    """Non-learnable interleaved reshape: kernel k picks sample k of each
    window."""
    g, k, l = cfg.groups, cfg.kernels_per_group, cfg.kernel_len
    emb = np.zeros((g, k, l), dtype=np.float64)
    for i in range(k):
        emb[:, i, i % l] = 1.0
    return emb


@dataclass
class ModelParams:
    embedding: np.ndarray  # (groups, K, L), float64, rows on the simplex
    conv_w: list[np.ndarray]  # per stage (kh, kw, cin, cout)
    conv_b: list[np.ndarray]
    dense_w: np.ndarray  # (feat_dim, n_classes)
    dense_b: np.ndarray

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "embedding", self.embedding
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            yield f"conv{i}_w", w
            yield f"conv{i}_b", b
        yield "dense_w", self.dense_w
        yield "dense_b", self.dense_b

    def trainable_names(self, cfg: ModelConfig) -> list[str]:
        names = [n for n, _ in self.named_arrays()]
        if not cfg.learnable_embedding:
            names.remove("embedding")
        return names

    def get(self, name: str) -> np.ndarray:
        return dict(self.named_arrays())[name]

    def set(self, name: str, value: np.ndarray) -> None:
        if name == "embedding":
            self.embedding = value
        elif name == "dense_w":
            self.dense_w = value
        elif name == "dense_b":
            self.dense_b = value
        elif name.startswith("conv"):
            idx = int(name[4:].split("_")[0])
            if name.endswith("_w"):
                self.conv_w[idx] = value
            else:
                self.conv_b[idx] = value
        else:
            raise KeyError(name)

    def zeros_like(self) -> "ModelParams":
        """Gradient buffer with shapes mirroring the parameters exactly."""
        return ModelParams(
            embedding=np.zeros_like(self.embedding),
            conv_w=[np.zeros_like(w) for w in self.conv_w],
            conv_b=[np.zeros_like(b) for b in self.conv_b],
            dense_w=np.zeros_like(self.dense_w),
            dense_b=np.zeros_like(self.dense_b),
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            embedding=self.embedding.copy(),
            conv_w=[w.copy() for w in self.conv_w],
            conv_b=[b.copy() for b in self.conv_b],
            dense_w=self.dense_w.copy(),
            dense_b=self.dense_b.copy(),
        )

    def ravel(self, cfg: ModelConfig) -> np.ndarray:
        return np.concatenate(
            [self.get(n).ravel() for n in self.trainable_names(cfg)]
        )

    def set_from_ravel(self, cfg: ModelConfig, vec: np.ndarray) -> None:
        i = 0
        for name in self.trainable_names(cfg):
            arr = self.get(name)
            n = arr.size
            self.set(name, vec[i : i + n].reshape(arr.shape).astype(arr.dtype))
            i += n
        if i != vec.size:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {i}")

    def n_trainable(self, cfg: ModelConfig) -> int:
        return sum(self.get(n).size for n in self.trainable_names(cfg))


def init_params(
    cfg: ModelConfig,
    seed: int,
    backbone: tuple[list[np.ndarray], list[np.ndarray]] | None = None,
    feat_dim: int | None = None,
) -> ModelParams:
    """Fresh parameters; pass pretrained (conv_w, conv_b) to transfer a
    backbone.

    The dense head starts at zero so the first prediction is uniform. The
    first conv stage's bias offsets the 0-255 input range so pre-activations
    start centered.
    """
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    if cfg.learnable_embedding:
        emb = init_embedding(cfg, seed)
    else:
        emb = fixed_embedding(cfg)
    conv_w, conv_b = [], []
    cin = cfg.groups
    kk = cfg.conv_kernel
    for i, cout in enumerate(cfg.backbone_channels):
        fan_in = kk * kk * cin
        w = (rng.standard_normal((kk, kk, cin, cout)) * np.sqrt(2.0 / fan_in)).astype(dt)
        if i == 0:
            b = (-cfg.input_mean * w.sum(axis=(0, 1, 2))).astype(dt)
        else:
            b = np.zeros(cout, dtype=dt)
        conv_w.append(w)
        conv_b.append(b)
        cin = cout
    if backbone is not None:
        pw, pb = backbone
        if len(pw) != len(conv_w) or any(a.shape != b.shape for a, b in zip(pw, conv_w)):
            raise ValueError("pretrained backbone shapes do not match config")
        conv_w = [w.astype(dt).copy() for w in pw]
        conv_b = [b.astype(dt).copy() for b in pb]
    fd = feat_dim if feat_dim is not None else cfg.backbone_channels[-1]
    return ModelParams(
        embedding=emb,
        conv_w=conv_w,
        conv_b=conv_b,
        dense_w=np.zeros((fd, cfg.n_classes), dtype=dt),
        dense_b=np.zeros(cfg.n_classes, dtype=dt),
    )


# --- layers (functional: forward returns a cache consumed by backward) ---


def eeg_to_image_batch(x: np.ndarray, embedding: np.ndarray, layout: str, stride: int):
    """[N x C x T] -> [N x H x W x groups] image via per-window convex
    combinations.

    Row r of the image holds kernel k applied to channel c, with
    r = c*K + k (channel_major) or r = k*C + c (kernel_major).
    """
    n, c, t = x.shape
    g, k, l = embedding.shape
    if t % stride != 0:
        raise ValueError(f"T={t} not divisible by stride {stride}")
    w = t // stride
    if l == stride:
        win = x.reshape(n, c, w, l)
    else:  # l < stride: windows start every `stride` samples
        win = np.lib.stride_tricks.sliding_window_view(x, l, axis=-1)[:, :, ::stride, :]
    # kernels are kept float64 for the simplex invariant; the image itself
    # is computed in the signal dtype
    emb = np.asarray(embedding, dtype=x.dtype)
    # (N,C,W,L) x (G,K,L) -> (N,C,W,G,K)
    out = np.tensordot(win, emb, axes=([3], [2]))
    if layout == "channel_major":
        img = out.transpose(0, 1, 4, 2, 3).reshape(n, c * k, w, g)
    else:
        img = out.transpose(0, 4, 1, 2, 3).reshape(n, k * c, w, g)
    cache = (win, embedding.shape, layout, (n, c, k, w, g))
    return np.ascontiguousarray(img), cache


def eeg_to_image_backward(dimg: np.ndarray, cache) -> np.ndarray:
    """Gradient of the image w.r.t. the embedding kernels."""
    win, emb_shape, layout, (n, c, k, w, g) = cache
    if layout == "channel_major":
        d5 = dimg.reshape(n, c, k, w, g)
        demb = np.einsum("nckwg,ncwl->gkl", d5, win, optimize=True)
    else:
        d5 = dimg.reshape(n, k, c, w, g)
        demb = np.einsum("nkcwg,ncwl->gkl", d5, win, optimize=True)
    return demb


def _im2col(x: np.ndarray, kk: int, stride: int):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    view = np.lib.stride_tricks.sliding_window_view(xp, (kk, kk), axis=(1, 2))
    view = view[:, ::stride, ::stride]  # (N, Hout, Wout, C, kk, kk)
    hout, wout = view.shape[1], view.shape[2]
    cols = np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n * hout * wout, kk * kk * c
    )
    return cols, (n, h, w, c, hout, wout)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    kk = w.shape[0]
    cout = w.shape[3]
    cols, dims = _im2col(x, kk, stride)
    out = cols @ w.reshape(-1, cout) + b
    n, _, _, _, hout, wout = dims
    cache = (cols, w, stride, dims)
    return out.reshape(n, hout, wout, cout), cache


def conv2d_backward(dout: np.ndarray, cache):
    cols, w, stride, dims = cache
    n, h, win, c, hout, wout = dims
    kk = w.shape[0]
    cout = w.shape[3]
    dflat = dout.reshape(-1, cout)
    dw = (cols.T @ dflat).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(-1, cout).T).reshape(n, hout, wout, kk, kk, c)
    dxp = np.zeros((n, h + 2, win + 2, c), dtype=dout.dtype)
    for i in range(kk):
        for j in range(kk):
            dxp[:, i : i + stride * hout : stride, j : j + stride * wout : stride, :] += dcols[
                :, :, :, i, j, :
            ]
    return dxp[:, 1 : h + 1, 1 : win + 1, :], dw, db


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def silu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return dout * (s + x * s * (1.0 - s))


def central_columns(w: int, fraction: int = 5) -> tuple[int, int]:
    """Retained column range [start, start+count) mirroring the labeled
    central fifth."""
    if w < fraction:
        raise ValueError(f"feature map width {w} too small for central selection")
    start = 2 * w // fraction
    count = -(-w // fraction)
    return start, count


def central_select(fmap: np.ndarray, fraction: int = 5) -> np.ndarray:
    start, count = central_columns(fmap.shape[-2], fraction)
    return fmap[..., start : start + count, :]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --- full network ---


@dataclass
class ForwardCache:
    image_cache: tuple
    conv_caches: list
    preacts: list
    fmap_shape: tuple
    kept: tuple[int, int] | None
    pool_denominator: float
    dropout_mask: np.ndarray | None
    feat_dropped: np.ndarray
    probs: np.ndarray


def forward_batch(
    x: np.ndarray,
    params: ModelParams,
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    want_cache: bool = False,
):
    """Run [N x channels x T] through the network.

    Returns (probs [N x 6], feats [N x feat_dim]) and, when want_cache, the
    cache needed by :func:`backward_batch`. Dropout is active only in train
    mode and draws its mask from rng.
    """
    x = np.asarray(x, dtype=cfg.np_dtype)
    img, image_cache = eeg_to_image_batch(x, params.embedding, cfg.row_layout, cfg.stride)

    h = img
    conv_caches, preacts = [], []
    for w, b in zip(params.conv_w, params.conv_b):
        z, cc = conv2d_forward(h, w, b, cfg.conv_stride)
        h = silu(z)
        conv_caches.append(cc)
        preacts.append(z)

    fmap = h
    if cfg.pool_full_width:
        kept = None
        pooled_region = fmap
    else:
        start, count = central_columns(fmap.shape[2], cfg.central_fraction)
        kept = (start, count)
        pooled_region = fmap[:, :, start : start + count, :]
    denom = float(pooled_region.shape[1] * pooled_region.shape[2])
    feat = pooled_region.sum(axis=(1, 2)) / denom

    if train and cfg.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        keep = 1.0 - cfg.dropout_rate
        mask = (rng.random(feat.shape) < keep).astype(feat.dtype) / keep
        feat_dropped = feat * mask
    else:
        mask = None
        feat_dropped = feat

    logits = feat_dropped @ params.dense_w + params.dense_b
    probs = softmax(logits)

    if not want_cache:
        return probs, feat
    cache = ForwardCache(
        image_cache=image_cache,
        conv_caches=conv_caches,
        preacts=preacts,
        fmap_shape=fmap.shape,
        kept=kept,
        pool_denominator=denom,
        dropout_mask=mask,
        feat_dropped=feat_dropped,
        probs=probs,
    )
    return probs, feat, cache


def kl_div_rows(y: np.ndarray, p: np.ndarray, clip: float = 1e-15) -> np.ndarray:
    """Per-row KL(y || p) with 0*ln(0/.) = 0 and p clipped away from zero."""
    p = np.maximum(p, clip)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(y > 0, y * (np.log(np.maximum(y, clip)) - np.log(p)), 0.0)
    return terms.sum(axis=-1)


def backward_batch(
    y: np.ndarray,
    weights: np.ndarray,
    params: ModelParams,
    cfg: ModelConfig,
    cache: ForwardCache,
) -> tuple[float, ModelParams]:
    """Gradients of sum_i weights_i * KL(y_i || p_i) for every parameter.

    Returns (loss, grads) where grads mirrors the parameter shapes.
    """
    probs = cache.probs
    loss = float((weights * kl_div_rows(y, probs)).sum())
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss}; prob range [{probs.min()}, {probs.max()}]"
        )

    grads = params.zeros_like()
    dlogits = (weights[:, None] * (probs - y)).astype(cfg.np_dtype)

    grads.dense_w[...] = cache.feat_dropped.T @ dlogits
    grads.dense_b[...] = dlogits.sum(axis=0)
    dfeat = dlogits @ params.dense_w.T
    if cache.dropout_mask is not None:
        dfeat = dfeat * cache.dropout_mask

    dfmap = np.zeros(cache.fmap_shape, dtype=cfg.np_dtype)
    spread = (dfeat / cache.pool_denominator)[:, None, None, :]
    if cache.kept is None:
        dfmap += spread
    else:
        start, count = cache.kept
        dfmap[:, :, start : start + count, :] = spread

    dh = dfmap
    for i in reversed(range(len(params.conv_w))):
        dz = silu_backward(dh, cache.preacts[i])
        dh, dw, db = conv2d_backward(dz, cache.conv_caches[i])
        grads.conv_w[i][...] = dw
        grads.conv_b[i][...] = db

    if cfg.learnable_embedding:
        grads.embedding[...] = eeg_to_image_backward(dh, cache.image_cache)
    return loss, grads


# --- single-segment convenience wrappers ---


def forward(
    seg_samples: np.ndarray,
    params: ModelParams,
    cfg: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One scaled [channels x T] segment -> (probabilities, pooled feature)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    probs, feat = forward_batch(
        seg_samples[None], params, cfg, train=(mode == "train"), rng=rng
    )
    return probs[0], feat[0]


def backward(
    seg_samples: np.ndarray,
    params: ModelParams,
    cfg: ModelConfig,
    target: np.ndarray,
    weight: float,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> tuple[float, ModelParams]:
    """Loss and exact gradients of weight * KL(target || prediction) for one
    segment."""
    _, _, cache = forward_batch(
        seg_samples[None], params, cfg, train=train, rng=rng, want_cache=True
    )
    return backward_batch(
        np.asarray(target)[None], np.array([weight]), params, cfg, cache
    )


def eeg_to_image(seg_samples: np.ndarray, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """One [channels x T] segment -> [H x W x groups] image."""
    img, _ = eeg_to_image_batch(seg_samples[None], params.embedding, cfg.row_layout, cfg.stride)
    return img[0]


# --- checkpoints: versioned binary + JSON sidecar ---


def save_checkpoint(path: Path, params: ModelParams, cfg: ModelConfig, meta: dict | None = None) -> None:
    path = Path(path)
    tensors = list(params.named_arrays())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors:
            nb = name.encode()
            dcode = _DTYPE_CODES[str(arr.dtype)]
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", dcode, arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype=_DTYPE_FROM_CODE[dcode]).tobytes())
    sidecar = {
        "config": to_jsonable(cfg),
        "config_hash": config_hash(cfg),
        "format_version": CHECKPOINT_VERSION,
    }
    if meta:
        sidecar.update(to_jsonable(meta))
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(sidecar, f, sort_keys=True, indent=1)
        f.write("\n")


def load_checkpoint(path: Path) -> tuple[ModelParams, ModelConfig, dict]:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode()
            dcode, ndim = struct.unpack("<BB", f.read(2))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            dtype = np.dtype(_DTYPE_FROM_CODE[dcode])
            raw = f.read(int(np.prod(shape)) * dtype.itemsize)
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    with open(path.with_suffix(path.suffix + ".json")) as f:
        sidecar = json.load(f)
    cfg_dict = dict(sidecar["config"])
    cfg_dict["backbone_channels"] = tuple(cfg_dict["backbone_channels"])
    cfg = ModelConfig(**cfg_dict)
    n_stages = len(cfg.backbone_channels)
    params = ModelParams(
        embedding=arrays["embedding"],
        conv_w=[arrays[f"conv{i}_w"] for i in range(n_stages)],
        conv_b=[arrays[f"conv{i}_b"] for i in range(n_stages)],
        dense_w=arrays["dense_w"],
        dense_b=arrays["dense_b"],
    )
    return params, cfg, sidecar


def variant_config(base: ModelConfig, tag: str) -> ModelConfig:
    """Component-removal variants; each alters exactly one thing.

    full: as configured. no_central: pool over the whole temporal extent.
    no_pretrain: random backbone init instead of transfer. no_eeg2img: fixed
    interleaved-reshape embedding with zero learnable weights.
    """
    if tag == "full":
        return base
    if tag == "no_central":
        return replace(base, pool_full_width=True)
    if tag == "no_pretrain":
        return replace(base, pretrained=False)
    if tag == "no_eeg2img":
        return replace(base, learnable_embedding=False)
    raise ValueError(f"unknown ablation variant {tag!r}")


ABLATION_VARIANTS = ("full", "no_central", "no_pretrain", "no_eeg2img")
