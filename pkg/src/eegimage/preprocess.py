"""Signal conditioning: Butterworth bandpass, amplitude clipping, 0-255 scaling.

Order of operations is montage -> filter -> clip -> scale. Augmentations run
in microvolt space, so scaling is the last step before the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .data import EegSegment

CLIP_UV = 1024.0
SCALE_MAX = 255.0


@dataclass(frozen=True)
class FilterSpec:
    fs: float
    order: int = 3
    low_hz: float = 0.5
    high_hz: float = 45.0
    mode: str = "zero_phase"  # or "causal"

    def __post_init__(self):
        if not (0 < self.low_hz < self.high_hz < self.fs / 2):
            raise ValueError(
                f"band edges must satisfy 0 < {self.low_hz} < {self.high_hz} < fs/2={self.fs / 2}"
            )
        if self.mode not in ("zero_phase", "causal"):
            raise ValueError(f"unknown filter mode {self.mode!r}")
        if self.order < 1:
            raise ValueError("order must be >= 1")


def design_bandpass(spec: FilterSpec) -> np.ndarray:
    """Digital Butterworth bandpass as second-order sections.

    Bilinear transform with frequency pre-warping; SOS form keeps the cascade
    numerically stable near the low band edge.
    """
    return sps.butter(
        spec.order,
        [spec.low_hz, spec.high_hz],
        btype="bandpass",
        output="sos",
        fs=spec.fs,
    )


def bandpass_response(spec: FilterSpec, freqs_hz: np.ndarray) -> np.ndarray:
    """|H| of the designed filter at the given frequencies (single pass)."""
    sos = design_bandpass(spec)
    _, h = sps.sosfreqz(sos, worN=np.asarray(freqs_hz, dtype=float), fs=spec.fs)
    return np.abs(h)


def filter_array(x: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Bandpass each row of a [channels x T] array."""
    sos = design_bandpass(spec)
    if spec.mode == "causal":
        return sps.sosfilt(sos, x, axis=-1)
    t = x.shape[-1]
    if t <= 6 * spec.order:
        raise ValueError(
            f"zero-phase mode needs more than {6 * spec.order} samples, got {t}"
        )
    # Reflective padding sized to the slowest corner's settle time; order-based
    # padding is far too short for a 0.5 Hz edge.
    padlen = min(t - 1, int(round(spec.fs / spec.low_hz)))
    return sps.sosfiltfilt(sos, x, axis=-1, padtype="even", padlen=padlen)


def filter_segment(seg: EegSegment, spec: FilterSpec) -> EegSegment:
    return seg.with_samples(filter_array(seg.samples, spec).astype(seg.samples.dtype))


def clip_scale_array(x: np.ndarray) -> np.ndarray:
    """Clip to +-1024 uV then map linearly onto [0, 255]."""
    if np.any(np.isnan(x)):
        raise ValueError("NaN in input samples")
    clipped = np.clip(x, -CLIP_UV, CLIP_UV)
    return (clipped + CLIP_UV) * (SCALE_MAX / (2 * CLIP_UV))


def unscale_array(y: np.ndarray) -> np.ndarray:
    """Inverse of clip_scale_array on in-range values (back to microvolts)."""
    return y * (2 * CLIP_UV / SCALE_MAX) - CLIP_UV


def clip_and_scale(seg: EegSegment) -> EegSegment:
    return seg.with_samples(clip_scale_array(seg.samples).astype(seg.samples.dtype))


def preprocess_segment(seg: EegSegment, spec: FilterSpec) -> EegSegment:
    """filter -> clip -> scale (montage assumed already applied)."""
    return clip_and_scale(filter_segment(seg, spec))
