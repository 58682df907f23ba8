"""Overlay images: windowed CT backdrop with ground truth in blue and prediction in red."""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ShapeError

BLUE = (0, 0, 255)
RED = (255, 0, 0)
OVERLAP_MODES = ("blend", "gt-on-top", "pred-on-top")


@dataclass(frozen=True)
class OverlaySpec:
    """Rendering options.

    ``slice_index=None`` picks the slice with the largest ground-truth area.
    ``alpha`` is the colour opacity over the backdrop (1.0 paints solid colour).
    """

    slice_index: Optional[int] = None
    gt_color: tuple[int, int, int] = BLUE
    pred_color: tuple[int, int, int] = RED
    overlap: str = "blend"
    window_center: float = 40.0
    window_width: float = 80.0
    alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "gt_color", tuple(int(v) for v in self.gt_color))
        object.__setattr__(self, "pred_color", tuple(int(v) for v in self.pred_color))
        if self.gt_color == self.pred_color:
            raise ConfigurationError("ground-truth and prediction colours must differ")
        for c in (self.gt_color, self.pred_color):
            if len(c) != 3 or not all(0 <= v <= 255 for v in c):
                raise ConfigurationError(f"colour {c} is not an RGB triple in 0..255")
        if self.overlap not in OVERLAP_MODES:
            raise ConfigurationError(f"unknown overlap mode {self.overlap!r}; known: {list(OVERLAP_MODES)}")
        if not self.window_width > 0:
            raise ConfigurationError("window_width must be > 0")
        if not 0 < self.alpha <= 1:
            raise ConfigurationError("alpha must be in (0, 1]")

    @property
    def overlap_color(self) -> tuple[int, int, int]:
        if self.overlap == "gt-on-top":
            return self.gt_color
        if self.overlap == "pred-on-top":
            return self.pred_color
        return tuple(int(np.rint((a + b) / 2)) for a, b in zip(self.gt_color, self.pred_color))


def window(ct: np.ndarray, center: float, width: float) -> np.ndarray:
    """Map intensities to uint8 gray through a linear window."""
    lo = center - width / 2
    g = np.clip((np.asarray(ct, dtype=np.float64) - lo) / width, 0.0, 1.0)
    return np.rint(g * 255).astype(np.uint8)


def render_overlay(ct_slice: np.ndarray, gt: np.ndarray, pred: np.ndarray, spec: OverlaySpec = OverlaySpec()) -> np.ndarray:
    """(H, W) CT slice plus binary masks -> (H, W, 3) uint8 RGB."""
    ct_slice, gt, pred = np.asarray(ct_slice), np.asarray(gt) != 0, np.asarray(pred) != 0
    if ct_slice.ndim != 2 or gt.shape != ct_slice.shape or pred.shape != ct_slice.shape:
        raise ShapeError(f"overlay extents differ: ct {ct_slice.shape}, gt {gt.shape}, pred {pred.shape}")
    gray = window(ct_slice, spec.window_center, spec.window_width)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    for sel, color in (
        (gt & ~pred, spec.gt_color),
        (pred & ~gt, spec.pred_color),
        (gt & pred, spec.overlap_color),
    ):
        if not sel.any():
            continue
        c = np.asarray(color, dtype=np.float64)
        if spec.alpha == 1.0:
            rgb[sel] = c.astype(np.uint8)
        else:
            rgb[sel] = np.rint((1 - spec.alpha) * rgb[sel] + spec.alpha * c).astype(np.uint8)
    return rgb


def pick_slice(gt: np.ndarray, pred: Optional[np.ndarray] = None) -> int:
    """Slice with the largest GT area; falls back to prediction area, then the middle slice."""
    gt = np.asarray(gt)
    area = np.count_nonzero(gt.reshape(gt.shape[0], -1), axis=1)
    if area.any():
        return int(np.argmax(area))
    if pred is not None:
        pa = np.count_nonzero(np.asarray(pred).reshape(gt.shape[0], -1), axis=1)
        if pa.any():
            return int(np.argmax(pa))
    return gt.shape[0] // 2


def render_case(volume: np.ndarray, gt: np.ndarray, pred: np.ndarray, spec: OverlaySpec = OverlaySpec()) -> tuple[int, np.ndarray]:
    """Render one slice of a (S, H, W) case; returns (slice index, RGB)."""
    volume = np.asarray(volume)
    if np.shape(gt) != volume.shape or np.shape(pred) != volume.shape:
        raise ShapeError(f"overlay extents differ: ct {volume.shape}, gt {np.shape(gt)}, pred {np.shape(pred)}")
    k = pick_slice(gt, pred) if spec.slice_index is None else spec.slice_index
    if not 0 <= k < volume.shape[0]:
        raise ShapeError(f"slice {k} outside 0..{volume.shape[0] - 1}")
    return k, render_overlay(volume[k], np.asarray(gt)[k], np.asarray(pred)[k], spec)


def png_bytes(rgb: np.ndarray) -> bytes:
    """Encode without ancillary chunks so identical pixels give identical bytes."""
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()
