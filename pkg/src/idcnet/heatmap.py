"""Whole-slide reconstruction and prediction heatmap rendering.

Patches carry their slide coordinates, so one patient's patches can be
placed back onto a canvas together with their predicted probabilities. The
probability field is piecewise constant over 50x50 patch footprints (the
"pixelated" raw map); Gaussian smoothing with a normalized 25x25 kernel
softens it before it is blended over the reassembled slide.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .data import PATCH_SIZE, PatchRecord, decode_patch

NO_DATA = -1.0


class SlideCanvas:
    """Reassembled slide: RGB pixels plus a probability field.

    ``probs`` holds values in [0, 1] where a patch was placed and the
    NO_DATA sentinel elsewhere.
    """

    def __init__(self, height: int, width: int):
        self.image = np.zeros((height, width, 3), dtype=np.uint8)
        self.probs = np.full((height, width), NO_DATA, dtype=np.float32)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def data_mask(self) -> np.ndarray:
        return self.probs >= 0.0


def assemble_slide(records: Sequence[PatchRecord], probabilities: Sequence[float],
                   patch_loader: Callable[[PatchRecord], np.ndarray] | None = None,
                   ) -> SlideCanvas:
    """Place one patient's patches and their probabilities onto a canvas.

    The canvas spans (max_y + 50) x (max_x + 50) pixels. Overlapping patches
    are resolved last-writer-wins after sorting by (y, x), which makes the
    result deterministic regardless of input order.
    """
    records = list(records)
    probabilities = np.asarray(probabilities, dtype=np.float32)
    if not records:
        raise ValueError("assemble_slide: no records")
    if len(records) != len(probabilities):
        raise ValueError(f"assemble_slide: {len(records)} records vs "
                         f"{len(probabilities)} probabilities")
    patients = {r.patient_id for r in records}
    if len(patients) != 1:
        raise ValueError(f"assemble_slide: records span multiple patients: {sorted(patients)}")
    if probabilities.size and (probabilities.min() < 0.0 or probabilities.max() > 1.0):
        raise ValueError("assemble_slide: probabilities must lie in [0, 1]")
    if patch_loader is None:
        patch_loader = lambda record: decode_patch(record.path)

    height = max(r.y for r in records) + PATCH_SIZE
    width = max(r.x for r in records) + PATCH_SIZE
    canvas = SlideCanvas(height, width)
    for record, prob in sorted(zip(records, probabilities), key=lambda rp: (rp[0].y, rp[0].x)):
        tile = patch_loader(record)
        if tile.shape != (PATCH_SIZE, PATCH_SIZE, 3):
            raise ValueError(f"assemble_slide: patch {record.path} decoded to {tile.shape}")
        canvas.image[record.y:record.y + PATCH_SIZE, record.x:record.x + PATCH_SIZE] = tile
        canvas.probs[record.y:record.y + PATCH_SIZE, record.x:record.x + PATCH_SIZE] = prob
    return canvas


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized isotropic Gaussian kernel (sums to exactly 1)."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"gaussian kernel size must be odd, got {size}")
    if sigma <= 0:
        raise ValueError(f"gaussian sigma must be > 0, got {sigma}")
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    dist_sq = coords[:, None] ** 2 + coords[None, :] ** 2
    kernel = np.exp(-dist_sq / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def _smooth_1d(field: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    half = taps.size // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (half, half)
    padded = np.pad(field, pad, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, taps.size, axis=axis)
    return windows @ taps


def gaussian_smooth(prob_field: np.ndarray, kernel_size: int = 25,
                    sigma: float | None = None) -> np.ndarray:
    """Convolve a 2-D field with a normalized Gaussian, replicate-padded.

    ``sigma`` defaults to kernel_size/6 so the kernel spans about +-3 sigma.
    The kernel is separable, so this runs as two 1-D passes; the result is
    identical to the full 2-D convolution because the normalized 2-D kernel
    factorizes exactly.
    """
    field = np.asarray(prob_field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError(f"gaussian_smooth: need a 2-d field, got shape {field.shape}")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"gaussian_smooth: kernel size must be odd, got {kernel_size}")
    if sigma is None:
        sigma = kernel_size / 6.0
    if sigma <= 0:
        raise ValueError(f"gaussian_smooth: sigma must be > 0, got {sigma}")
    half = kernel_size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    taps = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    taps /= taps.sum()
    out = _smooth_1d(_smooth_1d(field, taps, axis=1), taps, axis=0)
    return out.astype(np.asarray(prob_field).dtype, copy=False)


def probability_colormap(probs: np.ndarray) -> np.ndarray:
    """Linear blue (0) to red (1) color ramp, uint8 RGB."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([255.0 * p, np.zeros_like(p), 255.0 * (1.0 - p)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def render_overlay(canvas: SlideCanvas, smoothed: np.ndarray, alpha: float = 0.4,
                   path=None) -> np.ndarray:
    """Blend the colormapped probability layer over the slide.

    out = (1 - alpha) * slide + alpha * colormap(p), applied only where the
    canvas has data; sentinel regions keep the original pixels. Writes a PNG
    when ``path`` is given and always returns the uint8 image.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"render_overlay: alpha must be in [0, 1], got {alpha}")
    smoothed = np.asarray(smoothed)
    if smoothed.shape != canvas.probs.shape:
        raise ValueError(f"render_overlay: field shape {smoothed.shape} does not match "
                         f"canvas {canvas.probs.shape}")
    color = probability_colormap(smoothed).astype(np.float64)
    blended = (1.0 - alpha) * canvas.image.astype(np.float64) + alpha * color
    out = np.rint(blended).clip(0, 255).astype(np.uint8)
    mask = canvas.data_mask()
    out[~mask] = canvas.image[~mask]
    if path is not None:
        save_image(path, out)
    return out


def render_raw_heatmap(canvas: SlideCanvas, path=None) -> np.ndarray:
    """Colormapped, unsmoothed probability field; no-data regions black."""
    out = probability_colormap(canvas.probs)
    out[~canvas.data_mask()] = 0
    if path is not None:
        save_image(path, out)
    return out


def save_image(path, image: np.ndarray) -> None:
    Image.fromarray(image).save(path)


def write_sidecar(path, records: Sequence[PatchRecord], probabilities,
                  threshold: float = 0.5) -> dict:
    """Per-slide JSON summary: patch count, fraction predicted positive at
    the threshold, and mean probability."""
    probs = np.asarray(probabilities, dtype=np.float64)
    sidecar = {
        "patch_count": len(records),
        "positive_fraction": float((probs >= threshold).mean()) if probs.size else 0.0,
        "mean_probability": float(probs.mean()) if probs.size else 0.0,
    }
    Path(path).write_text(json.dumps(sidecar, indent=1) + "\n")
    return sidecar
