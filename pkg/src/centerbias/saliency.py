"""Gradient saliency maps and saliency-shift difference matrices.

The scalar score behind every map is the mean true-class logit over the
object mask; the map is the absolute input gradient of that score.  A
saliency-shift map slides a crop window over an oversized canvas (object and
background move together), re-aligns each map into object-centered
coordinates, and reduces each shift to the mean absolute difference from the
centered map over the overlap, finally dividing the whole matrix by its
population standard deviation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import unet
from .data import (BackgroundSpec, Sample, SampleMeta, _mask_bbox,
                   generate_background)
from .netpbm import to_u8, write_pgm
from .rng import stream

__all__ = [
    "saliency_map", "CanvasScene", "make_scene", "ShiftGrid",
    "SaliencyShiftMap", "saliency_shift_map", "dispersion_normalize",
    "export_shift_map",
]


def saliency_map(model: unet.Model, sample: Sample) -> np.ndarray:
    """Absolute input gradient of the mask-mean true-class logit.

    Returns an (H, W) array of the input's dims; errors on an empty mask.
    """
    mask = sample.target > 0
    count = int(mask.sum())
    if count == 0:
        raise ValueError("sample has an empty object mask")
    x = sample.input.astype(model.config.dtype, copy=False)
    logits, tape = unet.forward(model, x)
    grad_logits = np.zeros_like(logits)
    grad_logits[0, sample.meta.digit_class + 1][mask] = 1.0 / count
    _, grad_input = unet.backward(model, tape, grad_logits)
    return np.abs(grad_input[0, 0])


@dataclass
class CanvasScene:
    """Composited oversized canvas with the object at its exact center."""

    canvas: np.ndarray        # (Hc, Wc) float32
    target: np.ndarray        # (Hc, Wc) int64
    digit_class: int
    crop_hw: tuple[int, int]

    @property
    def margins(self) -> tuple[int, int]:
        H, W = self.crop_hw
        return (self.canvas.shape[0] - H) // 2, (self.canvas.shape[1] - W) // 2

    def crop(self, dx: int, dy: int) -> Sample:
        """The (H, W) window moved (dx, dy) from the centered position."""
        H, W = self.crop_hw
        my, mx = self.margins
        if abs(dy) > my or abs(dx) > mx:
            raise ValueError(f"shift ({dx}, {dy}) exceeds margins ({mx}, {my})")
        top, left = my + dy, mx + dx
        img = self.canvas[top:top + H, left:left + W]
        tgt = self.target[top:top + H, left:left + W]
        meta = SampleMeta(self.digit_class, None, None, _mask_bbox(tgt > 0))
        return Sample(np.ascontiguousarray(img).reshape(1, 1, H, W),
                      np.ascontiguousarray(tgt), meta)


def make_scene(glyph: np.ndarray, digit_class: int, crop_hw: tuple[int, int],
               extent: tuple[int, int],
               background: BackgroundSpec | None = None,
               seed: int = 0) -> CanvasScene:
    """Build a canvas sized so every crop in the shift grid stays inside and
    fully contains the glyph.  background=None gives an all-black canvas."""
    H, W = crop_hw
    ex, ey = extent
    gh, gw = glyph.shape
    if (H - gh) // 2 < ey or (W - gw) // 2 < ex:
        raise ValueError(
            f"extent ({ex}, {ey}) lets the {gh}x{gw} glyph escape a "
            f"{H}x{W} crop")
    ch, cw = H + 2 * ey, W + 2 * ex
    if background is None:
        canvas = np.zeros((ch, cw), dtype=np.float32)
    else:
        canvas = generate_background(background, (ch, cw), stream(seed))
    target = np.zeros((ch, cw), dtype=np.int64)
    oy, ox = (ch - gh) // 2, (cw - gw) // 2
    mask = glyph > 0.5
    canvas[oy:oy + gh, ox:ox + gw][mask] = 1.0
    target[oy:oy + gh, ox:ox + gw][mask] = digit_class + 1
    return CanvasScene(canvas, target, digit_class, crop_hw)


@dataclass(frozen=True)
class ShiftGrid:
    """Symmetric integer shift lattice: +-extent in steps of stride."""

    extent_x: int
    extent_y: int
    stride: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.extent_x % self.stride or self.extent_y % self.stride:
            raise ValueError("extents must be multiples of the stride")

    @property
    def dxs(self) -> list[int]:
        return list(range(-self.extent_x, self.extent_x + 1, self.stride))

    @property
    def dys(self) -> list[int]:
        return list(range(-self.extent_y, self.extent_y + 1, self.stride))


@dataclass
class SaliencyShiftMap:
    values: np.ndarray        # dispersion-normalized unless flagged
    raw: np.ndarray           # mean |S0 - S| per shift, before normalization
    grid: ShiftGrid
    normalized: bool


def dispersion_normalize(matrix: np.ndarray) -> tuple[np.ndarray, bool]:
    """Divide by the population standard deviation.

    A constant matrix has zero dispersion; it is returned unchanged with a
    False flag instead of dividing by zero.
    """
    std = float(matrix.std())
    if std == 0.0:
        return matrix.copy(), False
    return matrix / std, True


def _overlap_mean_absdiff(s0: np.ndarray, s: np.ndarray,
                          dx: int, dy: int) -> float:
    """Mean |s0 - s| in object-centered coordinates over the overlap."""
    H, W = s0.shape
    r0 = slice(max(0, dy), H + min(0, dy))
    c0 = slice(max(0, dx), W + min(0, dx))
    r1 = slice(max(0, -dy), H - max(0, dy))
    c1 = slice(max(0, -dx), W - max(0, dx))
    return float(np.abs(s0[r0, c0] - s[r1, c1]).mean())


def saliency_shift_map(model: unet.Model, scene: CanvasScene,
                       grid: ShiftGrid) -> SaliencyShiftMap:
    """Raw and dispersion-normalized saliency differences over a shift grid.

    Entry (dy, dx) compares the centered crop's saliency with the saliency
    of the crop moved by (dx, dy), translated back so the object overlaps
    itself.  Entries are independent; the (0, 0) entry is exactly 0.
    """
    s0 = saliency_map(model, scene.crop(0, 0))
    dxs, dys = grid.dxs, grid.dys
    raw = np.zeros((len(dys), len(dxs)), dtype=np.float64)
    for iy, dy in enumerate(dys):
        for ix, dx in enumerate(dxs):
            if dx == 0 and dy == 0:
                continue
            s = saliency_map(model, scene.crop(dx, dy))
            raw[iy, ix] = _overlap_mean_absdiff(s0, s, dx, dy)
    values, normalized = dispersion_normalize(raw)
    return SaliencyShiftMap(values, raw, grid, normalized)


def export_shift_map(shift_map: SaliencyShiftMap, stem) -> None:
    """Write <stem>.csv (one row per dy) and <stem>.pgm (max-scaled)."""
    stem = str(stem)
    with open(stem + ".csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["dy\\dx"] + [str(dx) for dx in shift_map.grid.dxs])
        for dy, row in zip(shift_map.grid.dys, shift_map.values):
            writer.writerow([str(dy)] + [f"{v:.9g}" for v in row])
    write_pgm(stem + ".pgm", to_u8(shift_map.values))
