"""Alarm-centred patches and background normalisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Lane

PATCH_SIZE = 100
CENTER_SIZE = 50
EPS = 1e-12


class OutOfLaneError(ValueError):
    pass


@dataclass(eq=False)
class ComplexPatch:
    pixels: np.ndarray
    center_utm: tuple[float, float]
    channel: str
    resolution_m: float = 0.03


@dataclass(eq=False)
class NormalizedPatch:
    pixels: np.ndarray
    bg_mean: float
    bg_std: float
    degenerate: bool = False


def select_frame(lane: Lane, utm, channel: str):
    """Frame of ``channel`` whose down-track offset to ``utm`` is nearest its standoff."""
    frames = lane.frames[channel]
    offsets = np.array([abs((utm[1] - f.sensor_northing) - f.standoff_m) for f in frames])
    return frames[int(np.argmin(offsets))]


def extract_patch(lane: Lane, utm, channel: str, size: int = PATCH_SIZE) -> ComplexPatch:
    """Nearest-neighbour ``size x size`` patch centred on ``utm``.

    The centre pixel (index ``size // 2``) is the frame pixel nearest ``utm``.
    Rows/columns falling outside the frame repeat the edge pixel.
    """
    if channel not in lane.frames:
        raise ValueError(f"lane has no {channel} channel")
    if not lane.contains(*utm):
        raise OutOfLaneError(f"{utm} lies outside lane {lane.spec.lane_id!r}")
    frame = select_frame(lane, utm, channel)
    r, c = frame.utm_to_pixel(*utm)
    r0, c0 = int(np.rint(r)), int(np.rint(c))
    off = np.arange(size) - size // 2
    rows = np.clip(r0 + off, 0, frame.pixels.shape[0] - 1)
    cols = np.clip(c0 + off, 0, frame.pixels.shape[1] - 1)
    px = frame.pixels[np.ix_(rows, cols)].astype(np.complex128)
    return ComplexPatch(px, (float(utm[0]), float(utm[1])), channel, frame.resolution_m)


def background_mask(shape, center: int):
    """True outside the centred ``center x center`` window."""
    mask = np.ones(shape, dtype=bool)
    r0 = (shape[0] - center) // 2
    c0 = (shape[1] - center) // 2
    mask[r0:r0 + center, c0:c0 + center] = False
    return mask


def normalize_patch(x: ComplexPatch | np.ndarray, center: int | None = None) -> NormalizedPatch:
    """``(|X| - mu_bg) / sigma_bg`` with background stats outside the centre window.

    The centre window is half the patch side (1.5 m of a 3 m patch) unless
    ``center`` is given. sigma_bg is the population standard deviation; a flat
    background falls back to ``EPS`` and marks the patch degenerate.
    """
    px = x.pixels if isinstance(x, ComplexPatch) else np.asarray(x)
    mag = np.abs(px).astype(np.float64)
    if center is None:
        center = mag.shape[0] // 2
    bg = mag[background_mask(mag.shape, center)]
    mu = float(bg.mean())
    sd = float(bg.std())
    # a flat background can still give a rounding-level std
    degenerate = not sd > EPS * abs(mu)
    if degenerate:
        sd = EPS
        out = np.zeros_like(mag) if np.all(mag == mag.flat[0]) else (mag - mu) / sd
    else:
        out = (mag - mu) / sd
    return NormalizedPatch(out, mu, sd, degenerate)
