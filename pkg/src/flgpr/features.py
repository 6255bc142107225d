"""Handcrafted patch features: raw pixels, whole-patch SIFT, LSTAT, 2-D FFT, log-Gabor.

Every extractor has a batch form taking a stack ``(N, H, W)`` and returning
``(N, dim)``; the single-patch forms wrap them and return a FeatureVector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .patch import ComplexPatch, NormalizedPatch

FEATURE_DIMS = {"Raw": 10000, "SIFT": 128, "LSTAT": 18, "FFT2D": 2500, "LogGabor": 1620}
HANDCRAFTED = tuple(FEATURE_DIMS)


@dataclass(eq=False)
class FeatureVector:
    values: np.ndarray
    feature_kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.feature_kind} feature has non-finite values")

    @property
    def dim(self):
        return self.values.size


def _pixels(xp):
    if isinstance(xp, (NormalizedPatch, ComplexPatch)):
        return xp.pixels
    return np.asarray(xp)


def grid_edges(n, parts):
    """Near-equal partition of ``range(n)``; larger pieces first (100/3 -> 34, 33, 33)."""
    sizes = [len(a) for a in np.array_split(np.arange(n), parts)]
    return np.concatenate([[0], np.cumsum(sizes)])


# -- raw pixels ---------------------------------------------------------------

def raw_batch(stack):
    stack = np.asarray(stack, dtype=np.float64)
    return stack.reshape(stack.shape[0], -1).copy()


def feat_raw(xp) -> FeatureVector:
    return FeatureVector(np.asarray(_pixels(xp), dtype=np.float64).ravel(), "Raw")


# -- SIFT ---------------------------------------------------------------------

def gradients(stack):
    """Central-difference magnitude and orientation (degrees in [0, 360)).

    Orientation is the four-quadrant arctangent of the column difference over
    the row difference; borders use symmetric padding.
    """
    stack = np.asarray(stack, dtype=np.float64)
    pad = [(0, 0)] * (stack.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(stack, pad, mode="symmetric")
    di = p[..., 2:, 1:-1] - p[..., :-2, 1:-1]
    dj = p[..., 1:-1, 2:] - p[..., 1:-1, :-2]
    mag = np.sqrt(di * di + dj * dj)
    theta = np.mod(np.degrees(np.arctan2(dj, di)), 360.0)
    return mag, theta


def sift_batch(stack, cells=4, bins=8):
    """Whole-image SIFT-style descriptor for each image in ``stack``.

    Magnitude-weighted orientation histograms (``bins`` of 360/bins degrees)
    over a ``cells x cells`` grid, concatenated cell-major (row-major cells).
    No spatial weighting and no normalisation.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    n, h, w = stack.shape
    if h < cells or w < cells:
        raise ValueError(f"image {h}x{w} smaller than the {cells}x{cells} cell grid")
    mag, theta = gradients(stack)
    b = np.floor(theta / (360.0 / bins)).astype(np.int64) % bins
    re = grid_edges(h, cells)
    ce = grid_edges(w, cells)
    cell_r = np.searchsorted(re, np.arange(h), side="right") - 1
    cell_c = np.searchsorted(ce, np.arange(w), side="right") - 1
    cell = (cell_r[:, None] * cells + cell_c[None, :])
    idx = (np.arange(n)[:, None, None] * (cells * cells * bins)
           + cell[None] * bins + b)
    hist = np.bincount(idx.ravel(), weights=mag.ravel(), minlength=n * cells * cells * bins)
    return hist.reshape(n, cells * cells * bins)


def sift_descriptor(img) -> FeatureVector:
    img = np.asarray(_pixels(img), dtype=np.float64)
    if img.shape[0] < 4 or img.shape[1] < 4:
        raise ValueError("SIFT needs at least a 4x4 image")
    return FeatureVector(sift_batch(img[None])[0], "SIFT")


# -- local statistics ---------------------------------------------------------

def _regions(h, w, parts=3):
    re, ce = grid_edges(h, parts), grid_edges(w, parts)
    return [(slice(re[i], re[i + 1]), slice(ce[j], ce[j + 1]))
            for i in range(parts) for j in range(parts)]


def lstat_batch(stack):
    stack = np.asarray(stack, dtype=np.float64)
    n, h, w = stack.shape
    out = np.empty((n, 18))
    for k, (rs, cs) in enumerate(_regions(h, w)):
        reg = stack[:, rs, cs].reshape(n, -1)
        out[:, 2 * k] = reg.mean(axis=1)
        out[:, 2 * k + 1] = reg.var(axis=1)
    return out


def feat_lstat(xp) -> FeatureVector:
    return FeatureVector(lstat_batch(np.asarray(_pixels(xp), dtype=np.float64)[None])[0], "LSTAT")


# -- 2-D FFT ------------------------------------------------------------------

def fft2d_batch(stack, window=True, quadrant=50):
    """``|FFT2(Re(H * X))|`` restricted to non-negative frequencies on both axes."""
    stack = np.asarray(stack)
    n, h, w = stack.shape
    re = np.real(stack).astype(np.float64)
    if window:
        re = re * np.outer(np.hamming(h), np.hamming(w))[None]
    spec = np.abs(np.fft.fft2(re, axes=(1, 2)))
    return spec[:, :quadrant, :quadrant].reshape(n, -1)


def feat_fft2d(x: ComplexPatch, window: bool = True) -> FeatureVector:
    return FeatureVector(fft2d_batch(np.asarray(_pixels(x))[None], window)[0], "FFT2D")


# -- log-Gabor ----------------------------------------------------------------

@dataclass(eq=False)
class LogGaborBank:
    filters: np.ndarray  # (n_scales * n_orient, H, W), scale-major
    n_scales: int
    n_orient: int
    wavelengths: np.ndarray
    orientations: np.ndarray

    @property
    def center_frequencies(self):
        return 1.0 / self.wavelengths


def build_log_gabor_bank(size=100, n_scales=6, n_orient=6, min_wavelength=3.0, mult=2.0,
                         sigma_on_f=0.65, d_theta_on_sigma=1.2) -> LogGaborBank:
    """Frequency-domain log-Gabor filters (radial log-Gaussian x angular Gaussian).

    Scale ``s`` is centred on frequency ``1 / (min_wavelength * mult**s)``
    cycles/pixel, orientation ``o`` on angle ``o * pi / n_orient``. The DC
    coefficient of every filter is exactly zero.
    """
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.hypot(fx, fy)
    radius[0, 0] = 1.0
    theta = np.arctan2(-fy, fx)
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    sigma_theta = (np.pi / n_orient) / d_theta_on_sigma
    wavelengths = min_wavelength * mult ** np.arange(n_scales)
    angles = np.arange(n_orient) * np.pi / n_orient
    out = np.empty((n_scales * n_orient, size, size))
    for s, wl in enumerate(wavelengths):
        f0 = 1.0 / wl
        radial = np.exp(-np.log(radius / f0) ** 2 / (2 * np.log(sigma_on_f) ** 2))
        radial[0, 0] = 0.0
        for o, ang in enumerate(angles):
            ds = sin_t * np.cos(ang) - cos_t * np.sin(ang)
            dc = cos_t * np.cos(ang) + sin_t * np.sin(ang)
            dtheta = np.abs(np.arctan2(ds, dc))
            out[s * n_orient + o] = radial * np.exp(-dtheta ** 2 / (2 * sigma_theta ** 2))
    return LogGaborBank(out, n_scales, n_orient, wavelengths, angles)


def log_gabor_responses(stack, bank: LogGaborBank):
    """Response magnitudes, shape ``(N, n_filters, H, W)``."""
    stack = np.asarray(stack, dtype=np.float64)
    spec = np.fft.fft2(stack, axes=(1, 2))
    return np.abs(np.fft.ifft2(spec[:, None] * bank.filters[None], axes=(2, 3)))


def region_stats(reg):
    """(mean, variance, kurtosis, skewness, l2 norm) along the last axis.

    Population moments; kurtosis is non-excess. A region with no spread has
    kurtosis and skewness 0.
    """
    mean = reg.mean(axis=-1)
    d = reg - mean[..., None]
    var = (d * d).mean(axis=-1)
    norm = np.sqrt((reg * reg).sum(axis=-1))
    sd = np.sqrt(var)
    flat = sd <= 1e-12 * np.abs(mean)
    safe = np.where(flat, 1.0, sd)
    skew = np.where(flat, 0.0, (d ** 3).mean(axis=-1) / safe ** 3)
    kurt = np.where(flat, 0.0, (d ** 4).mean(axis=-1) / safe ** 4)
    return np.stack([mean, var, kurt, skew, norm], axis=-1)


def loggabor_batch(stack, bank: LogGaborBank | None = None):
    bank = bank or default_bank()
    stack = np.asarray(stack, dtype=np.float64)
    n, h, w = stack.shape
    # zero DC gain: a flat patch has an identically zero response
    flat = np.ptp(stack.reshape(n, -1), axis=1) == 0
    resp = log_gabor_responses(stack, bank)
    resp[flat] = 0.0
    regs = _regions(h, w)
    stats = np.stack([region_stats(resp[:, :, rs, cs].reshape(n, resp.shape[1], -1))
                      for rs, cs in regs], axis=2)  # (N, filters, regions, 5)
    return stats.reshape(n, -1)


_DEFAULT_BANK = None


def default_bank():
    global _DEFAULT_BANK
    if _DEFAULT_BANK is None:
        _DEFAULT_BANK = build_log_gabor_bank()
    return _DEFAULT_BANK


def feat_loggabor(xp, bank: LogGaborBank | None = None) -> FeatureVector:
    return FeatureVector(loggabor_batch(np.asarray(_pixels(xp))[None], bank)[0], "LogGabor")


# -- dispatch -----------------------------------------------------------------

def extract_batch(kind, norm_stack, complex_stack=None, bank=None):
    """Feature matrix for ``kind`` over a stack of patches.

    ``norm_stack`` holds background-normalised patches; FFT2D reads the raw
    complex patches in ``complex_stack`` instead.
    """
    if kind == "Raw":
        return raw_batch(norm_stack)
    if kind == "SIFT":
        return sift_batch(norm_stack)
    if kind == "LSTAT":
        return lstat_batch(norm_stack)
    if kind == "FFT2D":
        if complex_stack is None:
            raise ValueError("FFT2D needs the complex patches")
        return fft2d_batch(complex_stack)
    if kind == "LogGabor":
        out = []
        for i in range(0, len(norm_stack), 8):
            out.append(loggabor_batch(norm_stack[i:i + 8], bank))
        return np.concatenate(out) if out else np.zeros((0, FEATURE_DIMS[kind]))
    raise ValueError(f"unknown feature kind {kind!r}")
