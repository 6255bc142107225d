"""Spatial confidence maps for BOV(Raw) + PLSDA and dictionary-atom tiling."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .classifiers import PlsdaModel
from .encoders import BovDictionary, bov_similarities, dense_batch, pool_index, zca_unwhiten
from .patch import NormalizedPatch

MAP_CMAP = "gray"  # monochrome: brighter is more target-like


@dataclass(eq=False)
class ConfidenceMap:
    values: np.ndarray  # (rows, cols) one value per 2x2 descriptor window
    centers_px: np.ndarray  # (rows, cols, 2) window centres in patch pixels
    quadrant: np.ndarray  # (rows, cols) pooling cell whose weights scored the window


def confidence_map(xp, dictionary: BovDictionary, plsda: PlsdaModel, pooling: int = 2,
                   window=None, stride=None) -> ConfidenceMap:
    """Score every 2x2 block of neighbouring descriptors with its quadrant's weights.

    A block is encoded like one pooling cell (max similarity per atom over
    its four descriptors) and dotted with the K-weight block of the cell
    containing the block centre. The PLSDA intercept and the
    standardisation offset are global shifts and are left out.
    """
    px = xp.pixels if isinstance(xp, NormalizedPatch) else np.asarray(xp, dtype=np.float64)
    K = dictionary.K
    w = plsda.effective_weights()
    if w.size != pooling * pooling * K:
        raise ValueError(f"PLSDA has {w.size} weights, expected {pooling * pooling * K} "
                         f"for {pooling}x{pooling}-pooled BOV with K={K}")
    desc, centers = dense_batch(px[None], dictionary.kind, window, stride)
    rows = np.unique(centers[:, 0]).size
    cols = centers.shape[0] // rows
    if rows * cols != centers.shape[0] or rows < 2 or cols < 2:
        raise ValueError("descriptor grid too small for 2x2 windows")
    sims = bov_similarities(desc[0], dictionary).reshape(rows, cols, K)
    enc = np.maximum(np.maximum(sims[:-1, :-1], sims[1:, :-1]),
                     np.maximum(sims[:-1, 1:], sims[1:, 1:]))  # (rows-1, cols-1, K)
    cgrid = centers.reshape(rows, cols, 2)
    wc = 0.25 * (cgrid[:-1, :-1] + cgrid[1:, :-1] + cgrid[:-1, 1:] + cgrid[1:, 1:])
    quad = pool_index(wc.reshape(-1, 2), px.shape, pooling).reshape(rows - 1, cols - 1)
    blocks = w.reshape(pooling * pooling, K)[quad]
    return ConfidenceMap((enc * blocks).sum(axis=-1), wc, quad)


def rank_percentiles(values):
    """Percentile rank (0-100) of each value within the pooled set, ties averaged."""
    from scipy.stats import rankdata

    v = np.asarray(values, dtype=np.float64)
    flat = v.ravel()
    if flat.size == 1:
        return np.full(v.shape, 100.0)
    return ((rankdata(flat) - 1) / (flat.size - 1) * 100.0).reshape(v.shape)


@dataclass(eq=False)
class DictionaryImage:
    image: np.ndarray  # tiled grid in [0, 1]
    tiles: np.ndarray  # (K, h, w) stretched atoms
    grid: tuple  # (rows, cols)


def tile_layout(K):
    rows = max(1, int(np.floor(np.sqrt(K))))
    return rows, int(np.ceil(K / rows))


def render_dictionary(dictionary: BovDictionary, gap: int = 1, fill: float = 1.0) -> DictionaryImage:
    """Un-whiten each atom into an image tile, contrast-stretch it and tile the set."""
    if dictionary.kind != "Raw":
        raise ValueError(f"cannot render {dictionary.kind} atoms as images (Raw dictionaries only)")
    atoms = zca_unwhiten(dictionary.zca, dictionary.D_mat)
    side = int(round(np.sqrt(atoms.shape[1])))
    if side * side != atoms.shape[1]:
        raise ValueError(f"atom dimension {atoms.shape[1]} is not a square patch")
    lo = atoms.min(axis=1, keepdims=True)
    span = atoms.max(axis=1, keepdims=True) - lo
    flat = span <= 1e-12 * np.maximum(np.abs(atoms).max(axis=1, keepdims=True), 1e-300)
    tiles = np.where(flat, 0.5, (atoms - lo) / np.where(flat, 1.0, span))
    tiles = tiles.reshape(-1, side, side)
    r, c = tile_layout(len(tiles))
    img = np.full((r * side + (r - 1) * gap, c * side + (c - 1) * gap), fill)
    for k, t in enumerate(tiles):
        i, j = divmod(k, c)
        img[i * (side + gap):i * (side + gap) + side, j * (side + gap):j * (side + gap) + side] = t
    return DictionaryImage(img, tiles, (r, c))


def save_png(image, path, vmin=None, vmax=None, cmap=MAP_CMAP):
    """Write a grayscale PNG without timestamp or software metadata."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.image as mimage

    mimage.imsave(path, np.asarray(image, dtype=np.float64), cmap=cmap, vmin=vmin, vmax=vmax,
                  metadata={"Software": None})


def write_map_csv(cmap: ConfidenceMap, path, percentiles=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "center_row_px", "center_col_px", "quadrant", "confidence",
                    "percentile"])
        for (i, j), v in np.ndenumerate(cmap.values):
            p = "" if percentiles is None else repr(float(percentiles[i, j]))
            w.writerow([i, j, repr(float(cmap.centers_px[i, j, 0])),
                        repr(float(cmap.centers_px[i, j, 1])), int(cmap.quadrant[i, j]),
                        repr(float(v)), p])
