"""RX anomaly prescreening with DP-means alarm clustering."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .dataset import Frame, Lane


@dataclass(eq=False)
class ConfidenceImage:
    values: np.ndarray
    frame: Frame

    def pixel_to_utm(self, rows, cols):
        return self.frame.pixel_to_utm(rows, cols)


@dataclass
class Alarm:
    utm: tuple[float, float]
    confidence: float
    source: str = "prescreener"
    cluster_members: int = 1


def rx_confidence(frame: Frame, fore: int = 40, back: int = 80) -> ConfidenceImage:
    """RX statistic on the magnitude image of ``frame``.

    Each pixel becomes ``(mu_t - mu_b)**2 / var_b`` where ``mu_t`` is the mean
    of the ``fore x fore`` window centred there and ``mu_b``, ``var_b`` are
    the mean and (population) variance of the surrounding ``back x back``
    window with the foreground removed. Pixels where the background window
    does not fit, or whose background is flat, get 0.
    """
    if back <= fore:
        raise ValueError("background window must be larger than the foreground window")
    mag = np.abs(np.asarray(frame.pixels, dtype=np.complex128))
    if min(mag.shape) < back:
        raise ValueError(f"frame {mag.shape} smaller than the {back}x{back} background window")
    # the statistic is affine invariant; standardising first keeps the
    # windowed sums well conditioned
    sd = mag.std()
    if sd == 0:
        return ConfidenceImage(np.zeros_like(mag), frame)
    z = (mag - mag.mean()) / sd
    return ConfidenceImage(_kernels.rx_lambda(z, fore, back), frame)


def local_maxima(conf: ConfidenceImage, min_confidence: float = 0.0) -> list[Alarm]:
    """Interior pixels strictly above all 8 neighbours with value >= ``min_confidence``."""
    v = conf.values
    if v.shape[0] < 3 or v.shape[1] < 3:
        return []
    c = v[1:-1, 1:-1]
    peak = c >= min_confidence
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            peak &= c > v[1 + dr:v.shape[0] - 1 + dr, 1 + dc:v.shape[1] - 1 + dc]
    rr, cc = np.nonzero(peak)
    rr = rr + 1
    cc = cc + 1
    east, north = conf.pixel_to_utm(rr, cc)
    return [Alarm((float(e), float(n)), float(v[r, c_]))
            for e, n, r, c_ in zip(east, north, rr, cc)]


@dataclass
class DpMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective: np.ndarray
    converged: bool


def scan_order(alarms):
    """Descending confidence, ties broken by (easting, northing)."""
    return sorted(range(len(alarms)),
                  key=lambda i: (-alarms[i].confidence, alarms[i].utm[0], alarms[i].utm[1]))


def dp_means(points, radius: float = 1.0, max_iter: int = 100) -> DpMeansResult:
    """DP-means on 2-D points taken in the given order."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return DpMeansResult(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros(0), True)
    # centre coordinates: UTM northings are ~1e6 and squared distances lose
    # precision otherwise
    offset = pts.mean(axis=0)
    labels, centers, trace, converged = _kernels.dpmeans(pts - offset, radius, max_iter)
    return DpMeansResult(labels, centers + offset, trace, bool(converged))


def dp_means_cluster(alarms: list[Alarm], radius: float = 1.0, max_iter: int = 100) -> list[Alarm]:
    """Merge alarms with DP-means; one alarm per cluster at its centroid.

    The merged confidence is the l2 norm of member confidences.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if not alarms:
        return []
    order = scan_order(alarms)
    pts = np.array([alarms[i].utm for i in order])
    conf = np.array([alarms[i].confidence for i in order])
    res = dp_means(pts, radius, max_iter)
    k = res.centers.shape[0]
    energy = np.zeros(k)
    np.add.at(energy, res.labels, conf ** 2)
    members = np.bincount(res.labels, minlength=k)
    return [Alarm((float(res.centers[j, 0]), float(res.centers[j, 1])), float(np.sqrt(energy[j])),
                  "prescreener", int(members[j])) for j in range(k)]


def prescreen_lane(lane: Lane, min_confidence: float = 0.0, fore: int = 40, back: int = 80,
                   radius: float = 1.0, channel: str = "VV") -> list[Alarm]:
    """Full prescreener on one lane's VV frames.

    Alarms from all frames are pooled in UTM, clustered, restricted to the
    lane area and returned by descending confidence.
    """
    if channel not in lane.frames:
        raise ValueError(f"lane {lane.spec.lane_id!r} has no {channel} frames")
    pooled = []
    for frame in lane.frames[channel]:
        pooled.extend(local_maxima(rx_confidence(frame, fore, back), min_confidence))
    clustered = dp_means_cluster(pooled, radius)
    inside = [a for a in clustered if lane.contains(*a.utm)]
    order = scan_order(inside)
    return [inside[i] for i in order]


ALARM_COLUMNS = ["easting_m", "northing_m", "confidence", "source", "cluster_members"]


def write_alarms_csv(alarms, path, extra=None):
    """Write alarms; ``extra`` maps additional column names to per-alarm values."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ALARM_COLUMNS + list(extra))
        for i, a in enumerate(alarms):
            w.writerow([repr(a.utm[0]), repr(a.utm[1]), repr(float(a.confidence)), a.source,
                        a.cluster_members] + [extra[k][i] for k in extra])


def read_alarms_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Alarm((float(r["easting_m"]), float(r["northing_m"])), float(r["confidence"]),
                  r["source"], int(r["cluster_members"])) for r in rows]
