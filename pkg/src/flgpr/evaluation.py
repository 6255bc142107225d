"""Alarm scoring, ROC / partial AUC, bootstrap intervals and lane cross-validation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

FAR_MAX = 0.02
Z95 = 1.96


@dataclass
class ScoredAlarm:
    utm: tuple[float, float]
    confidence: float
    label: str  # "hit" | "false_alarm"
    target_id: str | None = None


def match_alarms(alarm_utm, truth_utm, halo: float = 1.0):
    """Index of the nearest target within ``halo`` of each alarm, -1 if none."""
    a = np.asarray(alarm_utm, dtype=np.float64).reshape(-1, 2)
    t = np.asarray(truth_utm, dtype=np.float64).reshape(-1, 2)
    if a.shape[0] == 0 or t.shape[0] == 0:
        return np.full(a.shape[0], -1, dtype=np.int64)
    d2 = ((a[:, None, :] - t[None, :, :]) ** 2).sum(axis=-1)
    j = np.argmin(d2, axis=1)
    hit = d2[np.arange(a.shape[0]), j] <= halo * halo
    return np.where(hit, j, -1).astype(np.int64)


def score_alarms(alarms, truth, halo: float = 1.0) -> list[ScoredAlarm]:
    """Label each alarm a hit (credited to the nearest target within ``halo``) or a false alarm."""
    idx = match_alarms([a.utm for a in alarms], [t.utm for t in truth], halo)
    out = []
    for a, j in zip(alarms, idx):
        if j >= 0:
            out.append(ScoredAlarm(a.utm, a.confidence, "hit", truth[j].target_id))
        else:
            out.append(ScoredAlarm(a.utm, a.confidence, "false_alarm", None))
    return out


@dataclass(eq=False)
class RocCurve:
    far: np.ndarray
    pd: np.ndarray
    thresholds: np.ndarray
    lane_area_m2: float
    n_targets: int

    def pd_at(self, far_values):
        """Right-continuous step interpolation: best P_d reachable within each FAR."""
        far_values = np.asarray(far_values, dtype=np.float64)
        k = np.searchsorted(self.far, far_values, side="right")
        best = np.concatenate([[0.0], np.maximum.accumulate(self.pd)]) if self.pd.size else np.zeros(1)
        return best[k]


def roc_from_arrays(confidence, target_idx, n_targets: int, area_m2: float) -> RocCurve:
    """ROC over all distinct confidence thresholds.

    ``target_idx`` is the credited target per alarm (-1 for false alarms).
    A target counts as detected at threshold ``tau`` if any alarm credited to
    it has confidence >= ``tau``.
    """
    if area_m2 <= 0:
        raise ValueError("area must be positive")
    if n_targets <= 0:
        raise ValueError("need at least one target")
    conf = np.asarray(confidence, dtype=np.float64)
    tidx = np.asarray(target_idx, dtype=np.int64)
    if conf.size == 0:
        return RocCurve(np.zeros(0), np.zeros(0), np.zeros(0), float(area_m2), int(n_targets))
    thr = np.unique(conf)[::-1]
    fa = np.sort(conf[tidx < 0])
    n_fa = fa.size - np.searchsorted(fa, thr, side="left")
    hits = tidx >= 0
    best = np.full(int(tidx.max()) + 1 if hits.any() else 0, -np.inf)
    if hits.any():
        np.maximum.at(best, tidx[hits], conf[hits])
    best = np.sort(best[np.isfinite(best)])
    n_det = best.size - np.searchsorted(best, thr, side="left")
    return RocCurve(n_fa / float(area_m2), n_det / float(n_targets), thr, float(area_m2),
                    int(n_targets))


def roc_curve(scored, n_targets: int, area_m2: float) -> RocCurve:
    ids = {}
    tidx = [ids.setdefault(s.target_id, len(ids)) if s.label == "hit" else -1 for s in scored]
    return roc_from_arrays([s.confidence for s in scored], tidx, n_targets, area_m2)


def pauc(roc: RocCurve, far_max: float = FAR_MAX) -> float:
    """Area under the step ROC over FAR in [0, far_max], divided by far_max."""
    if far_max <= 0:
        raise ValueError("far_max must be positive")
    if roc.far.size == 0:
        return 0.0
    inside = roc.far < far_max
    f = roc.far[inside]
    h = np.maximum.accumulate(roc.pd)[inside]
    if f.size == 0:
        return 0.0
    edges = np.concatenate([f, [far_max]])
    widths = np.diff(edges) / far_max
    return float(np.clip((widths * h).sum(), 0.0, 1.0))


@dataclass(eq=False)
class VerticalAverage:
    far: np.ndarray
    mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n: int


def far_grid(far_max=FAR_MAX, step=0.0005):
    return np.linspace(0.0, far_max, int(round(far_max / step)) + 1)


def vertical_average(rocs, grid=None) -> VerticalAverage:
    """Pointwise mean P_d on a fixed FAR grid with a normal 95% band."""
    if not rocs:
        raise ValueError("need at least one ROC curve")
    grid = far_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    pds = np.array([r.pd_at(grid) for r in rocs])
    mean = pds.mean(axis=0)
    if len(rocs) > 1:
        half = Z95 * pds.std(axis=0, ddof=1) / np.sqrt(len(rocs))
    else:
        half = np.zeros_like(mean)
    return VerticalAverage(grid, mean, mean - half, mean + half, len(rocs))


def mean_ci(values):
    v = np.asarray(values, dtype=np.float64)
    m = float(v.mean())
    if v.size < 2:
        return m, m, m
    half = Z95 * float(v.std(ddof=1)) / np.sqrt(v.size)
    return m, m - half, m + half


@dataclass(eq=False)
class EvalSet:
    """Alarms to score: features, credited target per alarm, and the scoring context."""

    X: np.ndarray
    target_idx: np.ndarray
    n_targets: int
    area_m2: float

    @property
    def labels(self):
        return np.where(np.asarray(self.target_idx) >= 0, 1.0, -1.0)

    def pauc(self, scores, far_max=FAR_MAX):
        return pauc(roc_from_arrays(scores, self.target_idx, self.n_targets, self.area_m2), far_max)


@dataclass(eq=False)
class PaucScore:
    value: float
    mean: float
    ci_lo: float
    ci_hi: float
    trials: np.ndarray
    far_max: float = FAR_MAX
    resample_sizes: list = field(default_factory=list)


def bootstrap_eval(train, test: EvalSet, fit_fn: Callable, n_boot: int = 10, seed: int = 0,
                   far_max: float = FAR_MAX, max_attempts: int = 100) -> PaucScore:
    """pAUC on a fixed test set over ``n_boot`` bootstrap refits of the training data.

    ``train`` is ``(X, y)`` with y in {+1, -1}; ``fit_fn(X, y)`` returns a
    callable mapping test features to scores. Resamples lacking a class are
    redrawn.
    """
    if n_boot < 2:
        raise ValueError("n_boot must be >= 2")
    X, y = train
    X = np.asarray(X)
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    vals = []
    sizes = []
    for _ in range(n_boot):
        for _attempt in range(max_attempts):
            idx = rng.integers(0, len(y), len(y))
            if (y[idx] > 0).any() and (y[idx] < 0).any():
                break
        else:
            raise RuntimeError(f"no two-class bootstrap resample in {max_attempts} draws")
        sizes.append(idx.size)
        predictor = fit_fn(X[idx], y[idx])
        vals.append(test.pauc(predictor(test.X), far_max))
    m, lo, hi = mean_ci(vals)
    return PaucScore(m, m, lo, hi, np.asarray(vals), far_max, sizes)


# -- lane cross-validation ----------------------------------------------------

@dataclass(eq=False)
class LaneData:
    """Per-lane alarm-level inputs for cross-validation.

    ``inputs`` holds whatever per-alarm arrays the feature pipeline consumes
    (patch stacks, precomputed features...), rows aligned with ``utm``.
    """

    lane_id: str
    utm: np.ndarray
    target_idx: np.ndarray
    n_targets: int
    area_m2: float
    inputs: dict
    prescreen_confidence: np.ndarray | None = None

    @property
    def labels(self):
        return np.where(self.target_idx >= 0, 1.0, -1.0)


@dataclass(eq=False)
class FoldResult:
    test_lane: str
    scores: np.ndarray
    pauc: float
    roc: RocCurve
    features: object
    model: object
    boot: PaucScore | None = None


@dataclass(eq=False)
class CvResult:
    folds: list
    pooled_roc: RocCurve
    pooled_pauc: float

    @property
    def fold_paucs(self):
        return [f.pauc for f in self.folds]


def lane_cv(lanes, make_features: Callable, fit_fn: Callable, n_boot: int | None = None,
            seed: int = 0, far_max: float = FAR_MAX) -> CvResult:
    """Leave-one-lane-out cross-validation.

    ``make_features()`` returns a fresh object with ``fit(train_lanes)``
    and ``transform(lane) -> X``; ``fit_fn(X, y)`` returns a callable scorer.
    Only training lanes reach either fit.
    """
    if len(lanes) < 2:
        raise ValueError("lane cross-validation needs at least two lanes")
    folds = []
    for k, test in enumerate(lanes):
        train = [l for i, l in enumerate(lanes) if i != k]
        y = np.concatenate([l.labels for l in train])
        if not (y > 0).any():
            raise ValueError(f"fold testing {test.lane_id!r} has no target alarms in training")
        if test.n_targets == 0:
            raise ValueError(f"test lane {test.lane_id!r} has no targets")
        fe = make_features()
        fe.fit(train)
        Xtr = np.concatenate([fe.transform(l) for l in train])
        Xte = fe.transform(test)
        model = fit_fn(Xtr, y)
        scores = np.asarray(model(Xte), dtype=np.float64)
        roc = roc_from_arrays(scores, test.target_idx, test.n_targets, test.area_m2)
        boot = None
        if n_boot:
            ev = EvalSet(Xte, test.target_idx, test.n_targets, test.area_m2)
            boot = bootstrap_eval((Xtr, y), ev, fit_fn, n_boot, seed + k, far_max)
        folds.append(FoldResult(test.lane_id, scores, pauc(roc, far_max), roc, fe, model, boot))
    return CvResult(folds, *pooled(lanes, [f.scores for f in folds], far_max))


def pooled(lanes, scores, far_max=FAR_MAX):
    """ROC and pAUC of all lanes' test scores taken together."""
    offset = 0
    tidx = []
    for l in lanes:
        t = np.asarray(l.target_idx).copy()
        t[t >= 0] += offset
        offset += l.n_targets
        tidx.append(t)
    roc = roc_from_arrays(np.concatenate(scores), np.concatenate(tidx),
                          sum(l.n_targets for l in lanes), sum(l.area_m2 for l in lanes))
    return roc, pauc(roc, far_max)


RESULT_COLUMNS = ["fold", "polarization", "feature", "classifier", "pauc_mean", "pauc_ci_lo",
                  "pauc_ci_hi"]


def write_results_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k.startswith("pauc") else r[k])
                        for k in RESULT_COLUMNS})


def write_roc_csv(avg: VerticalAverage, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["far", "pd", "ci_lo", "ci_hi"])
        for row in zip(avg.far, avg.mean, avg.ci_lo, avg.ci_hi):
            w.writerow([repr(float(v)) for v in row])
