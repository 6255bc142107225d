"""Decision-level fusion: greedy forward selection of algorithm columns scored by inner CV."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .classifiers import PlsdaModel, plsda_fit, plsda_predict
from .evaluation import FAR_MAX, pauc, roc_from_arrays


@dataclass(eq=False)
class PredictionMatrix:
    values: np.ndarray  # (n_alarms, n_columns)
    columns: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.columns = [str(c) for c in self.columns]
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise ValueError("prediction matrix shape does not match its column labels")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate column labels")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("prediction matrix has missing or non-finite values")

    def select(self, labels):
        idx = []
        for c in labels:
            try:
                idx.append(self.columns.index(c))
            except ValueError:
                raise KeyError(f"prediction matrix has no column {c!r}") from None
        return self.values[:, idx]


@dataclass(eq=False)
class FusionModel:
    selected: list  # column indices into the training matrix, in selection order
    labels: list  # their column labels
    plsda: PlsdaModel
    trace: list  # inner-CV pAUC after each accepted step
    candidates: list = field(default_factory=list)  # per step: pAUC of every candidate


@dataclass(eq=False)
class ScoringContext:
    """What pAUC needs beyond the scores: target credited per alarm, target count, area."""

    target_idx: np.ndarray
    n_targets: int
    area_m2: float

    @classmethod
    def from_labels(cls, labels, far_max=FAR_MAX):
        """Fallback context: each positive alarm is its own target, and the
        area is chosen so the FAR axis spans all negatives by ``far_max``
        (pAUC then equals the full step-ROC area)."""
        y = np.asarray(labels)
        pos = y > 0
        tidx = np.full(y.size, -1, dtype=np.int64)
        tidx[pos] = np.arange(pos.sum())
        n_neg = max(int((~pos).sum()), 1)
        return cls(tidx, int(pos.sum()), n_neg / far_max)

    def subset(self, rows):
        return ScoringContext(self.target_idx[rows], self.n_targets, self.area_m2)


def fused_fit(X, labels, n_components=5) -> PlsdaModel:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return plsda_fit(X, labels, max(1, min(n_components, X.shape[1], X.shape[0] - 1)))


def stratified_folds(labels, k, rng, max_retries=100):
    """Random stratified fold ids; reshuffled until every training part holds both classes."""
    y = np.asarray(labels)
    for _ in range(max_retries):
        fold = np.empty(y.size, dtype=np.int64)
        for cls in (1.0, -1.0):
            idx = np.flatnonzero(y == cls)
            perm = rng.permutation(idx)
            fold[perm] = (np.arange(perm.size) + rng.integers(k)) % k
        ok = all(((y[fold != f] > 0).any() and (y[fold != f] < 0).any()) for f in range(k))
        if ok:
            return fold
    raise ValueError(f"no {k}-fold split with both classes in every training part")


def inner_cv_pauc(X, labels, folds, ctx: ScoringContext, n_components=5, far_max=FAR_MAX):
    """pAUC of the pooled out-of-fold predictions of a PLSDA on ``X``."""
    y = np.asarray(labels, dtype=np.float64)
    oof = np.empty(y.size)
    for f in np.unique(folds):
        te = folds == f
        m = fused_fit(X[~te], y[~te], n_components)
        oof[te] = plsda_predict(m, X[te])
    return pauc(roc_from_arrays(oof, ctx.target_idx, ctx.n_targets, ctx.area_m2), far_max)


def sfs_select(train_preds: PredictionMatrix, labels, max_nf: int, inner_folds: int = 5,
               seed: int = 0, auto_stop: bool = False, context: ScoringContext | None = None,
               n_components: int = 5, far_max: float = FAR_MAX) -> FusionModel:
    """Greedy forward selection of prediction columns.

    Each step adds the column whose inclusion gives the highest inner-CV pAUC
    of a refit second-stage PLSDA (ties: lowest column index). With
    ``auto_stop`` the search ends as soon as the best candidate scores
    strictly below the incumbent.
    """
    y = np.asarray(labels, dtype=np.float64)
    if max_nf < 1:
        raise ValueError("max_nf must be >= 1")
    if not ((y > 0).any() and (y < 0).any()):
        raise ValueError("both classes must be present")
    V = train_preds.values
    if V.shape[0] != y.size:
        raise ValueError("labels do not match the prediction matrix rows")
    ctx = context or ScoringContext.from_labels(y, far_max)
    folds = stratified_folds(y, inner_folds, np.random.default_rng(seed))
    selected, trace, cands = [], [], []
    for _ in range(min(max_nf, V.shape[1])):
        scores = {}
        for c in range(V.shape[1]):
            if c in selected:
                continue
            scores[c] = inner_cv_pauc(V[:, selected + [c]], y, folds, ctx, n_components, far_max)
        best = max(scores, key=lambda c: (scores[c], -c))
        if auto_stop and trace and scores[best] < trace[-1]:
            break
        selected.append(best)
        trace.append(scores[best])
        cands.append(scores)
    model = fused_fit(V[:, selected], y, n_components)
    return FusionModel(selected, [train_preds.columns[c] for c in selected], model, trace, cands)


def fuse_predict(model: FusionModel, test_preds: PredictionMatrix):
    return plsda_predict(model.plsda, test_preds.select(model.labels))


def prefix_models(model: FusionModel, train_preds: PredictionMatrix, labels, n_components=5):
    """Second-stage PLSDAs on the first 1..N_f selected columns (for pAUC vs N_f curves)."""
    out = []
    for n in range(1, len(model.selected) + 1):
        cols = model.selected[:n]
        out.append(FusionModel(cols, model.labels[:n],
                               fused_fit(train_preds.values[:, cols], labels, n_components),
                               model.trace[:n]))
    return out


def write_fusion_csv(model: FusionModel, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "added_column", "inner_cv_pauc"])
        for i, (lab, p) in enumerate(zip(model.labels, model.trace), start=1):
            w.writerow([i, lab, repr(float(p))])
