"""Alarm-level data assembly, per-fold feature learning, classifier training and fusion curves.

The CLI and the end-to-end tests both drive experiments through here.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .classifiers import fit_classifier, predict
from .encoders import bov_batch, dense_batch, fv_batch, gmm_fit, spherical_kmeans
from .evaluation import (FAR_MAX, LaneData, PaucScore, RocCurve, EvalSet, bootstrap_eval,
                         match_alarms, pauc, pooled, roc_from_arrays)
from .features import FEATURE_DIMS, default_bank, extract_batch
from .fusion import (PredictionMatrix, ScoringContext, fuse_predict, prefix_models, sfs_select,
                     stratified_folds)
from .patch import extract_patch, normalize_patch
from .prescreener import prescreen_lane


def parse_feature(name):
    """``"FV(SIFT)" -> ("FV", "SIFT")``; handcrafted kinds give ``(None, name)``."""
    if name.endswith(")") and "(" in name:
        enc, base = name[:-1].split("(", 1)
        if enc not in ("BOV", "FV") or base not in ("Raw", "SIFT"):
            raise ValueError(f"unknown encoded feature {name!r}")
        return enc, base
    if name not in FEATURE_DIMS:
        raise ValueError(f"unknown feature {name!r}")
    return None, name


def feature_dim(name, K=30, pooling=2, raw_window=11):
    enc, base = parse_feature(name)
    if enc is None:
        return FEATURE_DIMS[base]
    if enc == "BOV":
        return pooling * pooling * K
    d = raw_window * raw_window if base == "Raw" else 128
    return pooling * pooling * 2 * d * K


@dataclass
class EncoderParams:
    K: int = 30
    pooling: int = 2
    raw_window: int = 11
    raw_stride: int = 7
    sift_window: int = 8
    sift_stride: int = 8
    max_fit_descriptors: int = 20000
    zca_eps_scale: float = 1e-2
    kmeans_max_iter: int = 100
    gmm_max_iter: int = 200
    gmm_tol: float = 1e-6
    fv_normalize: bool = False

    def geometry(self, base):
        if base == "Raw":
            return self.raw_window, self.raw_stride
        return self.sift_window, self.sift_stride


@dataclass
class ClassifierParams:
    plsda_components: int = 5
    svm_C: float = 1.0
    svm_tol: float = 1e-3


# -- alarm-level lane data ----------------------------------------------------

def lane_alarms(lane, min_confidence=0.004, fore=40, back=80, radius=1.0, channel="VV"):
    return prescreen_lane(lane, min_confidence, fore, back, radius, channel)


def patch_stacks(lane, utm, channel):
    """Raw complex and background-normalised patch stacks for the alarm locations."""
    n = len(utm)
    cplx = np.empty((n, 100, 100), dtype=np.complex64)
    norm = np.empty((n, 100, 100), dtype=np.float64)
    for i, p in enumerate(utm):
        cp = extract_patch(lane, (float(p[0]), float(p[1])), channel)
        cplx[i] = cp.pixels
        norm[i] = normalize_patch(cp).pixels
    return cplx, norm


def build_lane_data(lane, alarms, channels, halo=1.0) -> LaneData:
    """Alarm locations, halo labels and per-polarization patch stacks of one lane."""
    utm = np.array([a.utm for a in alarms], dtype=np.float64).reshape(-1, 2)
    conf = np.array([a.confidence for a in alarms], dtype=np.float64)
    tidx = match_alarms(utm, [t.utm for t in lane.truth], halo)
    inputs = {}
    for ch in channels:
        cplx, norm = patch_stacks(lane, utm, ch)
        inputs[f"complex:{ch}"] = cplx
        inputs[f"norm:{ch}"] = norm
    return LaneData(lane.spec.lane_id, utm, tidx, len(lane.truth), lane.area_m2, inputs, conf)


def handcrafted(ld: LaneData, kind, channel):
    key = f"feat:{kind}:{channel}"
    if key not in ld.inputs:
        ld.inputs[key] = extract_batch(kind, ld.inputs[f"norm:{channel}"],
                                       ld.inputs.get(f"complex:{channel}"),
                                       default_bank() if kind == "LogGabor" else None)
    return ld.inputs[key]


def descriptors(ld: LaneData, base, channel, window, stride):
    key = f"desc:{base}:{channel}:{window}:{stride}"
    if key not in ld.inputs:
        ld.inputs[key] = dense_batch(ld.inputs[f"norm:{channel}"], base, window, stride)
    return ld.inputs[key]


def derive_seed(*parts):
    """Deterministic child seed; strings enter via CRC32 (stable across runs, unlike hash())."""
    ints = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


class FeatureStage:
    """Feature extractor for one (feature config, polarization); learned encoders fit on training lanes only."""

    def __init__(self, feature, channel, params: EncoderParams | None = None, seed=0,
                 codebook=None):
        self.feature = feature
        self.channel = channel
        self.params = params or EncoderParams()
        self.seed = seed
        self.encoder, self.base = parse_feature(feature)
        self.codebook = codebook

    def fit(self, train_lanes):
        if self.encoder is None:
            return self
        p = self.params
        window, stride = p.geometry(self.base)
        blocks = [descriptors(l, self.base, self.channel, window, stride)[0] for l in train_lanes]
        desc = np.concatenate([b.reshape(-1, b.shape[-1]) for b in blocks])
        rng = np.random.default_rng(self.seed)
        if desc.shape[0] > p.max_fit_descriptors:
            desc = desc[np.sort(rng.choice(desc.shape[0], p.max_fit_descriptors, replace=False))]
        if self.encoder == "BOV":
            self.codebook = spherical_kmeans(desc, p.K, self.seed, p.kmeans_max_iter,
                                             kind=self.base, eps_scale=p.zca_eps_scale)
        else:
            self.codebook = gmm_fit(desc, p.K, self.seed, p.gmm_max_iter, p.gmm_tol)
        return self

    def transform(self, lane: LaneData):
        if self.encoder is None:
            return handcrafted(lane, self.base, self.channel)
        if self.codebook is None:
            raise RuntimeError(f"{self.feature} encoder used before fit")
        p = self.params
        desc, centers = descriptors(lane, self.base, self.channel, *p.geometry(self.base))
        shape = lane.inputs[f"norm:{self.channel}"].shape[1:]
        if self.encoder == "BOV":
            return bov_batch(desc, centers, self.codebook, p.pooling, shape)
        out = [fv_batch(desc[i:i + 64], centers, self.codebook, p.pooling, shape, p.fv_normalize)
               for i in range(0, len(desc), 64)]
        return np.concatenate(out) if out else np.zeros((0, feature_dim(
            self.feature, p.K, p.pooling, p.raw_window)))


class Scorer:
    """Callable wrapper returning decision statistics of a fitted classifier."""

    def __init__(self, model):
        self.model = model

    def __call__(self, X):
        return predict(self.model, X)


def make_fit_fn(classifier, params: ClassifierParams | None = None):
    params = params or ClassifierParams()

    def fit_fn(X, y):
        return Scorer(fit_classifier(classifier, X, y, params.plsda_components, params.svm_C,
                                     params.svm_tol))

    return fit_fn


def oof_scores(X, y, fit_fn, folds=5, seed=0):
    """Out-of-fold decision statistics over a stratified random split of the rows."""
    fold = stratified_folds(y, folds, np.random.default_rng(seed))
    out = np.empty(len(y))
    for f in range(folds):
        te = fold == f
        if te.any():
            out[te] = fit_fn(X[~te], y[~te])(X[te])
    return out


# -- cross-validated experiment ----------------------------------------------

@dataclass(eq=False)
class AlgoFold:
    test_lane: str
    scores: np.ndarray
    pauc: float
    roc: RocCurve
    model: object
    boot: PaucScore | None = None
    train_oof: np.ndarray | None = None


@dataclass(eq=False)
class ExperimentResult:
    lanes: list
    results: dict = field(default_factory=dict)  # (pol, feature, classifier) -> [AlgoFold]
    stages: dict = field(default_factory=dict)  # (fold, pol, feature) -> FeatureStage
    far_max: float = FAR_MAX

    def fold_paucs(self, key):
        return [f.pauc for f in self.results[key]]

    def pooled_pauc(self, key):
        return pooled(self.lanes, [f.scores for f in self.results[key]], self.far_max)[1]

    def mean_pauc(self, key):
        folds = self.results[key]
        if folds[0].boot is not None:
            return float(np.mean([f.boot.mean for f in folds]))
        return float(np.mean([f.pauc for f in folds]))


def cross_validate(lanes, polarizations, features, classifiers, enc_params=None, clf_params=None,
                   seed=0, n_boot=None, oof_classifiers=(), inner_folds=5,
                   far_max=FAR_MAX) -> ExperimentResult:
    """Leave-one-lane-out runs of every (polarization, feature, classifier) algorithm.

    Encoders are fit once per fold and feature, then shared by the classifiers.
    Classifiers listed in ``oof_classifiers`` also get out-of-fold
    predictions on the training alarms (inputs for fusion).
    """
    enc_params = enc_params or EncoderParams()
    res = ExperimentResult(list(lanes), far_max=far_max)
    for k, test in enumerate(lanes):
        train = [l for i, l in enumerate(lanes) if i != k]
        y = np.concatenate([l.labels for l in train])
        if not (y > 0).any() or test.n_targets == 0:
            raise ValueError(f"fold testing {test.lane_id!r} lacks targets")
        for pol in polarizations:
            for feat in features:
                stage = FeatureStage(feat, pol, enc_params, derive_seed(seed, k, pol, feat)).fit(train)
                res.stages[(k, pol, feat)] = stage
                Xtr = np.concatenate([stage.transform(l) for l in train])
                Xte = stage.transform(test)
                for clf in classifiers:
                    fit_fn = make_fit_fn(clf, clf_params)
                    scorer = fit_fn(Xtr, y)
                    s = np.asarray(scorer(Xte), dtype=np.float64)
                    roc = roc_from_arrays(s, test.target_idx, test.n_targets, test.area_m2)
                    af = AlgoFold(test.lane_id, s, pauc(roc, far_max), roc, scorer.model)
                    if n_boot:
                        ev = EvalSet(Xte, test.target_idx, test.n_targets, test.area_m2)
                        af.boot = bootstrap_eval((Xtr, y), ev, fit_fn, n_boot,
                                                 derive_seed(seed, k, pol, feat, clf), far_max)
                    if clf in oof_classifiers:
                        af.train_oof = oof_scores(Xtr, y, fit_fn, inner_folds,
                                                  derive_seed(seed, k, "oof"))
                    res.results.setdefault((pol, feat, clf), []).append(af)
    return res


def train_context(lanes, far_max=FAR_MAX) -> ScoringContext:
    """Scoring context of the concatenated training alarms (target ids made unique per lane)."""
    offset = 0
    tidx = []
    for l in lanes:
        t = np.asarray(l.target_idx).copy()
        t[t >= 0] += offset
        offset += l.n_targets
        tidx.append(t)
    return ScoringContext(np.concatenate(tidx), offset, float(sum(l.area_m2 for l in lanes)))


@dataclass(eq=False)
class FusionFold:
    test_lane: str
    model: object
    curve: np.ndarray  # test pAUC for N_f = 1..len(selected)
    scores: np.ndarray


def fusion_curve(exp: ExperimentResult, classifier="PLSDA", max_nf=5, inner_folds=5, seed=0,
                 auto_stop=False):
    """Per fold: forward-select algorithm columns on training OOF predictions and score
    the fused test predictions for every prefix of the selection."""
    keys = [k for k in exp.results if k[2] == classifier]
    labels = ["/".join(k) for k in keys]
    out = []
    for f, test in enumerate(exp.lanes):
        train = [l for i, l in enumerate(exp.lanes) if i != f]
        y = np.concatenate([l.labels for l in train])
        oof = [exp.results[k][f].train_oof for k in keys]
        if any(o is None for o in oof):
            raise ValueError(f"no out-of-fold training predictions for {classifier}")
        tr = PredictionMatrix(np.column_stack(oof), labels)
        te = PredictionMatrix(np.column_stack([exp.results[k][f].scores for k in keys]), labels)
        model = sfs_select(tr, y, max_nf, inner_folds, derive_seed(seed, f, "sfs"), auto_stop,
                           train_context(train, exp.far_max), far_max=exp.far_max)
        curve = []
        for pm in prefix_models(model, tr, y):
            s = fuse_predict(pm, te)
            curve.append(pauc(roc_from_arrays(s, test.target_idx, test.n_targets, test.area_m2),
                              exp.far_max))
        out.append(FusionFold(test.lane_id, model, np.asarray(curve), fuse_predict(model, te)))
    return out
