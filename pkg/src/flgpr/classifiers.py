"""PLSDA (NIPALS PLS1) and soft-margin SVMs on standardised features.

Labels are +1 for targets and -1 otherwise; every model returns a real
decision statistic where larger means more target-like.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .records import read_record, write_record

STD_FLOOR = 1e-12


class SvmConvergenceError(RuntimeError):
    def __init__(self, residual, n_iter):
        super().__init__(f"SMO hit the iteration cap ({n_iter}) with KKT gap {residual:.3g}")
        self.residual = residual
        self.n_iter = n_iter


@dataclass(eq=False)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray


def standardize_fit(train) -> StandardizationStats:
    x = np.asarray(train, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("standardisation needs at least two training rows")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = std <= STD_FLOOR * np.abs(mean)
    return StandardizationStats(mean, np.maximum(std, STD_FLOOR), constant)


def standardize_apply(stats: StandardizationStats, X):
    z = (np.asarray(X, dtype=np.float64) - stats.mean) / stats.std
    z[:, stats.constant] = 0.0
    return z


def _labels(y):
    y = np.asarray(y, dtype=np.float64).ravel()
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be +1 / -1")
    if not ((y > 0).any() and (y < 0).any()):
        raise ValueError("both classes must be present")
    return y


# -- PLSDA --------------------------------------------------------------------

@dataclass(eq=False)
class PlsdaModel:
    stats: StandardizationStats
    coef: np.ndarray  # on standardised features
    intercept: float
    n_components: int
    weights: np.ndarray | None = field(default=None, repr=False)
    loadings: np.ndarray | None = field(default=None, repr=False)
    scores: np.ndarray | None = field(default=None, repr=False)

    def effective_weights(self):
        """Coefficients on unstandardised features (constants excluded)."""
        w = self.coef / self.stats.std
        w[self.stats.constant] = 0.0
        return w


def plsda_fit(X, y, n_components: int = 5, tol: float = 1e-10) -> PlsdaModel:
    """NIPALS PLS1 regression of the +/-1 labels on standardised ``X``.

    Stops early, with fewer components, once the deflated covariance
    ``X'y`` or the deflated response is negligible.
    """
    y = _labels(y)
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if not 1 <= n_components <= min(n - 1, d):
        raise ValueError(f"n_components must lie in [1, {min(n - 1, d)}]")
    stats = standardize_fit(X)
    Xa = standardize_apply(stats, X)
    ymean = float(y.mean())
    ya = y - ymean
    ref_w = np.linalg.norm(Xa.T @ ya)
    ref_y = np.linalg.norm(ya)
    W, P, Q, Ts = [], [], [], []
    for _ in range(n_components):
        w = Xa.T @ ya
        nw = np.linalg.norm(w)
        if nw <= tol * ref_w or np.linalg.norm(ya) <= tol * ref_y:
            break
        w /= nw
        t = Xa @ w
        tt = float(t @ t)
        if tt <= 0:
            break
        p = (Xa.T @ t) / tt
        q = float(ya @ t) / tt
        Xa -= np.outer(t, p)
        ya = ya - q * t
        W.append(w)
        P.append(p)
        Q.append(q)
        Ts.append(t)
    if not W:
        coef = np.zeros(d)
        W_m = P_m = np.zeros((d, 0))
        T_m = np.zeros((n, 0))
    else:
        W_m, P_m, T_m = np.array(W).T, np.array(P).T, np.array(Ts).T
        coef = W_m @ np.linalg.solve(P_m.T @ W_m, np.array(Q))
    return PlsdaModel(stats, coef, ymean, len(W), W_m, P_m, T_m)


def plsda_predict(model: PlsdaModel, X):
    return standardize_apply(model.stats, X) @ model.coef + model.intercept


# -- SVM ----------------------------------------------------------------------

@dataclass(eq=False)
class SvmModel:
    kind: str
    stats: StandardizationStats
    support: np.ndarray  # standardised support vectors
    dual_coef: np.ndarray  # alpha_i * y_i for the support vectors
    bias: float
    C: float
    gamma: float
    alpha: np.ndarray | None = field(default=None, repr=False)
    n_iter: int = 0
    kkt_gap: float = 0.0
    objective: np.ndarray | None = field(default=None, repr=False)


def kernel_matrix(A, B, kind, gamma):
    if kind == "linear":
        return A @ B.T
    if kind == "rbf":
        d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
        return np.exp(-gamma * np.maximum(d2, 0.0))
    raise ValueError(f"unknown SVM kernel {kind!r}")


def svm_fit(X, y, kind: str = "linear", C: float = 1.0, gamma: float | None = None,
            tol: float = 1e-3, max_iter: int | None = None, track: bool = False) -> SvmModel:
    """Soft-margin SVM via SMO on the dual; ``gamma`` defaults to 1 / n_features."""
    y = _labels(y)
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    gamma = 1.0 / d if gamma is None else float(gamma)
    stats = standardize_fit(X)
    Z = standardize_apply(stats, X)
    K = kernel_matrix(Z, Z, kind, gamma)
    cap = max(1_000_000, 100 * n) if max_iter is None else int(max_iter)
    alpha, rho, n_iter, gap, trace = _kernels.smo_solve(K, y, float(C), float(tol), cap, track)
    if gap >= tol:
        raise SvmConvergenceError(gap, n_iter)
    sv = alpha > 0
    return SvmModel(kind, stats, Z[sv], alpha[sv] * y[sv], -float(rho), float(C), gamma,
                    alpha, int(n_iter), float(gap), trace if track else None)


def svm_predict(model: SvmModel, X, chunk: int = 2048):
    Z = standardize_apply(model.stats, X)
    if model.kind == "linear":
        w = model.dual_coef @ model.support if model.support.size else np.zeros(Z.shape[1])
        return Z @ w + model.bias
    out = np.empty(Z.shape[0])
    for i in range(0, Z.shape[0], chunk):
        out[i:i + chunk] = kernel_matrix(Z[i:i + chunk], model.support, "rbf",
                                         model.gamma) @ model.dual_coef + model.bias
    return out


CLASSIFIERS = ("PLSDA", "LinearSVM", "RbfSVM")


def fit_classifier(name, X, y, plsda_components=5, C=1.0, tol=1e-3):
    if name == "PLSDA":
        k = min(plsda_components, X.shape[0] - 1, X.shape[1])
        return plsda_fit(X, y, k)
    if name == "LinearSVM":
        return svm_fit(X, y, "linear", C, tol=tol)
    if name == "RbfSVM":
        return svm_fit(X, y, "rbf", C, tol=tol)
    raise ValueError(f"unknown classifier {name!r}")


def predict(model, X):
    if isinstance(model, PlsdaModel):
        return plsda_predict(model, X)
    if isinstance(model, SvmModel):
        return svm_predict(model, X)
    raise TypeError(f"not a model: {type(model).__name__}")


# -- persistence --------------------------------------------------------------

def _stats_arrays(s):
    return {"mean": s.mean, "std": s.std, "constant": s.constant}


def _stats_from(a):
    return StandardizationStats(a["mean"], a["std"], a["constant"])


def save_model(path, model):
    if isinstance(model, PlsdaModel):
        write_record(path, "plsda", {"n_components": model.n_components,
                                     "intercept": model.intercept},
                     {**_stats_arrays(model.stats), "coef": model.coef})
    elif isinstance(model, SvmModel):
        write_record(path, "svm", {"kind": model.kind, "bias": model.bias, "C": model.C,
                                   "gamma": model.gamma},
                     {**_stats_arrays(model.stats), "support": model.support,
                      "dual_coef": model.dual_coef})
    else:
        raise TypeError(f"not a model: {type(model).__name__}")


def load_model(path):
    kind, meta, a = read_record(path)
    if kind == "plsda":
        return PlsdaModel(_stats_from(a), a["coef"], meta["intercept"], meta["n_components"])
    if kind == "svm":
        return SvmModel(meta["kind"], _stats_from(a), a["support"], a["dual_coef"], meta["bias"],
                        meta["C"], meta["gamma"])
    raise ValueError(f"{path}: not a model record ({kind})")
