"""Learned encodings: dense descriptors, ZCA, spherical k-means/BOV, GMM/Fisher vectors.

Encodings are pooled over a ``pooling x pooling`` grid of the patch (2x2 by
default); each descriptor belongs to the cell containing its centre pixel,
with centres exactly on a boundary going to the lower-index cell. Cells are
concatenated row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

from .features import FeatureVector, sift_batch
from .patch import NormalizedPatch
from .records import read_record, write_record

DESCRIPTOR_GEOMETRY = {"Raw": (11, 7), "SIFT": (8, 8)}  # window, stride


@dataclass(eq=False)
class DescriptorSet:
    descriptors: np.ndarray  # (T, D)
    centers_px: np.ndarray  # (T, 2) row, col
    kind: str
    patch_shape: tuple = (100, 100)

    @property
    def T(self):
        return self.descriptors.shape[0]

    @property
    def D(self):
        return self.descriptors.shape[1]


def window_grid(size, window, stride):
    starts = np.arange(0, size - window + 1, stride)
    return starts, starts + (window - 1) / 2.0


def dense_batch(stack, kind, window=None, stride=None):
    """Dense descriptors for a stack of patches.

    Returns ``(desc, centers)`` with ``desc`` of shape ``(N, T, D)`` and
    ``centers`` ``(T, 2)`` shared by all patches.
    """
    w0, s0 = DESCRIPTOR_GEOMETRY[kind]
    window = window or w0
    stride = stride or s0
    stack = np.asarray(stack, dtype=np.float64)
    n, h, w = stack.shape
    rs, rc = window_grid(h, window, stride)
    cs, cc = window_grid(w, window, stride)
    win = sliding_window_view(stack, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :len(rs), :len(cs)]
    t = len(rs) * len(cs)
    if kind == "Raw":
        desc = win.reshape(n, t, window * window)
    elif kind == "SIFT":
        desc = sift_batch(win.reshape(n * t, window, window)).reshape(n, t, -1)
    else:
        raise ValueError(f"unknown descriptor kind {kind!r}")
    centers = np.stack(np.meshgrid(rc, cc, indexing="ij"), axis=-1).reshape(t, 2)
    return np.ascontiguousarray(desc), centers


def dense_descriptors(xp: NormalizedPatch, kind: str, window=None, stride=None) -> DescriptorSet:
    px = xp.pixels if isinstance(xp, NormalizedPatch) else np.asarray(xp)
    desc, centers = dense_batch(px[None], kind, window, stride)
    return DescriptorSet(desc[0], centers, kind, px.shape)


def pool_index(centers, patch_shape=(100, 100), pooling=2):
    """Row-major pooling cell of each descriptor centre."""
    centers = np.asarray(centers, dtype=np.float64)
    out = np.zeros(len(centers), dtype=np.int64)
    for axis in range(2):
        bounds = patch_shape[axis] * np.arange(1, pooling) / pooling
        out = out * pooling + np.searchsorted(bounds, centers[:, axis], side="left")
    return out


# -- ZCA ----------------------------------------------------------------------

@dataclass(eq=False)
class ZcaTransform:
    mean: np.ndarray
    projection: np.ndarray
    epsilon: float
    inverse: np.ndarray


def zca_fit(desc, epsilon=None, eps_scale=1e-2) -> ZcaTransform:
    """ZCA whitening ``(cov + eps I)^(-1/2)`` from the sample covariance.

    ``epsilon`` defaults to ``eps_scale`` times the mean eigenvalue.
    """
    x = np.asarray(desc, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("ZCA needs a (T, D) matrix with T > 1")
    if not np.all(np.isfinite(x)):
        raise ValueError("ZCA input has non-finite values")
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    if epsilon is None:
        epsilon = eps_scale * float(vals.mean())
    s = vals + epsilon
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(s > 0, 1.0 / np.sqrt(np.where(s > 0, s, 1.0)), 0.0)
    proj = (vecs * inv_sqrt) @ vecs.T
    inv = (vecs * np.sqrt(s)) @ vecs.T
    return ZcaTransform(mean, 0.5 * (proj + proj.T), float(epsilon), 0.5 * (inv + inv.T))


def zca_apply(t: ZcaTransform, desc):
    x = np.asarray(desc, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("ZCA input has non-finite values")
    return (x - t.mean) @ t.projection


def zca_unwhiten(t: ZcaTransform, white):
    """Map whitened directions back to descriptor space (no mean added)."""
    return np.asarray(white, dtype=np.float64) @ t.inverse


def _unit_rows(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


# -- spherical k-means / BOV --------------------------------------------------

@dataclass(eq=False)
class BovDictionary:
    D_mat: np.ndarray  # (K, D) unit rows
    zca: ZcaTransform
    kind: str = "Raw"
    labels: np.ndarray | None = field(default=None, repr=False)
    objective: np.ndarray | None = field(default=None, repr=False)

    @property
    def K(self):
        return self.D_mat.shape[0]


def spherical_kmeans_unit(x, K, seed=0, max_iter=100):
    """Spherical k-means on unit-norm rows ``x``.

    Returns ``(centers, labels, objective_trace)``; the trace holds the total
    cosine similarity after each assignment step.
    """
    T = x.shape[0]
    if T < K:
        raise ValueError(f"need at least K={K} descriptors, got {T}")
    rng = np.random.default_rng(seed)
    centers = x[rng.choice(T, K, replace=False)].copy()
    labels = np.full(T, -1, dtype=np.int64)
    trace = []
    for _ in range(max_iter):
        sims = x @ centers.T
        new = np.argmax(sims, axis=1)
        best = sims[np.arange(T), new]
        trace.append(float(best.sum()))
        if np.array_equal(new, labels):
            break
        labels = new
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=K)
        centers = _unit_rows(sums)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # reseed each empty cluster with the descriptor least similar to its centre
            far = np.argsort(best, kind="stable")
            for k, i in zip(empty, far):
                centers[k] = x[i]
    return centers, labels, np.asarray(trace)


def spherical_kmeans(desc, K: int = 30, seed: int = 0, max_iter: int = 100,
                     epsilon=None, kind: str = "Raw", eps_scale: float = 1e-2) -> BovDictionary:
    """ZCA-whiten, l2-normalise and cluster descriptors into a unit-norm dictionary."""
    x = np.asarray(desc, dtype=np.float64)
    zca = zca_fit(x, epsilon, eps_scale)
    xn = _unit_rows(zca_apply(zca, x))
    centers, labels, trace = spherical_kmeans_unit(xn, K, seed, max_iter)
    return BovDictionary(centers, zca, kind, labels, trace)


def bov_similarities(desc, dictionary: BovDictionary):
    xn = _unit_rows(zca_apply(dictionary.zca, desc))
    return xn @ dictionary.D_mat.T


def bov_batch(desc, centers, dictionary: BovDictionary, pooling=2, patch_shape=(100, 100)):
    """Max-pooled dictionary similarities, ``(N, pooling**2 * K)``."""
    desc = np.asarray(desc, dtype=np.float64)
    n, t, d = desc.shape
    if d != dictionary.D_mat.shape[1]:
        raise ValueError(f"descriptor dim {d} != dictionary dim {dictionary.D_mat.shape[1]}")
    K = dictionary.K
    gamma = bov_similarities(desc.reshape(n * t, d), dictionary).reshape(n, t, K)
    cell = pool_index(centers, patch_shape, pooling)
    out = np.zeros((n, pooling * pooling, K))
    for q in range(pooling * pooling):
        m = cell == q
        if m.any():
            out[:, q] = gamma[:, m].max(axis=1)
    return out.reshape(n, -1)


def bov_encode(desc: DescriptorSet, dictionary: BovDictionary, pooling: int = 2) -> FeatureVector:
    return FeatureVector(bov_batch(desc.descriptors[None], desc.centers_px, dictionary, pooling,
                                   desc.patch_shape)[0], "BOV")


# -- GMM / Fisher vectors -----------------------------------------------------

@dataclass(eq=False)
class GmmCodebook:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    loglik: np.ndarray | None = field(default=None, repr=False)
    resplits: int = 0

    @property
    def K(self):
        return self.weights.size

    @property
    def D(self):
        return self.means.shape[1]


def gmm_log_joint(x, gmm: GmmCodebook):
    """``log w_k + log N(x | mu_k, diag var_k)``, shape ``(T, K)``."""
    x = np.asarray(x, dtype=np.float64)
    prec = 1.0 / gmm.variances
    quad = ((x * x) @ prec.T - 2.0 * x @ (gmm.means * prec).T
            + (gmm.means * gmm.means * prec).sum(axis=1))
    logdet = np.log(gmm.variances).sum(axis=1)
    d = x.shape[1]
    return np.log(gmm.weights) - 0.5 * (d * np.log(2 * np.pi) + logdet + quad)


def gmm_posteriors(x, gmm: GmmCodebook):
    lj = gmm_log_joint(x, gmm)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def gmm_loglik(x, gmm: GmmCodebook):
    """Mean per-point log-likelihood."""
    return float(logsumexp(gmm_log_joint(x, gmm), axis=1).mean())


def _m_step(x, resp, floor):
    nk = resp.sum(axis=0)
    w = nk / nk.sum()
    safe = np.where(nk > 0, nk, 1.0)
    mu = (resp.T @ x) / safe[:, None]
    var = np.empty_like(mu)
    for k in range(mu.shape[0]):
        dx = x - mu[k]
        var[k] = (resp[:, k] @ (dx * dx)) / safe[k]
    return w, mu, np.maximum(var, floor)


def gmm_fit(desc, K: int = 30, seed: int = 0, max_iter: int = 200, tol: float = 1e-6,
            var_floor: float = 1e-6, init_labels=None) -> GmmCodebook:
    """Diagonal-covariance GMM by EM, initialised from spherical k-means.

    Stops when the mean log-likelihood gains less than ``tol`` per point.
    Variances are floored at ``var_floor`` times each dimension's data
    variance; a component whose weight falls below 1e-8 is replaced by a
    split of the heaviest component.
    """
    x = np.asarray(desc, dtype=np.float64)
    T, D = x.shape
    if T < K:
        raise ValueError(f"need at least K={K} descriptors, got {T}")
    floor = np.maximum(var_floor * x.var(axis=0), 1e-12)
    if init_labels is None:
        init_labels = (np.zeros(T, dtype=np.int64) if K == 1
                       else spherical_kmeans(x, K, seed).labels)
    resp = np.zeros((T, K))
    resp[np.arange(T), init_labels] = 1.0
    rng = np.random.default_rng(seed)
    for k in np.flatnonzero(resp.sum(axis=0) == 0):
        i = rng.integers(T)
        resp[i] = 0.0
        resp[i, k] = 1.0
    w, mu, var = _m_step(x, resp, floor)
    gmm = GmmCodebook(w, mu, var)
    trace = []
    resplits = 0
    for _ in range(max_iter):
        lj = gmm_log_joint(x, gmm)
        lse = logsumexp(lj, axis=1, keepdims=True)
        ll = float(lse.mean())
        trace.append(ll)
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        resp = np.exp(lj - lse)
        w, mu, var = _m_step(x, resp, floor)
        weak = np.flatnonzero(w < 1e-8)
        for k in weak:
            big = int(np.argmax(w))
            step = 1e-3 * np.sqrt(var[big]) * rng.standard_normal(D)
            mu[k] = mu[big] + step
            mu[big] = mu[big] - step
            var[k] = var[big]
            w[k] = w[big] = 0.5 * w[big]
            resplits += 1
        gmm = GmmCodebook(w / w.sum(), mu, var)
    gmm.loglik = np.asarray(trace)
    gmm.resplits = resplits
    return gmm


def fisher_vector(x, gmm: GmmCodebook, posteriors=None):
    """Unpooled Fisher vector of descriptor rows ``x``: ``(G_mu_1, G_sig_1, ..., G_mu_K, G_sig_K)``."""
    x = np.asarray(x, dtype=np.float64)
    g = gmm_posteriors(x, gmm) if posteriors is None else posteriors
    sd = np.sqrt(gmm.variances)
    z = (x[:, None, :] - gmm.means[None]) / sd[None]  # (T, K, D)
    g_mu = np.einsum("tk,tkd->kd", g, z) / np.sqrt(gmm.weights)[:, None]
    g_sig = np.einsum("tk,tkd->kd", g, z * z - 1.0) / np.sqrt(2.0 * gmm.weights)[:, None]
    return np.stack([g_mu, g_sig], axis=1).reshape(-1)


def fv_batch(desc, centers, gmm: GmmCodebook, pooling=2, patch_shape=(100, 100), normalize=False):
    """Pooled Fisher vectors, ``(N, pooling**2 * 2 * D * K)``.

    ``normalize`` applies signed square root then l2 normalisation per patch.
    """
    desc = np.asarray(desc, dtype=np.float64)
    n, t, d = desc.shape
    if d != gmm.D:
        raise ValueError(f"descriptor dim {d} != codebook dim {gmm.D}")
    cell = pool_index(centers, patch_shape, pooling)
    block = 2 * d * gmm.K
    out = np.zeros((n, pooling * pooling * block))
    for i in range(n):
        post = gmm_posteriors(desc[i], gmm)
        for q in range(pooling * pooling):
            m = cell == q
            if m.any():
                out[i, q * block:(q + 1) * block] = fisher_vector(desc[i][m], gmm, post[m])
    if normalize:
        out = np.sign(out) * np.sqrt(np.abs(out))
        nrm = np.linalg.norm(out, axis=1, keepdims=True)
        out = np.divide(out, nrm, out=np.zeros_like(out), where=nrm > 0)
    return out


def fv_encode(desc: DescriptorSet, gmm: GmmCodebook, pooling: int = 2,
              normalize: bool = False) -> FeatureVector:
    return FeatureVector(fv_batch(desc.descriptors[None], desc.centers_px, gmm, pooling,
                                  desc.patch_shape, normalize)[0], "FV")


# -- persistence --------------------------------------------------------------

def save_codebook(path, codebook):
    if isinstance(codebook, BovDictionary):
        write_record(path, "bov_dictionary", {"K": codebook.K, "D": int(codebook.D_mat.shape[1]),
                                              "descriptor": codebook.kind,
                                              "epsilon": codebook.zca.epsilon},
                     {"D_mat": codebook.D_mat, "zca_mean": codebook.zca.mean,
                      "zca_projection": codebook.zca.projection,
                      "zca_inverse": codebook.zca.inverse})
    elif isinstance(codebook, GmmCodebook):
        write_record(path, "gmm_codebook", {"K": codebook.K, "D": codebook.D},
                     {"weights": codebook.weights, "means": codebook.means,
                      "variances": codebook.variances})
    else:
        raise TypeError(f"not a codebook: {type(codebook).__name__}")


def load_codebook(path):
    kind, meta, a = read_record(path)
    if kind == "bov_dictionary":
        zca = ZcaTransform(a["zca_mean"], a["zca_projection"], meta["epsilon"], a["zca_inverse"])
        return BovDictionary(a["D_mat"], zca, meta["descriptor"])
    if kind == "gmm_codebook":
        return GmmCodebook(a["weights"], a["means"], a["variances"])
    raise ValueError(f"{path}: not a codebook record ({kind})")
