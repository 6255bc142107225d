import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flgpr.evaluation import pauc, roc_from_arrays
from flgpr.fusion import (PredictionMatrix, ScoringContext, fuse_predict, inner_cv_pauc,
                          prefix_models, sfs_select, stratified_folds, write_fusion_csv)


def _problem(seed, n=90, d=5):
    r = np.random.default_rng(seed)
    y = np.where(r.uniform(size=n) < 0.3, 1.0, -1.0)
    if (y > 0).sum() < 8:
        y[:8] = 1.0
    strength = np.linspace(0.2, 1.5, d)
    V = y[:, None] * strength + r.normal(size=(n, d))
    return PredictionMatrix(V, [f"c{i}" for i in range(d)]), y


def test_perfect_column_selected_first(rng):
    pm, y = _problem(1)
    V = np.column_stack([pm.values[:, :2], y + 1e-3 * rng.normal(size=y.size), pm.values[:, 2:]])
    m = sfs_select(PredictionMatrix(V, [f"c{i}" for i in range(V.shape[1])]), y, 3)
    assert m.selected[0] == 2 and m.trace[0] == 1.0


def test_max_nf_one_is_best_single_column():
    pm, y = _problem(2)
    m = sfs_select(pm, y, 1, seed=3)
    folds = stratified_folds(y, 5, np.random.default_rng(3))
    ctx = ScoringContext.from_labels(y)
    single = [inner_cv_pauc(pm.values[:, [c]], y, folds, ctx) for c in range(5)]
    best = max(range(5), key=lambda c: (single[c], -c))
    assert m.selected == [best]
    assert m.trace[0] - single[best] == 0.0
    assert sorted(m.candidates[0], key=m.candidates[0].get) == sorted(range(5), key=single.__getitem__)


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_duplicate_column_never_increases(seed):
    pm, y = _problem(seed, d=3)
    V = np.column_stack([pm.values, pm.values[:, 0]])
    folds = stratified_folds(y, 5, np.random.default_rng(seed))
    ctx = ScoringContext.from_labels(y)
    for base in ([0], [0, 1], [0, 1, 2]):
        p0 = inner_cv_pauc(V[:, base], y, folds, ctx)
        p1 = inner_cv_pauc(V[:, base + [3]], y, folds, ctx)
        assert p1 <= p0 + 1e-12


def test_permutation_invariance():
    """Column order matters only through index tie-breaks; this problem has no ties."""
    r = np.random.default_rng(5)
    y = np.where(r.uniform(size=200) < 0.3, 1.0, -1.0)
    pm = PredictionMatrix(0.3 * y[:, None] * np.linspace(0.2, 1, 6) + r.normal(size=(200, 6)),
                          [f"c{i}" for i in range(6)])
    perm = np.random.default_rng(0).permutation(6)
    pm2 = PredictionMatrix(pm.values[:, perm], [pm.columns[i] for i in perm])
    a, b = sfs_select(pm, y, 4, seed=1), sfs_select(pm2, y, 4, seed=1)
    for c in a.candidates:
        assert len(set(c.values())) == len(c)
    assert a.labels == b.labels and a.trace == b.trace


def test_auto_stop_prefix_and_stop_rule():
    pm, y = _problem(7, d=6)
    full = sfs_select(pm, y, 6, seed=2)
    auto = sfs_select(pm, y, 6, seed=2, auto_stop=True)
    n = len(auto.selected)
    assert auto.selected == full.selected[:n] and auto.trace == full.trace[:n]
    assert all(full.trace[i + 1] >= full.trace[i] for i in range(n - 1))
    if n < 6:
        assert full.trace[n] < full.trace[n - 1]


def test_missing_column_and_bad_inputs():
    pm, y = _problem(3)
    m = sfs_select(pm, y, 2)
    with pytest.raises(KeyError, match=m.labels[0]):
        fuse_predict(m, PredictionMatrix(np.zeros((2, 1)), ["other"]))
    with pytest.raises(ValueError):
        PredictionMatrix(np.array([[np.nan, 1.0]]), ["a", "b"])
    with pytest.raises(ValueError):
        PredictionMatrix(np.zeros((2, 2)), ["a", "a"])
    with pytest.raises(ValueError):
        sfs_select(pm, -np.ones_like(y), 2)
    with pytest.raises(ValueError):
        sfs_select(pm, y, 0)


def test_fuse_predict_selects_by_label():
    pm, y = _problem(4)
    m = sfs_select(pm, y, 3)
    rev = PredictionMatrix(pm.values[:, ::-1], pm.columns[::-1])
    np.testing.assert_array_equal(fuse_predict(m, pm), fuse_predict(m, rev))
    pre = prefix_models(m, pm, y)
    assert [p.labels for p in pre] == [m.labels[:i] for i in (1, 2, 3)]


def test_stratified_folds_balanced(rng):
    y = np.r_[np.ones(13), -np.ones(40)]
    f = stratified_folds(y, 5, rng)
    for cls in (1.0, -1.0):
        counts = np.bincount(f[y == cls], minlength=5)
        assert counts.max() - counts.min() <= 1
    with pytest.raises(ValueError):
        stratified_folds(np.r_[1.0, -np.ones(9)], 5, rng)


@given(st.integers(0, 10_000))
def test_fallback_context_is_full_auc(seed):
    r = np.random.default_rng(seed)
    y = np.where(r.uniform(size=30) < 0.4, 1.0, -1.0)
    y[:2] = [1.0, -1.0]
    s = r.normal(size=30)
    ctx = ScoringContext.from_labels(y)
    got = pauc(roc_from_arrays(s, ctx.target_idx, ctx.n_targets, ctx.area_m2))
    pos, neg = s[y > 0], s[y < 0]
    mw = (pos[:, None] > neg[None, :]).mean()
    assert got == pytest.approx(mw, abs=1e-12)


def test_fusion_csv(tmp_path):
    pm, y = _problem(6)
    m = sfs_select(pm, y, 2)
    write_fusion_csv(m, tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "step,added_column,inner_cv_pauc" and len(lines) == 3
