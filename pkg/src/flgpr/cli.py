"""Command-line driver: generate -> prescreen -> extract -> train -> evaluate -> fuse -> confmap -> report.

Every stage reads the artifacts of earlier stages from the output directory
and writes its own under ``out/{lanes,alarms,features,models,results,figures}``.
File names carry the seed and a digest of the config sections that feed the
stage, so changed settings never silently reuse stale artifacts.
"""

from __future__ import annotations

import argparse
import csv
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .classifiers import load_model, predict, save_model
from .config import ConfigError, ExperimentConfig, load_config
from .dataset import generate_lane, read_lane, write_lane
from .encoders import load_codebook, save_codebook
from .evaluation import (EvalSet, LaneData, bootstrap_eval, far_grid, match_alarms, mean_ci,
                         pauc, roc_from_arrays, vertical_average, write_results_csv,
                         write_roc_csv)
from .fusion import (PredictionMatrix, fuse_predict, prefix_models, sfs_select,
                     write_fusion_csv)
from .pipeline import (ClassifierParams, EncoderParams, FeatureStage, derive_seed,
                       make_fit_fn, oof_scores, parse_feature, patch_stacks, train_context)
from .prescreener import prescreen_lane, read_alarms_csv, write_alarms_csv
from .records import read_matrix, read_record, write_matrix, write_record

STAGES = ("generate", "prescreen", "extract", "train", "evaluate", "fuse", "confmap", "report")
SUBDIRS = ("lanes", "alarms", "features", "models", "results", "figures")

# config sections feeding each stage (cumulative)
_SECTIONS = {
    "generate": ("lanes", "features", "prescreener"),
    "prescreen": ("lanes", "features", "prescreener", "evaluation"),
    "extract": ("lanes", "features", "prescreener", "evaluation"),
    "train": ("lanes", "features", "prescreener", "evaluation", "encoders", "classifiers",
              "fusion"),
}
_SECTIONS["evaluate"] = _SECTIONS["train"]
_SECTIONS["fuse"] = _SECTIONS["train"]
_SECTIONS["confmap"] = _SECTIONS["train"] + ("confmap",)
_SECTIONS["report"] = _SECTIONS["train"]


class StageError(RuntimeError):
    pass


class Layout:
    """Artifact paths of one experiment."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = Path(out)

    def tag(self, stage):
        return f"s{self.cfg.seed}_{self.cfg.section_hash(*_SECTIONS[stage])}"

    def path(self, sub, stem, stage, ext):
        return self.out / sub / f"{stem}_{self.tag(stage)}.{ext}"

    def lane(self, lid):
        return self.path("lanes", f"lane_{lid}", "generate", "lane")

    def alarms(self, lid):
        return self.path("alarms", f"alarms_{lid}", "prescreen", "csv")

    def patches(self, lid, pol):
        return self.path("features", f"patches_{lid}_{pol}", "extract", "rec")

    def features(self, lid, pol, feat):
        return self.path("features", f"feat_{lid}_{pol}_{feat}", "extract", "mat")

    def codebook(self, fold, pol, feat):
        return self.path("models", f"codebook_f{fold}_{pol}_{feat}", "train", "rec")

    def model(self, fold, pol, feat, clf):
        return self.path("models", f"model_f{fold}_{pol}_{feat}_{clf}", "train", "rec")

    def predictions(self, fold, which):
        return self.path("results", f"predictions_f{fold}_{which}", "train", "rec")

    def results(self, name, stage="evaluate", ext="csv"):
        return self.path("results", name, stage, ext)

    def figure(self, name, stage):
        return self.path("figures", name, stage, "png")


def _need(path: Path):
    if not path.exists():
        raise StageError(f"missing upstream artifact: {path}")
    return path


def _fname(feat):
    return feat.replace("(", "-").replace(")", "")


def _enc_params(cfg):
    return EncoderParams(**cfg.encoders.model_dump())


def _clf_params(cfg):
    return ClassifierParams(cfg.classifiers.plsda_components, cfg.classifiers.svm_C,
                            cfg.classifiers.svm_tol)


def _lane_ids(cfg):
    return [l.lane_id for l in cfg.lanes]


# -- stages -------------------------------------------------------------------

def stage_generate(L: Layout):
    n = 0
    for spec in L.cfg.lane_specs():
        lane = generate_lane(spec)
        write_lane(lane, L.lane(spec.lane_id))
        n += len(lane.truth)
    return f"generated {len(L.cfg.lanes)} lanes with {n} targets"


def stage_prescreen(L: Layout):
    p = L.cfg.prescreener
    total = 0
    for lid in _lane_ids(L.cfg):
        lane = read_lane(_need(L.lane(lid)))
        alarms = prescreen_lane(lane, p.min_confidence, p.fore_px, p.back_px, p.radius_m, p.channel)
        tidx = match_alarms([a.utm for a in alarms], [t.utm for t in lane.truth],
                            L.cfg.evaluation.halo_m)
        ids = [lane.truth[j].target_id if j >= 0 else "" for j in tidx]
        write_alarms_csv(alarms, L.alarms(lid), {"target_id": ids})
        total += len(alarms)
    return f"prescreened {total} alarms"


def _read_targets(path):
    with open(path, newline="") as fh:
        return [r["target_id"] for r in csv.DictReader(fh)]


def stage_extract(L: Layout):
    cfg = L.cfg
    n = 0
    for lid in _lane_ids(cfg):
        lane = read_lane(_need(L.lane(lid)))
        alarms = read_alarms_csv(_need(L.alarms(lid)))
        utm = np.array([a.utm for a in alarms]).reshape(-1, 2)
        for pol in cfg.features.polarizations:
            cplx, norm = patch_stacks(lane, utm, pol)
            write_record(L.patches(lid, pol), "patches", {"lane": lid, "polarization": pol},
                         {"complex": cplx, "norm": norm})
            ld = _lane_data(lid, utm, [], 1, 1.0, {f"complex:{pol}": cplx, f"norm:{pol}": norm})
            for feat in cfg.features.kinds:
                if parse_feature(feat)[0] is None:
                    X = FeatureStage(feat, pol).transform(ld)
                    write_matrix(L.features(lid, pol, _fname(feat)), X,
                                 {"feature": feat, "polarization": pol, "lane": lid})
                    n += 1
    return f"extracted patches and {n} handcrafted feature matrices"


def _lane_data(lid, utm, tidx, n_targets, area, inputs):
    return LaneData(lid, utm, np.asarray(tidx, dtype=np.int64), n_targets, area, inputs)


def _load_lanes(L: Layout, pols, handcrafted=()):
    """LaneData for every lane from prescreen/extract artifacts."""
    out = []
    for lid in _lane_ids(L.cfg):
        lane_path = _need(L.lane(lid))
        lane = read_lane(lane_path)
        alarms_path = _need(L.alarms(lid))
        alarms = read_alarms_csv(alarms_path)
        ids = _read_targets(alarms_path)
        index = {t.target_id: i for i, t in enumerate(lane.truth)}
        tidx = [index[t] if t else -1 for t in ids]
        utm = np.array([a.utm for a in alarms]).reshape(-1, 2)
        inputs = {}
        for pol in pols:
            for feat in handcrafted:
                X, _ = read_matrix(_need(L.features(lid, pol, _fname(feat))))
                inputs[f"feat:{feat}:{pol}"] = X
            _, _, arrs = read_record(_need(L.patches(lid, pol)), "patches")
            inputs[f"complex:{pol}"] = arrs["complex"]
            inputs[f"norm:{pol}"] = arrs["norm"]
        out.append(_lane_data(lid, utm, tidx, len(lane.truth), lane.area_m2, inputs))
    return out


def _algorithms(cfg):
    return [(p, f, c) for p in cfg.features.polarizations for f in cfg.features.kinds
            for c in cfg.classifiers.kinds]


def _fold_matrices(L, lanes, k, pol, feat, stage=None):
    """Train/test feature matrices for fold ``k``; fits or loads the fold's codebook."""
    cfg = L.cfg
    train = [l for i, l in enumerate(lanes) if i != k]
    if stage is None:
        stage = FeatureStage(feat, pol, _enc_params(cfg), derive_seed(cfg.seed, k, pol, feat))
        if stage.encoder is not None:
            stage.codebook = load_codebook(_need(L.codebook(k, pol, _fname(feat))))
    Xtr = np.concatenate([stage.transform(l) for l in train])
    y = np.concatenate([l.labels for l in train])
    return Xtr, y, stage.transform(lanes[k]), train


def stage_train(L: Layout):
    cfg = L.cfg
    hand = [f for f in cfg.features.kinds if parse_feature(f)[0] is None]
    lanes = _load_lanes(L, cfg.features.polarizations, hand)
    algos = _algorithms(cfg)
    fusion_clf = cfg.fusion.classifier
    n_models = 0
    for k, test in enumerate(lanes):
        train = [l for i, l in enumerate(lanes) if i != k]
        if not any((l.labels > 0).any() for l in train) or test.n_targets == 0:
            raise StageError(f"fold testing lane {test.lane_id!r} lacks targets")
        test_cols, oof_cols, labels = [], [], []
        for pol in cfg.features.polarizations:
            for feat in cfg.features.kinds:
                stage = FeatureStage(feat, pol, _enc_params(cfg),
                                     derive_seed(cfg.seed, k, pol, feat)).fit(train)
                if stage.encoder is not None:
                    save_codebook(L.codebook(k, pol, _fname(feat)), stage.codebook)
                Xtr, y, Xte, _ = _fold_matrices(L, lanes, k, pol, feat, stage)
                for clf in cfg.classifiers.kinds:
                    fit_fn = make_fit_fn(clf, _clf_params(cfg))
                    scorer = fit_fn(Xtr, y)
                    save_model(L.model(k, pol, _fname(feat), clf), scorer.model)
                    n_models += 1
                    if clf == fusion_clf:
                        labels.append(f"{pol}/{feat}/{clf}")
                        test_cols.append(scorer(Xte))
                        oof_cols.append(oof_scores(Xtr, y, fit_fn, cfg.fusion.inner_folds,
                                                   derive_seed(cfg.seed, k, "oof")))
        meta = {"columns": labels, "test_lane": test.lane_id}
        if labels:
            write_record(L.predictions(k, "test"), "predictions", meta,
                         {"values": np.column_stack(test_cols)})
            write_record(L.predictions(k, "train_oof"), "predictions", meta,
                         {"values": np.column_stack(oof_cols)})
    return f"trained {n_models} models over {len(lanes)} folds ({len(algos)} algorithms)"


def stage_evaluate(L: Layout):
    cfg = L.cfg
    ev = cfg.evaluation
    hand = [f for f in cfg.features.kinds if parse_feature(f)[0] is None]
    lanes = _load_lanes(L, cfg.features.polarizations, hand)
    rows, trials = [], []
    grid = far_grid(ev.far_max, ev.far_step)
    rocs = {}
    for pol in cfg.features.polarizations:
        for feat in cfg.features.kinds:
            for k, test in enumerate(lanes):
                Xtr, y, Xte, _ = _fold_matrices(L, lanes, k, pol, feat)
                es = EvalSet(Xte, test.target_idx, test.n_targets, test.area_m2)
                for clf in cfg.classifiers.kinds:
                    model = load_model(_need(L.model(k, pol, _fname(feat), clf)))
                    roc = roc_from_arrays(predict(model, Xte), test.target_idx, test.n_targets,
                                          test.area_m2)
                    rocs.setdefault((pol, feat, clf), []).append(roc)
                    boot = bootstrap_eval((Xtr, y), es, make_fit_fn(clf, _clf_params(cfg)),
                                          ev.n_boot, derive_seed(cfg.seed, k, pol, feat, clf),
                                          ev.far_max)
                    rows.append({"fold": test.lane_id, "polarization": pol, "feature": feat,
                                 "classifier": clf, "pauc_mean": boot.mean,
                                 "pauc_ci_lo": boot.ci_lo, "pauc_ci_hi": boot.ci_hi})
                    point = pauc(roc, ev.far_max)
                    trials.extend((test.lane_id, pol, feat, clf, i, v, point)
                                  for i, v in enumerate(boot.trials))
    write_results_csv(rows, L.results("results_per_fold"))
    with open(L.results("bootstrap_trials"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "polarization", "feature", "classifier", "trial", "pauc",
                    "pauc_full_train"])
        for r in trials:
            w.writerow(list(r[:5]) + [repr(float(r[5])), repr(float(r[6]))])
    # ROC curves of the full-training models, vertically averaged over folds
    with open(L.results("roc_index"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["polarization", "feature", "classifier", "roc_csv"])
        for pol, feat, clf in _algorithms(cfg):
            p = L.results(f"roc_{pol}_{_fname(feat)}_{clf}")
            write_roc_csv(vertical_average(rocs[(pol, feat, clf)], grid), p)
            w.writerow([pol, feat, clf, p.name])
    return f"evaluated {len(rows)} (fold, algorithm) pairs with {ev.n_boot} bootstrap trials each"


def stage_fuse(L: Layout):
    cfg = L.cfg
    fu = cfg.fusion
    lanes = _load_lanes(L, ())
    fused_scores, curve_rows, summary = [], [], []
    for k, test in enumerate(lanes):
        _, meta, tr = read_record(_need(L.predictions(k, "train_oof")), "predictions")
        _, _, te = read_record(_need(L.predictions(k, "test")), "predictions")
        train = [l for i, l in enumerate(lanes) if i != k]
        y = np.concatenate([l.labels for l in train])
        trm = PredictionMatrix(tr["values"], meta["columns"])
        tem = PredictionMatrix(te["values"], meta["columns"])
        ctx = train_context(train, cfg.evaluation.far_max)
        for rep in range(fu.repetitions):
            model = sfs_select(trm, y, fu.max_nf, fu.inner_folds,
                               derive_seed(cfg.seed, k, "sfs", rep), fu.auto_stop, ctx,
                               far_max=cfg.evaluation.far_max)
            if rep == 0:
                write_fusion_csv(model, L.results(f"fusion_f{k}", "fuse"))
                write_record(L.path("models", f"fusion_f{k}", "fuse", "rec"), "fusion",
                             {"columns": model.labels, "trace": model.trace,
                              "intercept": model.plsda.intercept},
                             {"coef": model.plsda.coef, "mean": model.plsda.stats.mean,
                              "std": model.plsda.stats.std})
                fused_scores.append(fuse_predict(model, tem))
            for n, sub in enumerate(prefix_models(model, trm, y), start=1):
                s = fuse_predict(sub, tem)
                curve_rows.append((test.lane_id, rep, n, pauc(roc_from_arrays(
                    s, test.target_idx, test.n_targets, test.area_m2), cfg.evaluation.far_max)))
            summary.append(len(model.selected))
    with open(L.results("fusion_curve", "fuse"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "repetition", "n_f", "test_pauc"])
        for r in curve_rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3]))])
    rocs = [roc_from_arrays(s, l.target_idx, l.n_targets, l.area_m2)
            for s, l in zip(fused_scores, lanes)]
    write_roc_csv(vertical_average(rocs, far_grid(cfg.evaluation.far_max,
                                                  cfg.evaluation.far_step)),
                  L.results("roc_fusion", "fuse"))
    _plot_fusion_curve(curve_rows, L.figure("fusion_curve", "fuse"))
    return f"fused {len(lanes)} folds x {fu.repetitions} repetitions; mean N_f {np.mean(summary):.2f}"


def stage_confmap(L: Layout):
    from .confmap import (confidence_map, rank_percentiles, render_dictionary, save_png,
                          write_map_csv)

    cfg = L.cfg
    pol = cfg.confmap.polarization
    feat = "BOV(Raw)"
    if pol not in cfg.features.polarizations or feat not in cfg.features.kinds:
        raise StageError(f"confmap needs {feat} on {pol} in the configured features")
    if "PLSDA" not in cfg.classifiers.kinds:
        raise StageError("confmap needs the PLSDA classifier")
    lanes = _load_lanes(L, (pol,))
    n = 0
    for k, test in enumerate(lanes):
        dictionary = load_codebook(_need(L.codebook(k, pol, _fname(feat))))
        model = load_model(_need(L.model(k, pol, _fname(feat), "PLSDA")))
        img = render_dictionary(dictionary)
        save_png(img.image, L.figure(f"dictionary_f{k}_{pol}", "confmap"), 0.0, 1.0)
        norm = test.inputs[f"norm:{pol}"]
        scores = predict(model, FeatureStage(feat, pol, _enc_params(cfg), 0,
                                             dictionary).transform(test))
        # most confident alarms first
        order = np.argsort(-scores, kind="stable")[:cfg.confmap.max_alarms]
        maps = [confidence_map(norm[i], dictionary, model, cfg.encoders.pooling) for i in order]
        pct = rank_percentiles(np.stack([m.values for m in maps]))
        for j, (i, m) in enumerate(zip(order, maps)):
            stem = f"confmap_{test.lane_id}_{pol}_a{int(i):05d}"
            write_map_csv(m, L.results(stem, "confmap"), pct[j])
            save_png(m.values, L.figure(stem, "confmap"))
            save_png(np.abs(test.inputs[f"complex:{pol}"][i]),
                     L.figure(f"magnitude_{test.lane_id}_{pol}_a{int(i):05d}", "confmap"))
            n += 1
    return f"rendered {n} confidence maps and {len(lanes)} dictionaries"


def stage_report(L: Layout):
    cfg = L.cfg
    path = _need(L.results("results_per_fold"))
    trials_path = _need(L.results("bootstrap_trials"))
    pooled = {}
    with open(trials_path, newline="") as fh:
        for r in csv.DictReader(fh):
            pooled.setdefault((r["polarization"], r["feature"], r["classifier"]), []).append(
                float(r["pauc"]))
    rows = []
    for key in _algorithms(cfg):
        if key not in pooled:
            raise StageError(f"{path} has no rows for {'/'.join(key)}")
        m, lo, hi = mean_ci(pooled[key])
        rows.append({"fold": "all", "polarization": key[0], "feature": key[1],
                     "classifier": key[2], "pauc_mean": m, "pauc_ci_lo": lo, "pauc_ci_hi": hi})
    out = L.results("results", "report")
    write_results_csv(rows, out)
    for pol in cfg.features.polarizations:
        _plot_bars([r for r in rows if r["polarization"] == pol], cfg,
                   L.figure(f"pauc_{pol}", "report"), pol)
    best = max(rows, key=lambda r: r["pauc_mean"])
    roc_paths = [(f"{best['polarization']} {best['feature']} {best['classifier']}",
                  L.results(f"roc_{best['polarization']}_{_fname(best['feature'])}_"
                            f"{best['classifier']}"))]
    fusion_roc = L.results("roc_fusion", "fuse")
    if fusion_roc.exists():
        roc_paths.append(("SFS fusion", fusion_roc))
    _plot_rocs(roc_paths, L.figure("roc", "report"))
    return f"reported {len(rows)} algorithms; best {best['polarization']}/{best['feature']}/" \
           f"{best['classifier']} pAUC {best['pauc_mean']:.3f}"


# -- figures ------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "flgpr"
    return plt


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata={"Software": None})
    _pyplot().close(fig)


def _plot_bars(rows, cfg, path, pol):
    plt = _pyplot()
    feats = cfg.features.kinds
    clfs = cfg.classifiers.kinds
    fig, ax = plt.subplots(figsize=(9, 4))
    width = 0.8 / len(clfs)
    for j, clf in enumerate(clfs):
        r = [next(x for x in rows if x["feature"] == f and x["classifier"] == clf) for f in feats]
        m = np.array([x["pauc_mean"] for x in r])
        err = np.array([[x["pauc_mean"] - x["pauc_ci_lo"] for x in r],
                        [x["pauc_ci_hi"] - x["pauc_mean"] for x in r]])
        ax.bar(np.arange(len(feats)) + (j - (len(clfs) - 1) / 2) * width, m, width, yerr=err,
               label=clf, capsize=2)
    ax.set_xticks(np.arange(len(feats)), feats, rotation=30, ha="right")
    ax.set_ylabel("pAUC")
    ax.set_ylim(0, 1)
    ax.set_title(f"{pol}: pAUC to FAR {cfg.evaluation.far_max}/m^2")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def _plot_rocs(items, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, p in items:
        with open(p, newline="") as fh:
            r = list(csv.DictReader(fh))
        far = [float(x["far"]) for x in r]
        ax.step(far, [float(x["pd"]) for x in r], where="post", label=name)
        ax.fill_between(far, [float(x["ci_lo"]) for x in r], [float(x["ci_hi"]) for x in r],
                        step="post", alpha=0.2)
    ax.set_xlabel("FAR (false alarms / m^2)")
    ax.set_ylabel("P_d")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def _plot_fusion_curve(rows, path):
    plt = _pyplot()
    by_n = {}
    for _, _, n, v in rows:
        by_n.setdefault(n, []).append(v)
    ns = sorted(by_n)
    stats = [mean_ci(by_n[n]) for n in ns]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(ns, [s[0] for s in stats],
                yerr=[[s[0] - s[1] for s in stats], [s[2] - s[0] for s in stats]], marker="o",
                capsize=3)
    ax.set_xlabel("N_f")
    ax.set_ylabel("test pAUC")
    fig.tight_layout()
    _save(fig, path)


# -- entry point --------------------------------------------------------------

_RUNNERS = {"generate": stage_generate, "prescreen": stage_prescreen, "extract": stage_extract,
            "train": stage_train, "evaluate": stage_evaluate, "fuse": stage_fuse,
            "confmap": stage_confmap, "report": stage_report}


def build_parser():
    ap = argparse.ArgumentParser(prog="flgpr", description=__doc__.splitlines()[0])
    ap.add_argument("stage", choices=STAGES + ("all",))
    ap.add_argument("--config", required=True, help="experiment YAML file")
    ap.add_argument("--out", help="output directory (overrides out_dir)")
    ap.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
    ap.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    return ap


def run(argv=None):
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    out = Path(args.out or cfg.out_dir)
    for sub in SUBDIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    L = Layout(cfg, out)
    stages = STAGES if args.stage == "all" else (args.stage,)
    if args.threads:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(args.threads)
    else:
        limit = nullcontext()
    with limit:
        for st in stages:
            print(f"{st}: {_RUNNERS[st](L)}")


def main(argv=None):
    try:
        run(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (StageError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
