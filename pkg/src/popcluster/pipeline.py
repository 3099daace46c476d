"""Stage-wise orchestration: PCA, BIC sweep, final fit, stability,
interpretation and diagnostics, all communicating through an output
directory (layout in docs/OUTPUTS.md)."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import zlib
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from . import dataset, diagnostics as diag, gmm, interpret, pca as pca_mod, selection
from .config import RunConfig

logger = logging.getLogger(__name__)

STAGE_SWEEP = 1
STAGE_STABILITY = 2


class StageError(RuntimeError):
    """A compute stage failed; carries the stage name, subject and seed."""

    def __init__(self, stage: str, subject: str | None, seed: int | None, cause: BaseException):
        self.stage, self.subject, self.seed = stage, subject, seed
        where = f"subject {subject}" if subject else "all subjects"
        super().__init__(f"stage {stage} failed for {where} (seed {seed}): {cause}")


class MissingArtifact(FileNotFoundError):
    pass


def stage_seed(run_seed: int, subject_id: str, stage: int) -> int:
    """Per-subject, per-stage base seed; independent of subject order."""
    return selection.derive_seed(run_seed, zlib.crc32(subject_id.encode("utf-8")), stage)


def resolve_threads(cfg: RunConfig) -> int:
    env = os.environ.get("POPCLUSTER_THREADS")
    if env:
        return max(1, int(env))
    if cfg.threads:
        return cfg.threads
    return os.cpu_count() or 1


# -- csv helpers -----------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path: Path) -> list[dict[str, str]]:
    if not path.exists():
        raise MissingArtifact(f"expected upstream artifact {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"expected upstream artifact {path}")
    return path


# -- layout ----------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    root: Path

    def subject(self, sid: str) -> Path:
        return self.root / sid

    def pca(self, sid: str) -> Path:
        return self.root / sid / "pca.pcm1"

    def spectrum(self, sid: str) -> Path:
        return self.root / sid / "pca_spectrum.csv"

    def bic_curve(self, sid: str) -> Path:
        return self.root / sid / "sweep" / "bic_curve.csv"

    def mean_bic(self, sid: str) -> Path:
        return self.root / sid / "sweep" / "mean_bic.csv"

    def fit(self, sid: str) -> Path:
        return self.root / sid / "fit.json"

    def labels(self, sid: str) -> Path:
        return self.root / sid / "labels.csv"

    def stability(self, sid: str) -> Path:
        return self.root / sid / "stability.csv"

    def diagnostics(self, sid: str) -> Path:
        return self.root / sid / "diagnostics"

    @property
    def interpret(self) -> Path:
        return self.root / "interpret"

    @property
    def report(self) -> Path:
        return self.root / "report.json"

    @property
    def quarantine(self) -> Path:
        return self.root / "quarantine"


def quarantine(layout: Layout, path: Path, exc: BaseException) -> None:
    """Move a failed stage's partial outputs aside and record the error."""
    if not path.exists():
        return
    dest = layout.quarantine / path.name
    if dest.exists():
        shutil.rmtree(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    shutil.move(str(path), str(dest))
    (dest / "error.txt").write_text(f"{exc}\n", encoding="utf-8")


# -- validation ------------------------------------------------------------


def load_matrices(cfg: RunConfig) -> dict[str, dataset.TrialMatrix]:
    return {s.id: dataset.load_matrix(s.matrix) for s in cfg.subjects}


def validate(cfg: RunConfig, matrices: dict[str, dataset.TrialMatrix]) -> None:
    """Checks that need the data but no compute."""
    for sid, m in matrices.items():
        if cfg.k_max >= m.n_trials:
            raise ValueError(
                f"sweep.k_max={cfg.k_max} must be below the {m.n_trials} trials of subject {sid}"
            )


# -- PCA + sweep -----------------------------------------------------------


def run_pca(cfg: RunConfig, matrices, layout: Layout) -> dict[str, pca_mod.PcaModel]:
    full, per_subject = {}, []
    for s in cfg.subjects:
        try:
            model = pca_mod.fit(matrices[s.id])
        except Exception as exc:
            raise StageError("pca", s.id, cfg.seed, exc) from exc
        d, reached = pca_mod.select_components(model.variance_ratio, cfg.variance_threshold)
        if not reached:
            logger.warning("%s: variance threshold not reached; using all %d components", s.id, d)
        full[s.id] = model
        per_subject.append(d)
    shared = pca_mod.shared_dimension(per_subject, cfg.shared_d_mode)
    models = {}
    for s, d_own, d in zip(cfg.subjects, per_subject, shared):
        model = full[s.id].truncate(min(d, full[s.id].d))
        models[s.id] = model
        layout.subject(s.id).mkdir(parents=True, exist_ok=True)
        pca_mod.save(model, layout.pca(s.id))
        cum = np.cumsum(full[s.id].variance_ratio)
        write_csv(
            layout.spectrum(s.id),
            ["rank", "eigenvalue", "variance_ratio", "cumulative", "kept", "own_d"],
            (
                (i, full[s.id].eigenvalues[i], full[s.id].variance_ratio[i], cum[i], i < model.d, d_own)
                for i in range(full[s.id].d)
            ),
        )
        logger.info("%s: PCA keeps %d components (own 95%% rule: %d)", s.id, model.d, d_own)
    return models


def embed(cfg: RunConfig, matrices, layout: Layout) -> dict[str, np.ndarray]:
    out = {}
    for s in cfg.subjects:
        model = pca_mod.load(_require(layout.pca(s.id)))
        out[s.id] = pca_mod.transform(model, matrices[s.id])
    return out


def run_sweep(cfg: RunConfig, embeddings, layout: Layout, threads: int) -> dict[str, selection.SweepResult]:
    results = {}
    for s in cfg.subjects:
        base = stage_seed(cfg.seed, s.id, STAGE_SWEEP)
        try:
            res = selection.bic_sweep(
                embeddings[s.id], cfg.k_min, cfg.k_max, cfg.n_init, base, cfg.gmm, threads
            )
        except Exception as exc:
            raise StageError("sweep", s.id, base, exc) from exc
        write_csv(
            layout.bic_curve(s.id),
            ["k", "init", "seed", "bic", "loglik", "converged"],
            ((r.k, r.init, r.seed, r.bic, r.log_likelihood, r.converged) for r in res.records()),
        )
        write_csv(
            layout.mean_bic(s.id),
            ["k", "mean_bic", "chosen"],
            ((k, res.mean_bic[k], k == res.chosen_k) for k in res.k_grid),
        )
        logger.info("%s: chosen K=%d", s.id, res.chosen_k)
        results[s.id] = res
    return results


def sweep_from_csv(path: Path) -> selection.SweepResult:
    rows = read_csv(path)
    per_k: dict[int, list] = {}
    for r in rows:
        rec = selection.InitRecord(
            int(r["k"]), int(r["init"]), int(r["seed"]), float(r["bic"]),
            float(r["loglik"]), r["converged"] == "true", 0,
        )
        per_k.setdefault(rec.k, []).append(rec)
    grid = tuple(sorted(per_k))
    per_k = {k: tuple(sorted(v, key=lambda r: r.init)) for k, v in per_k.items()}
    mean = {k: math.fsum(r.bic for r in per_k[k]) / len(per_k[k]) for k in grid}
    chosen = grid[0]
    for k in grid[1:]:
        if mean[k] < mean[chosen] - selection.BIC_TIE:
            chosen = k
    return selection.SweepResult(grid, per_k, mean, chosen, 0)


# -- final fit + stability ---------------------------------------------------


def run_fit(cfg: RunConfig, matrices, embeddings, layout: Layout) -> dict[str, gmm.GmmFit]:
    fits = {}
    for s in cfg.subjects:
        sweep = sweep_from_csv(layout.bic_curve(s.id))
        best = sweep.best_init()
        y = embeddings[s.id]
        try:
            fit = gmm.em_fit(y, sweep.chosen_k, best.seed, cfg.gmm)
            post = gmm.responsibilities(fit.params, y)
        except Exception as exc:
            raise StageError("fit", s.id, best.seed, exc) from exc
        gmm.save_fit(fit, layout.fit(s.id))
        labels = gmm.hard_assign(post)
        write_csv(
            layout.labels(s.id),
            ["trial_id", "label"] + [f"p{c}" for c in range(fit.k)],
            (
                [tid, int(lab), *post.resp[i]]
                for i, (tid, lab) in enumerate(zip(matrices[s.id].trial_ids, labels))
            ),
        )
        fits[s.id] = fit
    return fits


def load_clustering(layout: Layout, sid: str) -> interpret.Clustering:
    rows = read_csv(layout.labels(sid))
    if not rows:
        raise MissingArtifact(f"{layout.labels(sid)} is empty")
    k = len([c for c in rows[0] if c.startswith("p")])
    ids = tuple(r["trial_id"] for r in rows)
    resp = np.array([[float(r[f"p{c}"]) for c in range(k)] for r in rows])
    labels = np.array([int(r["label"]) for r in rows])
    return interpret.Clustering(sid, ids, labels, k, gmm.Posterior(resp))


def run_stability(cfg: RunConfig, embeddings, layout: Layout, threads: int) -> dict[str, selection.StabilityResult]:
    out = {}
    for s in cfg.subjects:
        fit = gmm.load_fit(_require(layout.fit(s.id)))
        base = stage_seed(cfg.seed, s.id, STAGE_STABILITY)
        seeds = [selection.derive_seed(base, fit.k, i) for i in range(cfg.n_refit)]
        try:
            res = selection.stability(embeddings[s.id], fit.k, cfg.n_refit, seeds, cfg.gmm, threads)
        except Exception as exc:
            raise StageError("stability", s.id, base, exc) from exc
        write_csv(
            layout.stability(s.id),
            ["refit_a", "refit_b", "seed_a", "seed_b", "rand", "adjusted_rand"],
            (
                (i, j, seeds[i], seeds[j], res.rand_matrix[i, j], res.ari_matrix[i, j])
                for i in range(cfg.n_refit)
                for j in range(i + 1, cfg.n_refit)
            ),
        )
        out[s.id] = res
    return out


# -- interpretation ----------------------------------------------------------


def load_regions(path: Path, n_features: int) -> dict[str, np.ndarray]:
    """Region assignment file: CSV with header ``feature,region``; one row per
    feature index that belongs to a region."""
    rows = read_csv(path)
    out: dict[str, list[int]] = {}
    for r in rows:
        idx = int(r["feature"])
        if not 0 <= idx < n_features:
            raise ValueError(f"{path}: feature index {idx} outside [0, {n_features})")
        out.setdefault(r["region"], []).append(idx)
    return {k: np.array(sorted(v), dtype=np.intp) for k, v in out.items()}


def _aligned_ratings(table: dataset.RatingsTable, clustering: interpret.Clustering):
    shared = [t for t in clustering.trial_ids if t in set(table.trial_ids)]
    if not shared:
        raise ValueError(f"no shared trials between ratings and subject {clustering.subject_id}")
    if len(shared) < len(clustering.trial_ids):
        logger.warning(
            "%s: %d clustered trials have no ratings and are dropped",
            clustering.subject_id, len(clustering.trial_ids) - len(shared),
        )
    pos = {t: i for i, t in enumerate(table.trial_ids)}
    return table.take([pos[t] for t in shared]), clustering.reorder(shared)


def run_interpret(cfg: RunConfig, layout: Layout) -> dict:
    """All cross-subject analyses; returns the summary that goes in the report."""
    clusterings = [load_clustering(layout, s.id) for s in cfg.subjects]
    fits = {s.id: gmm.load_fit(_require(layout.fit(s.id))) for s in cfg.subjects}
    pcas = {s.id: pca_mod.load(_require(layout.pca(s.id))) for s in cfg.subjects}
    out_dir = layout.interpret
    out_dir.mkdir(parents=True, exist_ok=True)
    summary: dict = {}

    # trial overlap on the trials every subject has
    common = set(clusterings[0].trial_ids)
    for c in clusterings[1:]:
        common &= set(c.trial_ids)
    if any(len(c.trial_ids) != len(common) for c in clusterings):
        logger.warning("overlap restricted to %d trials shared by all subjects", len(common))
    order = [t for t in clusterings[0].trial_ids if t in common]
    om = interpret.overlap_matrix([c.reorder(order) for c in clusterings])
    thr = interpret.OVERLAP_THRESHOLDS
    write_csv(
        out_dir / "overlap_matrix.csv",
        ["subject_a", "cluster_a", "subject_b", "cluster_b", "percent"] + [f"above_{t:g}" for t in thr],
        (
            (*om.index[i], *om.index[j], om.values[i, j], *(om.thresholds[t][i, j] for t in thr))
            for i in range(len(om.index))
            for j in range(len(om.index))
        ),
    )
    across = np.triu(om.across_subject_mask(), 1)
    summary["overlap"] = {
        "n_trials": len(order),
        "n_clusters": len(om.index),
        "n_across_pairs": int(across.sum()),
        "across_subject_mean": om.across_mean,
        "across_subject_sd": om.across_sd,
        "within_subject_offdiag_max": float(
            om.values[np.triu(~om.across_subject_mask(), 1)].max(initial=0.0)
        ),
        "pairs_above": {f"{t:g}": int((om.thresholds[t] & across).sum()) for t in thr},
    }

    # ratings
    summary["nmi"] = {}
    summary["labels"] = {}
    label_rows = []
    for entry in cfg.ratings:
        table = dataset.load_ratings_csv(entry.path, entry.kinds, entry.default_kind)
        nmi_rows, kl_rows = [], []
        cont_vals, disc_vals, clipped = [], {"arithmetic": [], "h_y": []}, 0
        never_top = {}
        for cl in clusterings:
            tab, cl_a = _aligned_ratings(table, cl)
            cont_cols = [j for j, k in enumerate(tab.kinds) if k.kind == dataset.CONTINUOUS]
            for j, name in enumerate(tab.column_names):
                col = tab.values[:, j]
                if tab.kinds[j].kind == dataset.CONTINUOUS:
                    det = interpret.gaussian_nmi_detail(col, cl_a.labels)
                    clipped += det.clipped
                    cont_vals.append(det.nmi)
                    nmi_rows.append((cl.subject_id, name, "continuous", "gaussian_h_y", len(col), det.nmi, det.mi, det.h_y, det.clipped))
                    for c, kl, size in zip(det.clusters, det.kl, det.sizes):
                        kl_rows.append((cl.subject_id, name, c, size, kl))
                else:
                    for mode in ("arithmetic", "h_y"):
                        v, mi, norm = interpret.discrete_nmi_detail(col.astype(np.int64), cl_a.labels, mode)
                        disc_vals[mode].append(v)
                        nmi_rows.append((cl.subject_id, name, "discrete", f"discrete_{mode}", len(col), v, mi, norm, False))
                    for c in range(cl_a.k):
                        vals, counts = np.unique(col[cl_a.labels == c].astype(np.int64), return_counts=True)
                        for v, n in zip(vals, counts):
                            label_rows.append((entry.name, cl.subject_id, c, f"{name}={v}", int(n)))
            if cont_cols:
                names = [tab.column_names[j] for j in cont_cols]
                dist = interpret.top_label_distribution(tab.values[:, cont_cols], names, cl_a)
                never_top[cl.subject_id] = list(dist.never_top)
                for c in range(cl_a.k):
                    for j, name in enumerate(names):
                        if dist.counts[c, j]:
                            label_rows.append((entry.name, cl.subject_id, c, name, int(dist.counts[c, j])))
        write_csv(
            out_dir / f"nmi_{entry.name}.csv",
            ["subject", "column", "kind", "method", "n_trials", "nmi", "mi", "normalizer_entropy", "clipped"],
            nmi_rows,
        )
        if kl_rows:
            write_csv(out_dir / f"kl_{entry.name}.csv", ["subject", "column", "cluster", "size", "kl"], kl_rows)
        block = {}
        if cont_vals:
            block["gaussian"] = _stats(cont_vals) | {"clipped": clipped}
        for mode, vals in disc_vals.items():
            if vals:
                block[f"discrete_{mode}"] = _stats(vals)
        summary["nmi"][entry.name] = block
        if never_top:
            all_never = set.intersection(*(set(v) for v in never_top.values()))
            summary["labels"][entry.name] = {
                "never_top_any_subject": sorted(all_never),
                "never_top_per_subject": never_top,
            }
    write_csv(
        out_dir / "label_distribution.csv", ["rating", "subject", "cluster", "label", "count"], label_rows
    )

    # cluster means in feature space
    masks: dict[str, np.ndarray | None] = {"all": None}
    if cfg.region_file is not None:
        m = next(iter(pcas.values())).m
        regions = load_regions(cfg.region_file, m)
        wanted = cfg.regions or tuple(sorted(regions))
        for r in wanted:
            if r not in regions:
                raise ValueError(f"region {r!r} not in {cfg.region_file}")
            masks[r] = regions[r]
    cos_rows, cos_summary = [], {}
    cthr = interpret.COSINE_THRESHOLDS
    for region, mask in masks.items():
        cm = interpret.cluster_means_cosine(fits, pcas, mask)
        for i in range(len(cm.index)):
            for j in range(len(cm.index)):
                v = cm.values[i, j]
                cos_rows.append(
                    (region, *cm.index[i], *cm.index[j], "" if np.isnan(v) else float(v),
                     *(bool(cm.thresholds[t][i, j]) for t in cthr))
                )
        cos_summary[region] = {
            "within_subject_mean": cm.within_mean,
            "between_subject_mean": cm.between_mean,
            "undefined": [f"{s}:{c}" for s, c in cm.undefined],
        }
    write_csv(
        out_dir / "cosine_means.csv",
        ["region", "subject_a", "cluster_a", "subject_b", "cluster_b", "cosine"] + [f"above_{t:g}" for t in cthr],
        cos_rows,
    )
    summary["cosine"] = cos_summary
    return summary


def _stats(vals) -> dict:
    a = np.asarray(vals, dtype=float)
    return {
        "n": int(a.size),
        "mean": float(a.mean()),
        "sd": float(a.std(ddof=1)) if a.size > 1 else math.nan,
        "min": float(a.min()),
        "max": float(a.max()),
    }


# -- diagnostics -------------------------------------------------------------


def feasible_diagnostics(cfg: diag.DiagnosticsConfig, n: int) -> diag.DiagnosticsConfig | None:
    sizes = tuple(s for s in cfg.sample_sizes if s <= n)
    train = tuple(s for s in cfg.train_sizes if s + cfg.test_n <= n)
    if not sizes or not train:
        return None
    return diag.DiagnosticsConfig(sizes, cfg.n_iter, cfg.top_vectors, cfg.test_n, train, cfg.seed, cfg.d_rule)


def run_diagnostics(cfg: RunConfig, matrices, layout: Layout) -> dict:
    out = {}
    for s in cfg.subjects:
        x = matrices[s.id]
        dcfg = feasible_diagnostics(cfg.diagnostics, x.n_trials)
        if dcfg is None:
            logger.warning("%s: too few trials for any diagnostics size; skipped", s.id)
            out[s.id] = {"skipped": True}
            continue
        if dcfg != cfg.diagnostics:
            logger.warning("%s: diagnostics sizes above %d trials dropped", s.id, x.n_trials)
        try:
            out[s.id] = write_diagnostics(x, dcfg, layout.diagnostics(s.id))
        except Exception as exc:
            raise StageError("diagnose", s.id, dcfg.seed, exc) from exc
    return out


def write_diagnostics(x, dcfg: diag.DiagnosticsConfig, folder: Path) -> dict:
    scree = diag.eigenvalue_spread(x, dcfg)
    write_csv(
        folder / "scree.csv",
        ["size", "rank", "eigenvalue"],
        ((c.size, r, v) for c in scree for r, v in enumerate(c.eigenvalues)),
    )
    cons = diag.eigenvector_consistency(x, dcfg)
    write_csv(
        folder / "eigvec_consistency.csv",
        ["comparison", "size_a", "iter_a", "vec_a", "size_b", "iter_b", "vec_b", "abs_cos"],
        (
            (r.comparison, r.size_a, r.iter_a, r.vec_a, r.size_b, r.iter_b, r.vec_b, r.abs_cos)
            for r in cons.rows
        ),
    )
    loss = diag.reconstruction_loss_curve(x, dcfg)
    write_csv(folder / "reconstruction_loss.csv", ["train_size", "d", "loss"], ((p.train_size, p.d, p.loss) for p in loss))
    return {
        "sample_sizes": list(dcfg.sample_sizes),
        "train_sizes": list(dcfg.train_sizes),
        "first_vector_min_abs_cos": {str(s): cons.first_vector_min(s) for s in dcfg.sample_sizes},
        "loss_first": loss[0].loss,
        "loss_last": loss[-1].loss,
    }


# -- report -----------------------------------------------------------------


def load_truth(path: Path) -> dict[str, int]:
    return {r["trial_id"]: int(r["label"]) for r in read_csv(path)}


def subject_summary(cfg: RunConfig, s, layout: Layout) -> dict:
    model = pca_mod.load(layout.pca(s.id))
    sweep = sweep_from_csv(layout.bic_curve(s.id))
    fit = gmm.load_fit(layout.fit(s.id))
    clustering = load_clustering(layout, s.id)
    stab = read_csv(layout.stability(s.id)) if layout.stability(s.id).exists() else []
    out = {
        "n_trials": len(clustering.trial_ids),
        "n_features": model.m,
        "pca_components": model.d,
        "variance_explained": float(np.sum(model.variance_ratio)),
        "chosen_k": sweep.chosen_k,
        "mean_bic": {str(k): v for k, v in sweep.mean_bic.items()},
        "bic_curve": str(layout.bic_curve(s.id).relative_to(layout.root)),
        "cluster_sizes": clustering.sizes().tolist(),
        "fit": {
            "seed": fit.seed,
            "log_likelihood": fit.log_likelihood,
            "bic": gmm.bic(fit),
            "converged": fit.converged,
            "n_iter": fit.n_iter,
        },
    }
    if stab:
        rand = [float(r["rand"]) for r in stab]
        ari = [float(r["adjusted_rand"]) for r in stab]
        out["stability"] = {
            "n_refit": cfg.n_refit,
            "mean_rand": float(np.mean(rand)),
            "mean_adjusted_rand": float(np.mean(ari)),
        }
    if s.truth is not None:
        truth = load_truth(s.truth)
        true_labels = np.array([truth[t] for t in clustering.trial_ids])
        k_true = len(set(truth.values()))
        out["oracle"] = {
            "k_true": k_true,
            "k_match": sweep.chosen_k == k_true,
            "rand_vs_truth": selection.rand_index(true_labels, clustering.labels),
        }
    return out


def build_report(cfg: RunConfig, layout: Layout, interp: dict | None, diagnostics: dict | None) -> dict:
    subjects = {s.id: subject_summary(cfg, s, layout) for s in cfg.subjects}
    ks = [v["chosen_k"] for v in subjects.values()]
    rands = [v["stability"]["mean_rand"] for v in subjects.values() if "stability" in v]
    report = {
        "schema": "popcluster-report/1",
        "subjects": subjects,
        "summary": {
            "chosen_k_min": min(ks),
            "chosen_k_max": max(ks),
            "mean_rand": float(np.mean(rands)) if rands else None,
        },
        "overlap": (interp or {}).get("overlap"),
        "nmi": (interp or {}).get("nmi"),
        "cosine": (interp or {}).get("cosine"),
        "labels": (interp or {}).get("labels"),
        "diagnostics": diagnostics,
        "provenance": {
            "version": __version__,
            "seed": cfg.seed,
            "config": cfg.echo(),
            "generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    }
    return _json_safe(report)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def write_report(report: dict, layout: Layout) -> None:
    layout.report.write_text(json.dumps(report, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def run_all(cfg: RunConfig) -> dict:
    """Every stage in order; returns the report."""
    layout = Layout(cfg.output_dir)
    layout.root.mkdir(parents=True, exist_ok=True)
    threads = resolve_threads(cfg)
    matrices = load_matrices(cfg)
    validate(cfg, matrices)
    try:
        run_subject_stages(cfg, layout, matrices, threads)
    except StageError as exc:
        if exc.subject:
            quarantine(layout, layout.subject(exc.subject), exc)
        raise
    interp = None
    try:
        interp = run_interpret(cfg, layout)
    except Exception as exc:
        quarantine(layout, layout.interpret, exc)
        raise StageError("interpret", None, cfg.seed, exc) from exc
    diagnostics = None
    if cfg.run_diagnostics:
        try:
            diagnostics = run_diagnostics(cfg, matrices, layout)
        except StageError as exc:
            quarantine(layout, layout.subject(exc.subject), exc)
            raise
    report = build_report(cfg, layout, interp, diagnostics)
    write_report(report, layout)
    return report


def run_subject_stages(cfg: RunConfig, layout: Layout, matrices, threads: int) -> None:
    run_pca(cfg, matrices, layout)
    embeddings = embed(cfg, matrices, layout)
    run_sweep(cfg, embeddings, layout, threads)
    run_fit(cfg, matrices, embeddings, layout)
    run_stability(cfg, embeddings, layout, threads)
