"""Run configuration and the end-to-end orchestrator behind ``stance run``."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import platform
import shutil
import time
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .cluster import (
    cosine_distances,
    hdbscan,
    load_assignments,
    percentile_filter,
    save_assignments,
    save_condensed_tree,
    write_summary,
)
from .compose import (
    CommonSpace,
    Composition,
    SamplePipelineResult,
    WindowFit,
    common_stage,
    match_users,
    run_sample,
    window_matrices,
)
from .errors import ConfigError, DataError, StanceError
from .graph import co_retweet_graph, louvain, write_edge_csv, write_graphml, write_partition_csv
from .incidence import hstack, load_matrix, save_matrix
from .ingest import (
    DAY,
    SampleSpec,
    active_from_min_events,
    filter_persistent,
    parse_files,
    read_active_users,
    read_events,
    to_epoch,
    write_events,
)
from .pca import COMMON_TAG, ScoreMatrix, load_model, load_scores, sample_tag, save_model, save_scores, transform
from .report import (
    cluster_summary,
    export_biplot,
    export_pairplot,
    rotations_table,
    top_influencers_table,
    write_json,
    write_rows,
)

log = logging.getLogger("stance")

STAGES = ("ingest", "compose", "cluster", "graph", "report")

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "samples": [],
    "ingest": {"active_users": None, "min_events": None, "max_error_fraction": 0.01},
    "matrix": {"threshold": 0.001},
    "window": {"length_days": 7, "step_days": None},
    "pca": {"max_window_pcs": 10, "sample_variance": 0.95, "common_components": "scree", "standardize": False},
    "cluster": {
        "percentile": 90,
        "min_cluster_size": 20,
        "min_samples": None,
        "selection": "eom",
        "allow_single_cluster": False,
        "float32": False,
    },
    "graph": {"resolution": 1.0, "weighting": "binary", "restarts": 10},
    "report": {"top_k": 10, "biplot_pcs": [1, 2]},
}

SAMPLE_KEYS = {"sample_id", "start", "end", "paths", "format"}


def effective_config(raw: dict, base_dir=".") -> dict:
    """Merge ``raw`` over the defaults, validate, and resolve relative paths against ``base_dir``."""
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULTS)
    for key, val in raw.items():
        if isinstance(DEFAULTS[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            bad = set(val) - set(DEFAULTS[key])
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            cfg[key].update(val)
        else:
            cfg[key] = val

    if not cfg["samples"]:
        raise ConfigError("config lists no samples")
    ids = set()
    samples = []
    for s in cfg["samples"]:
        bad = set(s) - SAMPLE_KEYS
        if bad:
            raise ConfigError(f"unknown sample keys: {sorted(bad)}")
        missing = {"sample_id", "start", "end", "paths"} - set(s)
        if missing:
            raise ConfigError(f"sample entry lacks {sorted(missing)}")
        if s["sample_id"] in ids:
            raise ConfigError(f"duplicate sample id {s['sample_id']!r}")
        ids.add(s["sample_id"])
        paths = [str(Path(base_dir, p)) if not os.path.isabs(p) else p for p in s["paths"]]
        samples.append({"sample_id": s["sample_id"], "start": s["start"], "end": s["end"],
                        "paths": paths, "format": s.get("format", "jsonl")})
        SampleSpec(s["sample_id"], to_epoch(s["start"]), to_epoch(s["end"]))
    cfg["samples"] = samples
    if len(samples) < 2:
        raise ConfigError("the common space needs at least two samples")

    au = cfg["ingest"]["active_users"]
    if au is not None and not os.path.isabs(au):
        cfg["ingest"]["active_users"] = str(Path(base_dir, au))
    w = cfg["window"]
    if w["step_days"] is None:
        w["step_days"] = w["length_days"]
    if w["length_days"] <= 0 or w["step_days"] <= 0:
        raise ConfigError("window length and step must be positive")
    if w["step_days"] > w["length_days"]:
        raise ConfigError("window step_days exceeds length_days; events would fall between windows")
    if not 0 < cfg["matrix"]["threshold"] < 1:
        raise ConfigError("matrix.threshold must lie in (0, 1)")
    p = cfg["pca"]
    if p["max_window_pcs"] < 1 or not 0 < p["sample_variance"] <= 1:
        raise ConfigError("invalid PCA settings")
    if p["common_components"] != "scree" and not (isinstance(p["common_components"], int) and p["common_components"] >= 1):
        raise ConfigError("pca.common_components must be 'scree' or a positive integer")
    c = cfg["cluster"]
    if not 0 <= c["percentile"] < 100:
        raise ConfigError("cluster.percentile must lie in [0, 100)")
    if c["min_samples"] is None:
        c["min_samples"] = c["min_cluster_size"]
    if c["selection"] not in ("eom", "leaf"):
        raise ConfigError("cluster.selection must be 'eom' or 'leaf'")
    if cfg["graph"]["weighting"] not in ("binary", "counts"):
        raise ConfigError("graph.weighting must be 'binary' or 'counts'")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return effective_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Paths and in-memory artifacts of one run directory."""

    def __init__(self, cfg: dict, out_dir):
        self.cfg = cfg
        self.root = Path(out_dir)
        self.manifest = {"stages": {}, "dimensions": {}, "variance": {}}
        self.events = {}
        self.composition: Composition | None = None
        self.assignment = None
        self.filtered: ScoreMatrix | None = None

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    # -- stages ---------------------------------------------------------------

    def ingest(self):
        cfg = self.cfg
        active = None
        if cfg["ingest"]["active_users"]:
            active = read_active_users(cfg["ingest"]["active_users"])
        stats = {}
        for s in cfg["samples"]:
            spec = SampleSpec(s["sample_id"], to_epoch(s["start"]), to_epoch(s["end"]), tuple(s["paths"]))
            events, st = parse_files(s["paths"], s["format"], spec, cfg["ingest"]["max_error_fraction"])
            if active is not None:
                events = filter_persistent(events, active)
            elif cfg["ingest"]["min_events"]:
                events = filter_persistent(events, active_from_min_events(events, cfg["ingest"]["min_events"]))
            if not events:
                raise DataError(f"sample {s['sample_id']!r} has no events after ingest")
            write_events(events, self.path("ingest", f"{s['sample_id']}.jsonl"))
            self.events[s["sample_id"]] = events
            stats[s["sample_id"]] = {**st.as_dict(), "kept": len(events)}
            log.info("stage=ingest event=sample sample=%s kept=%d", s["sample_id"], len(events))
        write_json(stats, self.path("ingest", "stats.json"))
        self.manifest["dimensions"]["events"] = {k: len(v) for k, v in self.events.items()}

    def _load_events(self):
        for s in self.cfg["samples"]:
            sid = s["sample_id"]
            self.events[sid] = read_events(self.path("ingest", f"{sid}.jsonl"))

    def _window_args(self):
        w = self.cfg["window"]
        return int(round(w["length_days"] * DAY)), int(round(w["step_days"] * DAY))

    def compose(self):
        cfg, p = self.cfg, self.cfg["pca"]
        if not self.events:
            self._load_events()
        wlen, step = self._window_args()
        results = []
        for s in cfg["samples"]:
            sid = s["sample_id"]
            res = run_sample(
                sid, self.events[sid], to_epoch(s["start"]), to_epoch(s["end"]),
                threshold=cfg["matrix"]["threshold"], window_len=wlen, step=step,
                max_window_pcs=p["max_window_pcs"], variance_target=p["sample_variance"],
                seed=cfg["seed"], threads=cfg["threads"],
            )
            results.append(res)
            log.info("stage=compose event=sample sample=%s windows=%d sample_pcs=%d",
                     sid, len(res.windows), res.sample_model.n_components)
        matched = match_users(results)
        common = common_stage(results, matched, p["common_components"], seed=cfg["seed"], standardize=p["standardize"])
        self.composition = Composition(results, common)
        self._write_composition()

    def _write_composition(self):
        comp = self.composition
        dims, var = self.manifest["dimensions"], self.manifest["variance"]
        for res in comp.samples:
            sid = res.sample_id
            save_matrix(res.matrix, self.path("matrix", f"{sid}.mtx"))
            for wf in res.windows:
                save_model(wf.model, self.path("compose", sid, "windows", f"w{wf.window.window_index:04d}.model"))
            save_scores(res.stacked, self.path("compose", sid, "stacked_scores.csv"))
            save_model(res.sample_model, self.path("compose", sid, "sample.model"))
            save_scores(res.sample_scores, self.path("compose", sid, "sample_scores.csv"))
            dims[sid] = {
                "retweeters": res.matrix.shape[0],
                "influencers": res.matrix.shape[1],
                "windows_total": res.n_windows_total,
                "windows_fitted": len(res.windows),
                "window_pcs": int(res.stacked.scores.shape[1]),
                "sample_pcs": res.sample_model.n_components,
            }
            var[sid] = {"sample_explained": res.sample_model.explained_fraction, "shortfall": res.shortfall}
        c = comp.common
        save_model(c.model, self.path("compose", "common.model"))
        save_scores(c.scores, self.path("compose", "common_scores.csv"))
        write_rows(rotations_table(c), self.path("compose", "rotations.csv"))
        dims["common"] = {"matched_users": len(c.user_ids), "input_columns": c.model.n_features,
                          "components": c.model.n_components, "selection": c.selection}
        var["common"] = {"explained": c.model.explained_fraction,
                         "spectrum_head": [float(x) for x in c.model.spectrum[:20]]}

    def load_composition(self) -> Composition:
        """Rebuild the in-memory composition from a run directory."""
        if not self.events:
            self._load_events()
        wlen, step = self._window_args()
        results = []
        for s in self.cfg["samples"]:
            sid = s["sample_id"]
            matrix = load_matrix(self.path("matrix", f"{sid}.mtx"))
            wins = dict((w.window_index, (w, m)) for w, m in window_matrices(
                self.events[sid], to_epoch(s["start"]), to_epoch(s["end"]), matrix.cols, wlen, step, sample_id=sid))
            fits = []
            for f in sorted(self.path("compose", sid, "windows").glob("w*.model")):
                model = load_model(f)
                idx = int(model.provenance.rsplit(":", 1)[1])
                win, mat = wins[idx]
                fits.append(WindowFit(win, mat, model, transform(model, mat.binary, mat.rows)))
            stacked = load_scores(self.path("compose", sid, "stacked_scores.csv"), f"stacked:{sid}")
            smodel = load_model(self.path("compose", sid, "sample.model"))
            sscores = load_scores(self.path("compose", sid, "sample_scores.csv"), sample_tag(sid))
            results.append(SamplePipelineResult(sid, matrix, fits, stacked, smodel, sscores))
        cmodel = load_model(self.path("compose", "common.model"))
        cscores = load_scores(self.path("compose", "common_scores.csv"), COMMON_TAG)
        Z = np.hstack([r.sample_scores.rows(cscores.user_ids) for r in results])
        scale = np.ones(Z.shape[1])
        if self.cfg["pca"]["standardize"]:
            sd = Z.std(axis=0, ddof=1)
            scale = np.where(sd > 0, sd, 1.0)
        common = CommonSpace(cscores.user_ids, cmodel, cscores, tuple(r.sample_id for r in results),
                             cmodel.col_labels, scale)
        self.composition = Composition(results, common)
        return self.composition

    def cluster(self):
        c = self.cfg["cluster"]
        scores = self.composition.common.scores if self.composition else load_scores(self.path("compose", "common_scores.csv"))
        self.filtered = percentile_filter(scores, c["percentile"])
        dm = cosine_distances(self.filtered, dtype=np.float32 if c["float32"] else np.float64)
        a = hdbscan(dm, c["min_cluster_size"], c["min_samples"], c["selection"], c["allow_single_cluster"])
        self.assignment = a
        save_scores(self.filtered, self.path("cluster", "filtered_scores.csv"))
        save_assignments(a, self.path("cluster", "assignments.csv"))
        save_condensed_tree(a.condensed_tree, self.path("cluster", "condensed_tree.csv"))
        write_summary(a, self.path("cluster", "summary.json"))
        self.manifest["dimensions"]["cluster"] = {
            "scored_users": len(scores.user_ids), "filtered_users": len(self.filtered.user_ids),
            "clusters": a.n_clusters, "noise": int(np.sum(a.labels < 0)),
            "sizes": [int(x) for x in a.sizes],
        }
        log.info("stage=cluster event=done filtered=%d clusters=%d", len(self.filtered.user_ids), a.n_clusters)

    def graph(self):
        g = self.cfg["graph"]
        labels = load_assignments(self.path("cluster", "assignments.csv"))
        mats = [load_matrix(self.path("matrix", f"{s['sample_id']}.mtx")) for s in self.cfg["samples"]]
        combined = hstack(mats, [s["sample_id"] for s in self.cfg["samples"]])
        save_matrix(combined, self.path("graph", "co_retweet.mtx"))
        clustered = sorted(u for u, lab in labels.items() if lab >= 0)
        dims = {}
        if clustered:
            ug = co_retweet_graph(combined, clustered, "user", labels, g["weighting"])
            up = louvain(ug, seed=self.cfg["seed"], resolution=g["resolution"], restarts=g["restarts"])
            write_graphml(ug, self.path("graph", "users.graphml"), {"community": up.as_dict()})
            write_edge_csv(ug, self.path("graph", "users_edges.csv"))
            write_partition_csv(up, self.path("graph", "users_communities.csv"))
            # the cluster-level graph is a summary export; communities come from the user-level network
            cg = co_retweet_graph(combined, clustered, "cluster", labels, g["weighting"])
            write_graphml(cg, self.path("graph", "clusters.graphml"))
            write_edge_csv(cg, self.path("graph", "clusters_edges.csv"))
            dims = {"user_nodes": ug.n_nodes, "user_edges": int(ug.edges.shape[0]),
                    "user_communities": up.n_communities, "user_modularity": up.modularity,
                    "cluster_nodes": cg.n_nodes, "cluster_edges": int(cg.edges.shape[0]),
                    "cluster_within_weight": {n: a["within_weight"] for n, a in cg.node_attrs.items()}}
        else:
            log.warning("stage=graph event=skip reason=no_clustered_users")
        self.manifest["dimensions"]["graph"] = dims

    def report(self):
        r = self.cfg["report"]
        comp = self.composition or self.load_composition()
        labels = load_assignments(self.path("cluster", "assignments.csv"))
        write_rows(top_influencers_table(comp, r["top_k"]), self.path("report", "top_influencers.csv"))
        mats = {res.sample_id: res.matrix for res in comp.samples}
        write_json(cluster_summary(labels, mats, r["top_k"]), self.path("report", "cluster_summary.json"))
        write_rows(export_pairplot(comp.common.scores, labels), self.path("report", "pairplot.csv"))
        n = comp.common.model.n_components
        if n >= 2:
            px, py = r["biplot_pcs"]
            write_rows(export_biplot(comp.common, px, py), self.path("report", "biplot.csv"))
        else:
            write_rows(export_biplot(comp.common, 1, 1), self.path("report", "biplot.csv"))


NUMERIC_ARTIFACT_GLOBS = ("compose/**/*.csv", "compose/**/*.model", "cluster/*", "graph/*", "report/*", "matrix/*")


def run_pipeline(config, out_dir, force: bool = False, from_stage: str = "ingest", seed=None, threads=None,
                 stop_after: str = "report") -> Path:
    """Execute every stage into ``out_dir`` and write ``manifest.json``.

    ``config`` is a path or an already-validated effective config dict.
    """
    cfg = load_config(config) if not isinstance(config, dict) else config
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = seed
    if threads is not None:
        cfg["threads"] = threads
    if from_stage not in STAGES or stop_after not in STAGES:
        raise ConfigError(f"unknown stage; choose from {STAGES}")
    if STAGES.index(stop_after) < STAGES.index(from_stage):
        raise ConfigError(f"stage {stop_after!r} comes before {from_stage!r}")
    out = Path(out_dir)
    if from_stage == "ingest":
        if out.exists() and any(out.iterdir()):
            if not force:
                raise ConfigError(f"{out} is not empty; pass --force to overwrite")
            shutil.rmtree(out)
    elif not (out / "manifest.json").exists():
        raise ConfigError(f"cannot resume from {from_stage!r}: {out} has no manifest")
    out.mkdir(parents=True, exist_ok=True)

    run = Run(cfg, out)
    if from_stage != "ingest":
        with open(out / "manifest.json", encoding="utf-8") as fh:
            old = json.load(fh)
        run.manifest["dimensions"] = old.get("dimensions", {})
        run.manifest["variance"] = old.get("variance", {})
    start = STAGES.index(from_stage)
    with threadpool_limits(limits=1):
        for name in STAGES[start : STAGES.index(stop_after) + 1]:
            t0 = time.perf_counter()
            log.info("stage=%s event=start", name)
            try:
                getattr(run, name)()
            except StanceError as exc:
                raise type(exc)(f"stage {name} failed ({out}): {exc}") from exc
            run.manifest["stages"][name] = {"seconds": round(time.perf_counter() - t0, 3)}
            log.info("stage=%s event=done seconds=%.3f", name, time.perf_counter() - t0)

    artifacts = {}
    for pattern in NUMERIC_ARTIFACT_GLOBS:
        for p in sorted(out.glob(pattern)):
            if p.is_file():
                artifacts[str(p.relative_to(out))] = _sha256(p)
    run.manifest.update({
        "version": __version__,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "effective_config": cfg,
        "artifacts": dict(sorted(artifacts.items())),
        "environment": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
    })
    write_json(run.manifest, out / "manifest.json")
    return out


__all__ = ["DEFAULTS", "STAGES", "Run", "config_hash", "effective_config", "load_config", "run_pipeline"]
