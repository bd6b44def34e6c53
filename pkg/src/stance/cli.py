"""``stance`` command line: ingest, synth, compose, cluster, graph, report, run."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

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
from .errors import ConfigError, StanceError
from .graph import co_retweet_graph, louvain, write_edge_csv, write_graphml, write_partition_csv
from .incidence import load_matrix
from .ingest import (
    SampleSpec,
    active_from_min_events,
    filter_persistent,
    parse_files,
    read_active_users,
    to_epoch,
    write_events,
)
from .pca import load_scores
from .pipeline import STAGES, Run, load_config, run_pipeline
from .report import cluster_summary, export_biplot, export_pairplot, top_influencers_table, write_json, write_rows
from .synth import PlantedConfig, write_corpus

log = logging.getLogger("stance")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, default=None, help="worker threads for window fits")
    p.add_argument("--out", required=True, help="output file or directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--window-step", type=float, default=None, help="window stride in days")
    p.add_argument("--components", type=int, default=None, help="fixed number of common PCs instead of scree")
    p.add_argument("--standardize", action="store_true", help="z-score sample PCs before the common PCA")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags()
    ap = argparse.ArgumentParser(prog="stance", description=__doc__)
    ap.add_argument("--version", action="version", version=f"stance {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[g], help="parse raw retweet logs into the normalized schema")
    p.add_argument("--sample", required=True)
    p.add_argument("--start", required=True)
    p.add_argument("--end", required=True)
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--active-users", default=None)
    p.add_argument("--min-events", type=int, default=None)
    p.add_argument("--max-error-fraction", type=float, default=0.01)
    p.add_argument("files", nargs="+")

    p = sub.add_parser("synth", parents=[g], help="write a planted-stance corpus with ground truth")
    p.add_argument("--config", default=None, help="planted config JSON (defaults if omitted)")

    p = sub.add_parser("compose", parents=[g], help="ingest and hierarchical PCA into a run directory")
    _config_overrides(p)

    p = sub.add_parser("cluster", parents=[g], help="percentile filter and HDBSCAN on a score CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--percentile", type=float, default=90.0)
    p.add_argument("--min-cluster-size", type=int, default=20)
    p.add_argument("--min-samples", type=int, default=None)
    p.add_argument("--selection", choices=("eom", "leaf"), default="eom")
    p.add_argument("--allow-single-cluster", action="store_true")
    p.add_argument("--float32", action="store_true")

    p = sub.add_parser("graph", parents=[g], help="co-retweet graph with Louvain communities")
    p.add_argument("--matrix", required=True)
    p.add_argument("--assignments", required=True)
    p.add_argument("--level", choices=("user", "cluster"), default="cluster")
    p.add_argument("--weighting", choices=("binary", "counts"), default="binary")
    p.add_argument("--resolution", type=float, default=1.0)
    p.add_argument("--restarts", type=int, default=10)

    p = sub.add_parser("report", parents=[g], help="interpretation tables")
    p.add_argument("kind", choices=("top-influencers", "cluster-summary", "pairplot", "biplot"))
    p.add_argument("--run", default=None, help="run directory (top-influencers, cluster-summary, biplot)")
    p.add_argument("--scores", default=None, help="score CSV (pairplot)")
    p.add_argument("--assignments", default=None, help="assignments CSV (pairplot, cluster-summary)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--component", default=None, help="single common PC for top-influencers")
    p.add_argument("--pc-x", default="1")
    p.add_argument("--pc-y", default="2")
    p.add_argument("--drop-noise", action="store_true")

    p = sub.add_parser("run", parents=[g], help="every stage end to end")
    _config_overrides(p)
    p.add_argument("--from-stage", choices=STAGES, default="ingest")
    return ap


def _apply_overrides(cfg: dict, args) -> dict:
    if args.window_step is not None:
        cfg["window"]["step_days"] = args.window_step
        if args.window_step <= 0 or args.window_step > cfg["window"]["length_days"]:
            raise ConfigError("--window-step must lie in (0, window length]")
    if args.components is not None:
        if args.components < 1:
            raise ConfigError("--components must be positive")
        cfg["pca"]["common_components"] = args.components
    if args.standardize:
        cfg["pca"]["standardize"] = True
    return cfg


def cmd_ingest(args) -> None:
    spec = SampleSpec(args.sample, to_epoch(args.start), to_epoch(args.end), tuple(args.files))
    events, stats = parse_files(args.files, args.format, spec, args.max_error_fraction)
    if args.active_users:
        events = filter_persistent(events, read_active_users(args.active_users))
    elif args.min_events:
        events = filter_persistent(events, active_from_min_events(events, args.min_events))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_events(events, args.out)
    log.info("stage=ingest event=done sample=%s %s kept=%d", args.sample,
             " ".join(f"{k}={v}" for k, v in stats.as_dict().items()), len(events))


def cmd_synth(args) -> None:
    raw = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read planted config {args.config}: {exc}") from exc
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = PlantedConfig.from_dict(raw)
    paths = write_corpus(cfg, args.out)
    log.info("stage=synth event=done out=%s samples=%d", args.out, len(paths))


def _run_like(args, stages) -> None:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    from_stage = getattr(args, "from_stage", "ingest")
    run_pipeline(cfg, args.out, force=args.force, from_stage=from_stage, stop_after=stages[-1])


def cmd_cluster(args) -> None:
    scores = load_scores(args.scores)
    filtered = percentile_filter(scores, args.percentile)
    dm = cosine_distances(filtered, dtype=np.float32 if args.float32 else np.float64)
    a = hdbscan(dm, args.min_cluster_size, args.min_samples, args.selection, args.allow_single_cluster)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_assignments(a, out / "assignments.csv")
    save_condensed_tree(a.condensed_tree, out / "condensed_tree.csv")
    write_summary(a, out / "summary.json")
    log.info("stage=cluster event=done filtered=%d clusters=%d", len(filtered.user_ids), a.n_clusters)


def cmd_graph(args) -> None:
    m = load_matrix(args.matrix)
    labels = load_assignments(args.assignments)
    members = sorted(u for u, lab in labels.items() if lab >= 0 and u in m.row_index)
    g = co_retweet_graph(m, members, args.level, labels, args.weighting)
    seed = 0 if args.seed is None else args.seed
    part = louvain(g, seed=seed, resolution=args.resolution, restarts=args.restarts)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_graphml(g, out, {"community": part.as_dict()})
    stem = out.with_suffix("")
    write_edge_csv(g, f"{stem}_edges.csv")
    write_partition_csv(part, f"{stem}_communities.csv")
    log.info("stage=graph event=done nodes=%d edges=%d communities=%d modularity=%.6f",
             g.n_nodes, g.edges.shape[0], part.n_communities, part.modularity)


def cmd_report(args) -> None:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "pairplot":
        if not (args.scores and args.assignments):
            raise ConfigError("pairplot needs --scores and --assignments")
        rows = export_pairplot(load_scores(args.scores), load_assignments(args.assignments), args.drop_noise)
        write_rows(rows, out)
        return
    if not args.run:
        raise ConfigError(f"{args.kind} needs --run")
    with open(Path(args.run) / "manifest.json", encoding="utf-8") as fh:
        cfg = json.load(fh)["effective_config"]
    run = Run(cfg, args.run)
    if args.kind == "cluster-summary":
        labels = load_assignments(args.assignments or Path(args.run) / "cluster" / "assignments.csv")
        mats = {s["sample_id"]: load_matrix(Path(args.run) / "matrix" / f"{s['sample_id']}.mtx") for s in cfg["samples"]}
        write_json(cluster_summary(labels, mats, args.k), out)
        return
    comp = run.load_composition()
    if args.kind == "top-influencers":
        rows = top_influencers_table(comp, args.k)
        if args.component is not None:
            want = f"PC{str(args.component).rsplit('PC', 1)[-1]}"
            rows = [rows[0]] + [r for r in rows[1:] if r[0] == want]
        write_rows(rows, out)
    else:
        write_rows(export_biplot(comp.common, args.pc_x, args.pc_y), out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="level=%(levelname)s %(message)s",
        force=True,
    )
    try:
        if args.command == "ingest":
            cmd_ingest(args)
        elif args.command == "synth":
            cmd_synth(args)
        elif args.command == "compose":
            _run_like(args, STAGES[:2])
        elif args.command == "run":
            _run_like(args, STAGES)
        elif args.command == "cluster":
            cmd_cluster(args)
        elif args.command == "graph":
            cmd_graph(args)
        elif args.command == "report":
            cmd_report(args)
    except StanceError as exc:
        log.error("stage=%s event=error code=%d message=%s", args.command, exc.exit_code, exc)
        return exc.exit_code
    except OSError as exc:
        log.error("stage=%s event=error code=3 message=%s", args.command, exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
