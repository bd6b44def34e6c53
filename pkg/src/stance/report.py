"""Interpretation tables: influencer weights per common PC, cluster summaries, pair-plot and biplot data."""
from __future__ import annotations

import csv
import json

import numpy as np

from .compose import Composition, CommonSpace
from .errors import ConfigError
from .pca import ScoreMatrix

NOISE = -1


def _pc_index(n_components: int, component) -> int:
    if isinstance(component, str):
        tail = component.rsplit("/", 1)[-1].upper()
        tail = tail[2:] if tail.startswith("PC") else tail
        if not tail.isdigit():
            raise ConfigError(f"unknown component id {component!r}")
        component = tail
    c = int(component)
    if not 1 <= c <= n_components:
        raise ConfigError(f"component {component!r} outside PC1..PC{n_components}")
    return c - 1


def composed_influencer_weights(comp: Composition, component) -> dict:
    """Net linear weight of every original influencer on one common PC, per sample.

    The weight of influencer ``i`` in sample ``s`` is the change in the common
    score when a user retweets ``i`` in every fitted window of ``s``.
    Returns ``{sample_id: (influencer_ids, weights)}``.
    """
    c = _pc_index(comp.common.model.n_components, component)
    cl = comp.common.model.loadings[:, c] / comp.common.input_scale
    out = {}
    offset = 0
    for res in comp.samples:
        k_s = res.sample_model.n_components
        to_common = res.sample_model.loadings @ cl[offset : offset + k_s]
        offset += k_s
        w = np.zeros(len(res.matrix.cols))
        col = 0
        for wf in res.windows:
            k_w = wf.model.n_components
            w += wf.model.loadings @ to_common[col : col + k_w]
            col += k_w
        out[res.sample_id] = (res.matrix.cols, w)
    return out


def top_influencers_per_component(comp: Composition, component, k: int = 10) -> dict:
    """Top-``k`` influencers per sample by absolute composed weight (sign kept)."""
    out = {}
    for sid, (cols, w) in composed_influencer_weights(comp, component).items():
        order = sorted(range(len(cols)), key=lambda j: (-abs(w[j]), cols[j]))[:k]
        out[sid] = [(cols[j], float(w[j])) for j in order]
    return out


def cluster_summary(assignment: dict, matrices: dict, k: int = 10) -> list:
    """Per cluster: size, activity share per sample, and top influencers by distinct member retweeters.

    ``assignment`` maps user -> cluster label (``NOISE`` ignored);
    ``matrices`` maps sample id -> :class:`IncidenceMatrix` with counts.
    """
    clusters = sorted({lab for lab in assignment.values() if lab != NOISE})
    rows = []
    for c in clusters:
        members = sorted(u for u, lab in assignment.items() if lab == c)
        per_sample, activity = {}, {}
        for sid, m in matrices.items():
            present = [u for u in members if u in m.row_index]
            if not present:
                per_sample[sid] = []
                activity[sid] = 0
                continue
            sub = m.select_rows(present).counts
            retweeters = np.diff(sub.tocsc().indptr)
            retweets = np.asarray(sub.sum(axis=0)).ravel()
            activity[sid] = int(retweets.sum())
            order = sorted(
                (j for j in range(len(m.cols)) if retweeters[j] > 0),
                key=lambda j: (-retweeters[j], -retweets[j], m.cols[j]),
            )[:k]
            per_sample[sid] = [
                {"influencer": m.cols[j], "retweeters": int(retweeters[j]), "retweets": int(retweets[j])}
                for j in order
            ]
        total = sum(activity.values())
        rows.append({
            "cluster": int(c),
            "size": len(members),
            "activity_share": {sid: (a / total if total else 0.0) for sid, a in activity.items()},
            "top_influencers": per_sample,
        })
    return rows


def export_pairplot(scores: ScoreMatrix, assignment: dict, drop_noise: bool = False) -> list:
    """Rows ``[user_id, cluster, PC1, ..., PCk]``; users without a cluster are ``"noise"``."""
    header = ["user_id", "cluster", *(f"PC{i + 1}" for i in range(scores.scores.shape[1]))]
    rows = [header]
    for u, vec in zip(scores.user_ids, scores.scores):
        lab = assignment.get(u, NOISE)
        if drop_noise and lab == NOISE:
            continue
        rows.append([u, "noise" if lab == NOISE else int(lab), *(float(x) for x in vec)])
    return rows


def export_biplot(common: CommonSpace, pc_x=1, pc_y=2) -> list:
    """One row per sample PC: ``[sample, sample_pc, x_loading, y_loading]``."""
    n = common.model.n_components
    ix, iy = _pc_index(n, pc_x), _pc_index(n, pc_y)
    rows = [["sample", "sample_pc", "x_loading", "y_loading"]]
    for label, vec in zip(common.rotation_labels, common.model.loadings):
        prov, pc = label.rsplit("/", 1)
        rows.append([prov.split(":", 1)[-1], pc, float(vec[ix]), float(vec[iy])])
    return rows


def rotations_table(common: CommonSpace) -> list:
    rows = [["sample_pc", "common_pc", "loading"]]
    for label, vec in zip(common.rotation_labels, common.model.loadings):
        for j, v in enumerate(vec):
            rows.append([label, f"PC{j + 1}", float(v)])
    return rows


def write_rows(rows: list, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def top_influencers_table(comp: Composition, k: int = 10) -> list:
    """Ranked by ``|weight|``; polarity goes in its own ``sign`` column."""
    rows = [["common_pc", "sample", "rank", "influencer", "abs_weight", "sign"]]
    for c in range(comp.common.model.n_components):
        for sid, lst in top_influencers_per_component(comp, c + 1, k).items():
            for r, (inf, w) in enumerate(lst, 1):
                rows.append([f"PC{c + 1}", sid, r, inf, abs(w), "+" if w >= 0 else "-"])
    return rows


