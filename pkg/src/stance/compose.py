"""Hierarchical PCA: window PCAs -> per-sample PCA -> common space across samples."""
from __future__ import annotations

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateError
from .incidence import IncidenceMatrix, build_incidence, threshold_influencers
from .ingest import DAY, TimeWindow, partition_windows
from .pca import (
    COMMON_TAG,
    PcaModel,
    ScoreMatrix,
    fit_pca,
    sample_tag,
    scree_select,
    select_by_variance,
    transform,
    variance_shortfall,
    window_tag,
)

log = logging.getLogger(__name__)


@dataclass
class WindowFit:
    window: TimeWindow
    matrix: IncidenceMatrix
    model: PcaModel
    scores: ScoreMatrix


@dataclass
class SamplePipelineResult:
    sample_id: str
    matrix: IncidenceMatrix
    windows: list
    stacked: ScoreMatrix
    sample_model: PcaModel
    sample_scores: ScoreMatrix
    shortfall: bool = False
    n_windows_total: int = 0

    @property
    def window_models(self):
        return [w.model for w in self.windows]


@dataclass
class CommonSpace:
    user_ids: tuple
    model: PcaModel
    scores: ScoreMatrix
    sample_ids: tuple
    rotation_labels: tuple
    input_scale: np.ndarray = field(repr=False)
    selection: str = "scree"

    @property
    def sample_pc_rotations(self) -> np.ndarray:
        """Coordinates of every sample PC across the common PCs (biplot arrows)."""
        return self.model.loadings

    def rotations_for(self, sample_id: str) -> tuple[tuple, np.ndarray]:
        pre = sample_tag(sample_id) + "/"
        idx = [i for i, lab in enumerate(self.rotation_labels) if lab.startswith(pre)]
        return tuple(self.rotation_labels[i] for i in idx), self.model.loadings[idx]


@dataclass
class Composition:
    samples: list
    common: CommonSpace

    def sample(self, sample_id: str) -> SamplePipelineResult:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(sample_id)


def derive_seed(seed: int, *keys) -> int:
    """Stable per-task seed from a base seed and string/int keys."""
    key = [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def window_matrices(events, start: int, end: int, cols, window_len: int = 7 * DAY, step: int | None = None, sample_id=None):
    """Per-window incidence matrices over a fixed influencer column set.

    Rows are the retweeters with at least one event in the window. Empty
    windows are omitted (their indices stay reserved).
    """
    out = []
    for win, evs in partition_windows(events, start, end, window_len, step, sample_id=sample_id):
        if evs:
            out.append((win, build_incidence(evs, cols=cols)))
    return out


def _fit_window(args):
    win, mat, max_pcs, seed = args
    n, m = mat.shape
    if n < 2:
        log.warning("stage=window event=skip sample=%s window=%d reason=active_users=%d", win.sample_id, win.window_index, n)
        return None
    k = min(max_pcs, n - 1, m)
    tag = window_tag(win.sample_id, win.window_index)
    try:
        model = fit_pca(mat.binary, k, seed=derive_seed(seed, win.sample_id, win.window_index), provenance=tag, col_labels=mat.cols)
    except DegenerateError as exc:
        log.warning("stage=window event=skip sample=%s window=%d reason=%s", win.sample_id, win.window_index, exc)
        return None
    return WindowFit(win, mat, model, transform(model, mat.binary, mat.rows))


def window_stage(windows, max_pcs: int = 10, seed: int = 0, threads: int = 1) -> list[WindowFit]:
    """Fit one PCA (at most ``max_pcs`` components) per window.

    Windows with fewer than two active retweeters, or only constant columns,
    are skipped. Results come back in window order whatever ``threads`` is.
    """
    jobs = [(w, m, max_pcs, seed) for w, m in windows]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            fits = list(pool.map(_fit_window, jobs))
    else:
        fits = [_fit_window(j) for j in jobs]
    fits = [f for f in fits if f is not None]
    if not fits:
        sid = windows[0][0].sample_id if windows else "?"
        raise DegenerateError(f"sample {sid!r}: every window is degenerate")
    return fits


def stack_scores(per_window, user_universe, provenance: str = "stacked") -> ScoreMatrix:
    """Concatenate window score columns over ``user_universe``; absent users get 0.0."""
    users = tuple(user_universe)
    idx = {u: i for i, u in enumerate(users)}
    width = sum(s.scores.shape[1] for s in per_window)
    out = np.zeros((len(users), width))
    labels = []
    col = 0
    for s in per_window:
        if len(set(s.user_ids)) != len(s.user_ids):
            raise DataError(f"duplicate users in window scores {s.provenance!r}")
        try:
            rows = [idx[u] for u in s.user_ids]
        except KeyError as exc:
            raise DataError(f"user {exc.args[0]!r} of {s.provenance!r} is outside the user universe") from exc
        k = s.scores.shape[1]
        out[rows, col : col + k] = s.scores
        labels.extend(s.pc_labels)
        col += k
    return ScoreMatrix(users, out, provenance, tuple(labels))


def sample_stage(stacked: ScoreMatrix, variance_target: float = 0.95, seed: int = 0, sample_id: str = ""):
    """PCA over the stacked window scores, keeping enough PCs to cover ``variance_target``.

    Returns ``(model, scores, shortfall)``.
    """
    n, m = stacked.scores.shape
    if n < 2:
        raise DegenerateError(f"sample {sample_id!r}: fewer than two users to fit")
    tag = sample_tag(sample_id)
    full = fit_pca(stacked.scores, min(n - 1, m), seed=seed, provenance=tag, col_labels=stacked.pc_labels)
    k = min(select_by_variance(full.spectrum, full.total_variance, variance_target), full.n_components)
    model = full.truncate(k)
    shortfall = variance_shortfall(model.variances, model.total_variance, variance_target)
    return model, transform(model, stacked.scores, stacked.user_ids), shortfall


def run_sample(
    sample_id: str,
    events,
    start: int,
    end: int,
    threshold: float = 0.001,
    window_len: int = 7 * DAY,
    step: int | None = None,
    max_window_pcs: int = 10,
    variance_target: float = 0.95,
    seed: int = 0,
    threads: int = 1,
) -> SamplePipelineResult:
    """Threshold influencers once per sample, then run the window and sample stages."""
    matrix = threshold_influencers(build_incidence(events), threshold)
    wins = window_matrices(events, start, end, matrix.cols, window_len, step, sample_id=sample_id)
    n_total = len(partition_windows([], start, end, window_len, step, sample_id=sample_id))
    fits = window_stage(wins, max_window_pcs, seed=seed, threads=threads)
    universe = sorted(set().union(*(f.scores.user_ids for f in fits)))
    stacked = stack_scores([f.scores for f in fits], universe, provenance=f"stacked:{sample_id}")
    model, scores, shortfall = sample_stage(stacked, variance_target, seed=derive_seed(seed, sample_id), sample_id=sample_id)
    if shortfall:
        log.warning("stage=sample event=variance_shortfall sample=%s", sample_id)
    return SamplePipelineResult(sample_id, matrix, fits, stacked, model, scores, shortfall, n_total)


def match_users(sample_results) -> tuple:
    """Users present in the score rows of every sample, sorted."""
    if len(sample_results) < 2:
        raise DataError("matching users needs at least two samples")
    common = set(sample_results[0].sample_scores.user_ids)
    for r in sample_results[1:]:
        common &= set(r.sample_scores.user_ids)
    if not common:
        raise DataError("no user appears in every sample")
    return tuple(sorted(common))


def common_stage(sample_results, matched_users, components="scree", seed: int = 0, standardize: bool = False) -> CommonSpace:
    """PCA over the concatenated sample scores of matched users.

    ``components`` is ``"scree"`` for automatic elbow selection or a fixed int.
    """
    users = tuple(matched_users)
    if not users:
        raise DataError("no matched users for the common space")
    blocks = [r.sample_scores.rows(users) for r in sample_results]
    labels = tuple(lab for r in sample_results for lab in r.sample_scores.pc_labels)
    Z = np.hstack(blocks)
    scale = np.ones(Z.shape[1])
    if standardize:
        sd = Z.std(axis=0, ddof=1)
        scale = np.where(sd > 0, sd, 1.0)
        Z = Z / scale
    n, m = Z.shape
    full = fit_pca(Z, min(n - 1, m), seed=seed, provenance=COMMON_TAG, col_labels=labels)
    if components == "scree":
        k = min(scree_select(full.spectrum), full.n_components)
    else:
        k = int(components)
        if k > full.n_components:
            raise DegenerateError(f"common space has rank {full.n_components}, cannot keep {k} PCs")
    model = full.truncate(max(k, 1))
    scores = transform(model, Z, users)
    return CommonSpace(
        users, model, scores, tuple(r.sample_id for r in sample_results), labels, scale,
        selection="scree" if components == "scree" else "fixed",
    )


def compose(sample_results, components="scree", seed: int = 0, standardize: bool = False) -> Composition:
    matched = match_users(sample_results)
    return Composition(list(sample_results), common_stage(sample_results, matched, components, seed, standardize))


def end_to_end_linear_check(comp: Composition, user_id, rows=None) -> np.ndarray:
    """Recompute a user's common-space scores from raw incidence rows.

    Applies each stored affine map in turn (window transform, zero-fill stack,
    sample transform, concatenation, common transform) with explicit loops.
    ``rows`` may override the user's binary row per ``(sample_id, window_index)``.
    """
    rows = rows or {}
    parts = []
    for res in comp.samples:
        stacked = []
        for wf in res.windows:
            key = (res.sample_id, wf.window.window_index)
            if key in rows:
                x = np.asarray(rows[key], dtype=np.float64)
            elif user_id in wf.matrix.row_index:
                x = np.zeros(wf.matrix.shape[1])
                r = wf.matrix.counts[wf.matrix.row_index[user_id]]
                x[r.indices] = 1.0
            else:
                stacked.append(np.zeros(wf.model.n_components))
                continue
            stacked.append(np.array([sum((x[j] - wf.model.means[j]) * wf.model.loadings[j, c] for j in range(x.size))
                                     for c in range(wf.model.n_components)]))
        y = np.concatenate(stacked)
        sm = res.sample_model
        parts.append((y - sm.means) @ sm.loadings)
    z = np.concatenate(parts) / comp.common.input_scale
    cm = comp.common.model
    return (z - cm.means) @ cm.loadings
