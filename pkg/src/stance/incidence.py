"""Sparse binary retweeter x influencer incidence matrices."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataError, DegenerateError


@dataclass(frozen=True, eq=False)
class IncidenceMatrix:
    """Binary incidence matrix with id <-> index maps.

    ``counts`` holds retweet multiplicities on the same sparsity pattern as
    the binary matrix; only the binary view feeds PCA.
    """

    rows: tuple
    cols: tuple
    counts: sp.csr_matrix
    row_index: dict = field(init=False, repr=False)
    col_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.counts.shape != (len(self.rows), len(self.cols)):
            raise DataError(f"count matrix shape {self.counts.shape} does not match id lists")
        ri = {r: i for i, r in enumerate(self.rows)}
        ci = {c: j for j, c in enumerate(self.cols)}
        if len(ri) != len(self.rows) or len(ci) != len(self.cols):
            raise DataError("duplicate ids in incidence matrix")
        object.__setattr__(self, "row_index", ri)
        object.__setattr__(self, "col_index", ci)

    @property
    def shape(self):
        return self.counts.shape

    @property
    def nnz(self) -> int:
        return self.counts.nnz

    @property
    def binary(self) -> sp.csr_matrix:
        b = self.counts.copy()
        b.data = np.ones_like(b.data, dtype=np.float64)
        return b.astype(np.float64)

    def column_degrees(self) -> np.ndarray:
        return np.diff(self.counts.tocsc().indptr)

    def cells(self) -> set:
        coo = self.counts.tocoo()
        return set(zip(coo.row.tolist(), coo.col.tolist()))

    def select_rows(self, row_ids: Sequence) -> "IncidenceMatrix":
        idx = [self.row_index[r] for r in row_ids]
        return IncidenceMatrix(tuple(row_ids), self.cols, self.counts[idx].tocsr())

    def restrict_columns(self, col_ids: Sequence) -> "IncidenceMatrix":
        idx = [self.col_index[c] for c in col_ids]
        return IncidenceMatrix(self.rows, tuple(col_ids), self.counts[:, idx].tocsr())


def _canonical(m: sp.spmatrix) -> sp.csr_matrix:
    m = sp.csr_matrix(m, dtype=np.int64)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


def build_incidence(events, cols: Sequence | None = None) -> IncidenceMatrix:
    """Build the incidence matrix of a set of events.

    Rows and columns are the distinct retweeters and influencers in
    lexicographic order. Passing ``cols`` fixes the column set instead
    (events to other influencers are dropped, listed columns may be empty).
    """
    events = list(events)
    if not events:
        raise DataError("cannot build an incidence matrix from zero events")
    rows = sorted({e.retweeter_id for e in events})
    if cols is None:
        cols = sorted({e.influencer_id for e in events})
    ri = {r: i for i, r in enumerate(rows)}
    ci = {c: j for j, c in enumerate(cols)}
    r_idx, c_idx = [], []
    for e in events:
        j = ci.get(e.influencer_id)
        if j is None:
            continue
        r_idx.append(ri[e.retweeter_id])
        c_idx.append(j)
    data = np.ones(len(r_idx), dtype=np.int64)
    m = sp.coo_matrix((data, (r_idx, c_idx)), shape=(len(rows), len(cols)))
    return IncidenceMatrix(tuple(rows), tuple(cols), _canonical(m))


def threshold_influencers(m: IncidenceMatrix, fraction: float = 0.001) -> IncidenceMatrix:
    """Keep influencers retweeted by at least ``ceil(fraction * n_rows)`` distinct retweeters."""
    if not 0 < fraction < 1:
        raise DataError(f"threshold fraction must lie in (0, 1), got {fraction}")
    need = min_retweeters(len(m.rows), fraction)
    keep = np.flatnonzero(m.column_degrees() >= need)
    if keep.size == 0:
        raise DegenerateError(f"influencer threshold {fraction:g} (>= {need} retweeters) removes every column")
    return IncidenceMatrix(m.rows, tuple(m.cols[j] for j in keep), m.counts[:, keep].tocsr())


def min_retweeters(n_rows: int, fraction: float) -> int:
    # guard against 0.001*1000 = 1.0000000000000002 style float noise
    return max(1, math.ceil(round(fraction * n_rows, 9)))


def hstack(mats: Sequence[IncidenceMatrix], prefixes: Sequence[str], rows: Sequence | None = None) -> IncidenceMatrix:
    """Join matrices column-wise over the union (or given list) of row ids; columns become ``prefix/col``."""
    if rows is None:
        rows = sorted(set().union(*(m.rows for m in mats)))
    ri = {r: i for i, r in enumerate(rows)}
    blocks, cols = [], []
    for m, pre in zip(mats, prefixes):
        coo = m.counts.tocoo()
        keep = [ri.get(m.rows[i], -1) for i in coo.row]
        keep = np.asarray(keep, dtype=np.int64)
        mask = keep >= 0
        blocks.append(sp.coo_matrix((coo.data[mask], (keep[mask], coo.col[mask])), shape=(len(rows), len(m.cols))))
        cols.extend(f"{pre}/{c}" for c in m.cols)
    return IncidenceMatrix(tuple(rows), tuple(cols), _canonical(sp.hstack(blocks)))


def save_matrix(m: IncidenceMatrix, path) -> None:
    """Write ``path`` (header + sorted ``row col count`` triples) and ``path.rows``/``path.cols`` sidecars."""
    coo = m.counts.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"rows={m.shape[0]} cols={m.shape[1]} nnz={m.nnz}\n")
        for k in order:
            fh.write(f"{coo.row[k]} {coo.col[k]} {coo.data[k]}\n")
    for suffix, ids in ((".rows", m.rows), (".cols", m.cols)):
        with open(f"{path}{suffix}", "w", encoding="utf-8", newline="\n") as fh:
            for i in ids:
                fh.write(f"{i}\n")


def load_matrix(path) -> IncidenceMatrix:
    with open(path, encoding="utf-8") as fh:
        header = dict(kv.split("=") for kv in fh.readline().split())
        n, k, nnz = int(header["rows"]), int(header["cols"]), int(header["nnz"])
        trip = np.loadtxt(fh, dtype=np.int64, ndmin=2) if nnz else np.zeros((0, 3), dtype=np.int64)
    if trip.shape[0] != nnz:
        raise DataError(f"{path}: header says nnz={nnz}, found {trip.shape[0]} triples")
    ids = []
    for suffix in (".rows", ".cols"):
        with open(f"{path}{suffix}", encoding="utf-8") as fh:
            ids.append(tuple(line.rstrip("\n") for line in fh))
    m = sp.coo_matrix((trip[:, 2], (trip[:, 0], trip[:, 1])), shape=(n, k))
    return IncidenceMatrix(ids[0], ids[1], _canonical(m))
