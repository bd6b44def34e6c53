"""Centered truncated PCA on sparse or dense matrices.

Centering is always implicit for sparse input: the column-mean correction is
applied as a rank-one term inside the covariance (dense route) or inside each
covariance-vector product (Lanczos route), so a sparse matrix is never
densified.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, eigsh

from .errors import ConfigError, DataError, DegenerateError

log = logging.getLogger(__name__)

DENSE_LIMIT = 4000
RANK_TOL = 1e-9
RESIDUAL_TOL = 1e-9


def window_tag(sample_id: str, index: int) -> str:
    return f"window:{sample_id}:{index}"


def sample_tag(sample_id: str) -> str:
    return f"sample:{sample_id}"


COMMON_TAG = "common"


@dataclass(frozen=True, eq=False)
class PcaModel:
    means: np.ndarray
    loadings: np.ndarray
    variances: np.ndarray
    total_variance: float
    provenance: str = ""
    col_labels: tuple = ()
    seed: int = 0
    spectrum: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.loadings.ndim != 2 or self.loadings.shape[1] == 0:
            raise DegenerateError("a PCA model needs at least one component")
        if self.loadings.shape[0] != self.means.shape[0]:
            raise DataError("loadings and means disagree on the number of input columns")
        if not self.col_labels:
            object.__setattr__(self, "col_labels", tuple(f"x{j}" for j in range(self.n_features)))
        if self.spectrum is None:
            object.__setattr__(self, "spectrum", self.variances.copy())

    @property
    def n_features(self) -> int:
        return self.means.shape[0]

    @property
    def n_components(self) -> int:
        return self.loadings.shape[1]

    @property
    def pc_labels(self) -> tuple:
        return tuple(f"{self.provenance}/PC{k + 1}" for k in range(self.n_components))

    @property
    def explained_fraction(self) -> float:
        return float(self.variances.sum() / self.total_variance) if self.total_variance > 0 else 0.0

    def truncate(self, k: int) -> "PcaModel":
        if not 1 <= k <= self.n_components:
            raise ConfigError(f"cannot keep {k} of {self.n_components} components")
        return replace(self, loadings=self.loadings[:, :k].copy(), variances=self.variances[:k].copy())


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    user_ids: tuple
    scores: np.ndarray
    provenance: str = ""
    pc_labels: tuple = ()

    def __post_init__(self):
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.user_ids):
            raise DataError("score rows do not match user ids")
        if len(set(self.user_ids)) != len(self.user_ids):
            raise DataError(f"duplicate user ids in score matrix {self.provenance!r}")
        if not self.pc_labels:
            object.__setattr__(
                self, "pc_labels", tuple(f"{self.provenance}/PC{k + 1}" for k in range(self.scores.shape[1]))
            )
        elif len(self.pc_labels) != self.scores.shape[1]:
            raise DataError("score columns do not match pc labels")

    @property
    def index(self) -> dict:
        return {u: i for i, u in enumerate(self.user_ids)}

    def rows(self, user_ids) -> np.ndarray:
        idx = self.index
        return self.scores[[idx[u] for u in user_ids]]

    def subset(self, user_ids) -> "ScoreMatrix":
        user_ids = tuple(user_ids)
        return ScoreMatrix(user_ids, self.rows(user_ids), self.provenance, self.pc_labels)


def _column_stats(X):
    n = X.shape[0]
    if sp.issparse(X):
        means = np.asarray(X.mean(axis=0)).ravel()
        sq = np.asarray(X.multiply(X).sum(axis=0)).ravel()
        var = (sq - n * means**2) / (n - 1)
        meansq = sq / n
    else:
        means = X.mean(axis=0)
        var = ((X - means) ** 2).sum(axis=0) / (n - 1)
        meansq = (X**2).mean(axis=0)
    return means, np.maximum(var, 0.0), meansq


def _covariance(X, means):
    n = X.shape[0]
    if sp.issparse(X):
        gram = (X.T @ X).toarray()
        return (gram - n * np.outer(means, means)) / (n - 1)
    Xc = X - means
    return Xc.T @ Xc / (n - 1)


def _covariance_operator(X, means):
    n, m = X.shape
    if not sp.issparse(X):
        # dense input is centered explicitly; only sparse input needs the rank-one correction
        X = X - means
        means = np.zeros(m)
    XT = X.T.tocsr() if sp.issparse(X) else X.T

    def matvec(v):
        v = np.asarray(v).ravel()
        return (XT @ (X @ v) - n * means * (means @ v)) / (n - 1)

    def matmat(V):
        return (XT @ (X @ V) - n * np.outer(means, means @ V)) / (n - 1)

    return LinearOperator((m, m), matvec=matvec, matmat=matmat, rmatvec=matvec, dtype=np.float64)


def _fix_signs(L: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(L), axis=0)
    signs = np.sign(L[idx, np.arange(L.shape[1])])
    signs[signs == 0] = 1.0
    return L * signs


def fit_pca(
    matrix,
    max_components: int,
    seed: int = 0,
    provenance: str = "",
    col_labels=(),
    method: str = "auto",
) -> PcaModel:
    """Fit a centered PCA keeping up to ``max_components`` components.

    Parameters
    ----------
    matrix : array or scipy sparse matrix, shape (n_rows, n_cols)
    max_components : int
        Upper bound on retained PCs; the model keeps ``min(max_components, rank)``.
    seed : int
        Seeds the Lanczos start vector. The dense route is seed-free.
    method : {"auto", "dense", "lanczos"}
        ``dense`` eigendecomposes the exact covariance, ``lanczos`` runs ARPACK
        on the implicit covariance operator. ``auto`` picks dense up to
        ``DENSE_LIMIT`` columns.

    Returns
    -------
    PcaModel
        Loadings follow the max-|entry|-positive sign convention.
    """
    X = matrix.tocsr().astype(np.float64) if sp.issparse(matrix) else np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("PCA input must be two-dimensional")
    n, m = X.shape
    if n < 2 or m < 1:
        raise DegenerateError(f"PCA needs >= 2 rows and >= 1 column, got {n}x{m}")
    if not 1 <= max_components <= min(n - 1, m):
        raise ConfigError(f"max_components={max_components} outside [1, {min(n - 1, m)}] for a {n}x{m} matrix")

    means, col_var, meansq = _column_stats(X)
    total = float(col_var.sum())
    scale = float(meansq.max()) if meansq.size else 0.0
    if scale == 0.0 or total <= 1e-12 * scale * m:
        raise DegenerateError(f"{provenance or 'input'}: every column is constant")

    if method == "auto":
        method = "dense" if m <= DENSE_LIMIT or max_components >= m - 1 else "lanczos"
    if method == "lanczos" and max_components >= m:
        method = "dense"

    if method == "dense":
        C = _covariance(X, means)
        evals, evecs = scipy.linalg.eigh(C)
        evals, evecs = evals[::-1], evecs[:, ::-1]
    elif method == "lanczos":
        op = _covariance_operator(X, means)
        rng = np.random.default_rng(seed)
        k_req = min(max_components, m - 1)
        evals, evecs = eigsh(op, k=k_req, which="LA", v0=rng.standard_normal(m), tol=0)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        resid = np.linalg.norm(op.matmat(evecs) - evecs * evals, axis=0)
        if evals[0] > 0 and resid.max() > RESIDUAL_TOL * evals[0]:
            log.warning("stage=pca event=residual provenance=%s max_residual=%.3g", provenance, resid.max())
    else:
        raise ConfigError(f"unknown PCA method {method!r}")

    evals = np.where(evals < 0, 0.0, evals)
    lam_max = evals[0]
    if lam_max <= 0:
        raise DegenerateError(f"{provenance or 'input'}: zero covariance")
    rank = int(np.count_nonzero(evals > RANK_TOL * lam_max))
    k = min(max_components, rank)
    loadings = _fix_signs(np.ascontiguousarray(evecs[:, :k]))
    return PcaModel(
        means=means,
        loadings=loadings,
        variances=evals[:k].copy(),
        total_variance=total,
        provenance=provenance,
        col_labels=tuple(col_labels),
        seed=seed,
        spectrum=evals[: max(k, min(len(evals), max_components))].copy(),
    )


def transform(model: PcaModel, matrix, user_ids=None) -> ScoreMatrix:
    """Project rows onto the model: ``(x - means) @ loadings``."""
    if matrix.shape[1] != model.n_features:
        raise DataError(f"matrix has {matrix.shape[1]} columns, model expects {model.n_features}")
    if sp.issparse(matrix):
        raw = np.asarray(matrix.astype(np.float64) @ model.loadings)
    else:
        raw = np.asarray(matrix, dtype=np.float64) @ model.loadings
    scores = raw - model.means @ model.loadings
    if user_ids is None:
        user_ids = tuple(range(matrix.shape[0]))
    return ScoreMatrix(tuple(user_ids), scores, model.provenance, model.pc_labels)


def select_by_variance(variances, total_variance: float, target: float = 0.95) -> int:
    """Smallest k whose leading variances cover ``target`` of ``total_variance``.

    When all given variances fall short (truncated solver) every component is
    returned and a warning is issued; see :func:`variance_shortfall`.
    """
    v = np.asarray(variances, dtype=np.float64)
    if not 0 < target <= 1:
        raise ConfigError(f"variance target must lie in (0, 1], got {target}")
    frac = np.cumsum(v) / total_variance
    hit = np.flatnonzero(frac >= target - 1e-12)
    if hit.size == 0:
        warnings.warn(
            f"computed components cover only {frac[-1]:.4f} of the variance (target {target})", stacklevel=2
        )
        return len(v)
    return int(hit[0]) + 1


def variance_shortfall(variances, total_variance: float, target: float) -> bool:
    return bool(np.sum(variances) / total_variance < target - 1e-12)


def scree_select(variances) -> int:
    """Elbow of a variance spectrum: the component count before the point of maximum curvature.

    With 0-based index ``i`` the second difference is
    ``v[i-1] - 2 v[i] + v[i+1]`` for ``1 <= i <= n-2``; the returned k is the
    first ``i`` attaining the maximum, i.e. the number of components that sit
    above the elbow point.
    """
    v = np.asarray(variances, dtype=np.float64)
    if v.size < 3:
        warnings.warn("scree selection needs at least 3 variances; keeping all", stacklevel=2)
        return int(v.size)
    d2 = v[:-2] - 2 * v[1:-1] + v[2:]
    i = int(np.argmax(d2))
    if i == 0 and np.all(np.diff(d2) <= 0):
        warnings.warn("weak scree elbow: second differences decay monotonically", stacklevel=2)
    return i + 1


# -- files ------------------------------------------------------------------

_MAGIC = "STANCE-PCA 1"


def save_model(model: PcaModel, path) -> None:
    """Text header, then little-endian float64 means, loadings (column-major), variances, spectrum."""
    header = {
        "provenance": model.provenance,
        "n_features": model.n_features,
        "n_components": model.n_components,
        "n_spectrum": int(model.spectrum.size),
        "seed": int(model.seed),
        "total_variance": float(model.total_variance).hex(),
        "col_labels": list(model.col_labels),
    }
    with open(path, "wb") as fh:
        fh.write(f"{_MAGIC}\n".encode())
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in (model.means, model.loadings.ravel(order="F"), model.variances, model.spectrum):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> PcaModel:
    with open(path, "rb") as fh:
        if fh.readline().decode().strip() != _MAGIC:
            raise DataError(f"{path} is not a model file")
        h = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    m, k, s = h["n_features"], h["n_components"], h["n_spectrum"]
    need = 8 * (m + m * k + k + s)
    if len(blob) != need:
        raise DataError(f"{path}: expected {need} payload bytes, found {len(blob)}")
    a = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    means, rest = a[:m].copy(), a[m:]
    loadings = rest[: m * k].reshape((m, k), order="F").copy()
    rest = rest[m * k :]
    return PcaModel(
        means=means,
        loadings=loadings,
        variances=rest[:k].copy(),
        total_variance=float.fromhex(h["total_variance"]),
        provenance=h["provenance"],
        col_labels=tuple(h["col_labels"]),
        seed=h["seed"],
        spectrum=rest[k:].copy(),
    )


def save_scores(scores: ScoreMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", *scores.pc_labels])
        for u, row in zip(scores.user_ids, scores.scores):
            w.writerow([u, *(repr(float(x)) for x in row)])


def load_scores(path, provenance: str | None = None) -> ScoreMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        users, rows = [], []
        for rec in r:
            users.append(rec[0])
            rows.append([float(x) for x in rec[1:]])
    labels = tuple(header[1:])
    if provenance is None:
        provenance = labels[0].rsplit("/", 1)[0] if labels else ""
    arr = np.asarray(rows, dtype=np.float64).reshape(len(users), len(labels))
    return ScoreMatrix(tuple(users), arr, provenance, labels)

