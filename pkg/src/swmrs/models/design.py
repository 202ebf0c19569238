"""Fixed-effect design matrices and cluster-period moment aggregates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidModelSpec
from .spec import CELL_SIZE, WorkingModelSpec


@dataclass(frozen=True)
class Design:
    """Row-level fixed-effect design.

    Column order: period effects (J), treatment term(s), covariate terms,
    then treatment-by-covariate terms when requested.  ``cell_constant``
    flags columns that do not vary within a cluster-period cell.
    """

    X: np.ndarray
    names: tuple
    cell_constant: np.ndarray
    treat_periods: tuple
    terms: tuple

    @property
    def n_columns(self):
        return self.X.shape[1]

    def column(self, name):
        return self.names.index(name)


def treatment_periods(data, spec: WorkingModelSpec):
    """Rollout periods that receive their own treatment coefficient.

    A period-specific effect is identifiable only where both arms are
    observed, so periods without arm contrast are skipped.
    """
    if not spec.period_specific:
        return ()
    J = data.n_periods
    out = []
    for j in range(2, J):
        zj = data.treatment[data.period == j]
        if zj.size and 0 < zj.sum() < zj.size:
            out.append(j)
    return tuple(out)


def covariate_block(data, terms):
    """(n, q) matrix of covariate terms and a flag for cell-constant columns."""
    n = data.n_rows
    cols, const = [], []
    for t in terms:
        if t == CELL_SIZE:
            cols.append(data.counts[data.cluster, data.period - 1].astype(float))
            const.append(True)
        else:
            if t not in data.covariate_names:
                raise InvalidModelSpec(f"covariate {t!r} not present in data")
            cols.append(data.covariate(t))
            const.append(False)
    X = np.column_stack(cols) if cols else np.empty((n, 0))
    return X, np.array(const, dtype=bool)


def build_design(data, spec: WorkingModelSpec, z=None, treat_periods=None,
                 centering=None) -> Design:
    """Fixed-effect design for ``data``.

    Args:
        z: if given, every row's treatment is replaced by this arm (used for
            counterfactual predictions).
        treat_periods: periods with their own treatment coefficient; derived
            from the data when omitted.
        centering: optional (J, q) per-period covariate centers.
    """
    J = data.n_periods
    n = data.n_rows
    period = data.period
    zrow = data.treatment.astype(float) if z is None else np.full(n, float(z))
    if treat_periods is None:
        treat_periods = treatment_periods(data, spec)
    terms = spec.covariate_terms(data.covariate_names)

    cols = [(period == j).astype(float) for j in range(1, J + 1)]
    names = [f"period[{j}]" for j in range(1, J + 1)]
    const = [True] * J
    if spec.period_specific:
        for j in treat_periods:
            cols.append(zrow * (period == j))
            names.append(f"treat[{j}]")
            const.append(True)
    else:
        cols.append(zrow)
        names.append("treat")
        const.append(True)
    Xc, cconst = covariate_block(data, terms)
    if centering is not None:
        Xc = Xc - centering[period - 1]
    for k, t in enumerate(terms):
        cols.append(Xc[:, k])
        names.append(t)
        const.append(bool(cconst[k]))
    if spec.interactions:
        for k, t in enumerate(terms):
            cols.append(zrow * Xc[:, k])
            names.append(f"treat:{t}")
            const.append(bool(cconst[k]))
    X = np.column_stack(cols)
    return Design(X, tuple(names), np.array(const), tuple(treat_periods), tuple(terms))


@dataclass(frozen=True)
class CellMoments:
    """Per-cell sums of M = [X, y]: ``S`` is (I, J, P) and ``G`` is (I, J, P, P)."""

    S: np.ndarray
    G: np.ndarray
    counts: np.ndarray

    @property
    def total(self):
        return self.G.sum(axis=(0, 1))


def cell_moments(data, design: Design, y=None) -> CellMoments:
    """Sufficient statistics of the design per cluster-period cell.

    Cell-constant columns are handled analytically so only the columns that
    vary within cells (individual covariates and the outcome) are
    accumulated row by row.
    """
    y = data.outcome if y is None else y
    I, J = data.n_clusters, data.n_periods
    C = I * J
    n = data.counts.ravel().astype(float)
    M = np.column_stack([design.X, y])
    const = np.append(design.cell_constant, False)
    ci = np.flatnonzero(const)
    vi = np.flatnonzero(~const)
    P = M.shape[1]
    cell = data.cell_index

    starts = np.cumsum(data.counts.ravel()) - data.counts.ravel()
    nonempty = n > 0
    Cval = np.zeros((C, ci.size))
    Cval[nonempty] = M[starts[nonempty]][:, ci]
    V = M[:, vi]
    sV = np.stack([np.bincount(cell, weights=V[:, a], minlength=C) for a in range(vi.size)], axis=1)
    sVV = np.empty((C, vi.size, vi.size))
    for a in range(vi.size):
        for b in range(a, vi.size):
            s = np.bincount(cell, weights=V[:, a] * V[:, b], minlength=C)
            sVV[:, a, b] = s
            sVV[:, b, a] = s

    S = np.empty((C, P))
    S[:, ci] = n[:, None] * Cval
    S[:, vi] = sV
    G = np.empty((C, P, P))
    G[:, ci[:, None], ci[None, :]] = n[:, None, None] * Cval[:, :, None] * Cval[:, None, :]
    cv = Cval[:, :, None] * sV[:, None, :]
    G[:, ci[:, None], vi[None, :]] = cv
    G[:, vi[:, None], ci[None, :]] = cv.transpose(0, 2, 1)
    G[:, vi[:, None], vi[None, :]] = sVV
    return CellMoments(S.reshape(I, J, P), G.reshape(I, J, P, P), data.counts)


def column_scale(X):
    """Root-mean-square of each column (1 for all-zero columns)."""
    s = np.sqrt(np.mean(X * X, axis=0))
    return np.where(s > 0, s, 1.0)
