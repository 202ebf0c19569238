"""Weighted ANCOVA with covariates centered at weighted period means."""
from __future__ import annotations

import numpy as np

from ..errors import RankDeficientDesign
from .base import FittedModel
from .design import build_design, column_scale, covariate_block
from .spec import ANCOVA_I, WorkingModelSpec


def weighted_period_centers(data, scheme, terms):
    """X-bar_j^omega = sum_i w_ij Xbar_ij / sum_i w_ij per period, as a (J, q) array.

    With weights constant within a cell this equals the row-weighted mean of
    the covariates over all individuals observed in period j.
    """
    X, _ = covariate_block(data, terms)
    J = data.n_periods
    w = scheme.row
    tot = np.bincount(data.period - 1, weights=w, minlength=J)
    centers = np.empty((J, X.shape[1]))
    for k in range(X.shape[1]):
        s = np.bincount(data.period - 1, weights=w * X[:, k], minlength=J)
        centers[:, k] = np.where(tot > 0, s / np.where(tot > 0, tot, 1.0), 0.0)
    return centers


def fit_ancova_wls(data, scheme, spec: WorkingModelSpec = ANCOVA_I) -> FittedModel:
    """Weighted least squares with individual weights from ``scheme``.

    Mean model: beta_j + tau_j Z_ij + Xtilde gamma (+ Z_ij Xtilde eta when
    ``spec.interactions``), with Xtilde centered per period.
    """
    terms = spec.covariate_terms(data.covariate_names)
    centers = weighted_period_centers(data, scheme, terms)
    d = build_design(data, spec, centering=centers)
    scale = column_scale(d.X)
    sw = np.sqrt(scheme.row)
    Xw = d.X / scale * sw[:, None]
    coef, _, rank, _ = np.linalg.lstsq(Xw, data.outcome * sw, rcond=None)
    if rank < d.n_columns:
        raise RankDeficientDesign(int(rank), d.n_columns)
    beta = coef / scale
    return FittedModel(spec, beta, d.names, d.treat_periods, data.n_periods, {},
                       {"iterations": 1, "converged": True, "scheme": scheme.kind.value},
                       centering=centers)


def ancova_mu(model: FittedModel, scheme, z, periods=None):
    """Coefficient-based ANCOVA estimator of mu(z): weighted average of
    beta_j + z tau_j over rollout periods."""
    J = model.n_periods
    periods = np.arange(2, J) if periods is None else np.asarray(periods)
    wj = scheme.period[periods - 1]
    vals = []
    for j in periods:
        v = model.coefficient(f"period[{j}]")
        if z == 1:
            v += model.coefficient(f"treat[{j}]")
        vals.append(v)
    return float(np.dot(wj, vals) / wj.sum())
