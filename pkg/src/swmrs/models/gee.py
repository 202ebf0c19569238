"""Independence GEE fitted by iteratively reweighted least squares."""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import IRLSNonConvergence, RankDeficientDesign, SeparationDetected
from .base import FittedModel
from .design import build_design, column_scale
from .spec import WorkingModelSpec

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
SEPARATION_EPS = 1e-10


def _lstsq(X, y):
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        raise RankDeficientDesign(int(rank), X.shape[1])
    return coef


def _check_separation(data, mu):
    J = data.n_periods
    extreme = (mu < SEPARATION_EPS) | (mu > 1 - SEPARATION_EPS)
    key = (data.period - 1) * 2 + data.treatment
    n = np.bincount(key, minlength=2 * J)
    k = np.bincount(key, weights=extreme, minlength=2 * J)
    bad = (n > 0) & (k == n)
    if bad.any():
        g = int(np.flatnonzero(bad)[0])
        raise SeparationDetected(g // 2 + 1, g % 2)


def irls(X, y, link, beta0=None, data=None, tol=IRLS_TOL, max_iter=IRLS_MAX_ITER):
    """Binomial IRLS for logit or log link.

    Returns (beta, iterations).  With ``data`` supplied, degenerate fitted
    probabilities over a whole period-arm group raise SeparationDetected.
    """
    p = X.shape[1]
    if beta0 is None:
        ybar = np.clip(y.mean(), 0.01, 0.99)
        start = np.log(ybar / (1 - ybar)) if link == "logit" else np.log(ybar)
        beta = _lstsq(X, np.full(len(y), start))
    else:
        beta = np.asarray(beta0, dtype=float)
    eta = X @ beta
    for it in range(1, max_iter + 1):
        if link == "logit":
            mu = expit(eta)
            w = mu * (1 - mu)
            work = eta + (y - mu) / np.maximum(w, 1e-300)
        else:
            mu = np.exp(eta)
            w = mu / np.maximum(1 - mu, 1e-300)
            work = eta + (y - mu) / mu
        sw = np.sqrt(w)
        new = np.linalg.lstsq(X * sw[:, None], work * sw, rcond=None)[0]
        if link == "log":
            # keep fitted probabilities below one
            step = new - beta
            for _ in range(60):
                if np.max(X @ (beta + step)) < 0:
                    break
                step /= 2
            new = beta + step
        change = np.max(np.abs(new - beta))
        beta = new
        eta = X @ beta
        if data is not None:
            mu = expit(eta) if link == "logit" else np.exp(eta)
            _check_separation(data, mu)
        if change <= tol * (1 + np.max(np.abs(beta))):
            return beta, it
    raise IRLSNonConvergence(max_iter)


def fit_gee_independence(data, spec: WorkingModelSpec, design=None) -> FittedModel:
    """Independence-working-correlation GEE.

    Gaussian/identity is solved directly as ordinary least squares; binomial
    models use IRLS on column-scaled designs.
    """
    d = design or build_design(data, spec)
    scale = column_scale(d.X)
    Xs = d.X / scale
    y = data.outcome
    if spec.family == "gaussian":
        coef = _lstsq(Xs, y)
        beta = coef / scale
        resid = y - d.X @ beta
        dof = max(len(y) - d.n_columns, 1)
        vc = {"residual": float(resid @ resid / dof)}
        conv = {"iterations": 1, "converged": True}
    else:
        if np.linalg.matrix_rank(Xs) < Xs.shape[1]:
            raise RankDeficientDesign(int(np.linalg.matrix_rank(Xs)), Xs.shape[1])
        coef, it = irls(Xs, y, spec.link, data=data)
        beta = coef / scale
        vc = {}
        conv = {"iterations": it, "converged": True}
    return FittedModel(spec, beta, d.names, d.treat_periods, data.n_periods, vc, conv)
