"""Binomial GLMMs with random cluster and cluster-period intercepts,
fitted by maximizing the Laplace approximation to the marginal likelihood.

Per cluster the random-effect vector is u_i = (alpha_i, gamma_i1..gamma_iJ)
(or a subset when a component is absent).  Observation k in period j loads
on u_i through the pattern row z_j, so all per-cluster q x q systems are
assembled from cell sums.  The modes are found by Newton iterations run for
all clusters at once; the outer problem over (beta, log variances) uses an
analytic gradient that accounts for the dependence of the modes on the
parameters.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import expit

from ..errors import InnerNewtonDivergence, OptimizerNonConvergence, RankDeficientDesign
from .base import FittedModel
from .design import build_design, column_scale
from .gee import irls
from .spec import WorkingModelSpec

LOG_VAR_BOUNDS = (-18.0, 7.0)
INNER_TOL = 1e-10
INNER_MAX_ITER = 50
GRAD_TOL = 1e-6
MAX_ITER = 500
# objective reported outside the log-link domain; finite so line searches backtrack
INFEASIBLE = 1e20
LOG_EDGE = -1e-3


def family_terms(y, eta, link):
    """Log-likelihood and its first three eta-derivatives (d2, d3 signed as
    the weight and the weight's derivative)."""
    if link == "logit":
        mu = expit(eta)
        ll = y * eta - np.logaddexp(0.0, eta)
        d1 = y - mu
        d2 = mu * (1 - mu)
        d3 = d2 * (1 - 2 * mu)
        return ll, d1, d2, d3
    # log link.  Rows with y = 0 need eta < 0; past LOG_EDGE their
    # log(1 - e^eta) term is continued by its quadratic Taylor expansion so
    # the objective stays finite and smooth for the optimizer.
    zero = y < 1
    et = np.minimum(eta, LOG_EDGE)
    e = np.exp(et)
    om = 1.0 - e
    r = e / om
    over = zero & (eta > LOG_EDGE)
    dx = np.where(over, eta - LOG_EDGE, 0.0)
    c2 = r / om
    ll = y * eta + (1 - y) * (np.log(om) - r * dx - 0.5 * c2 * dx * dx)
    d1 = y - (1 - y) * (r + c2 * dx)
    d2 = (1 - y) * c2
    d3 = np.where(over, 0.0, (1 - y) * e * (1 + e) / om ** 3)
    return ll, d1, d2, d3


class LaplaceProblem:
    """Negative Laplace log-likelihood in (beta, log variance) coordinates."""

    def __init__(self, X, y, cluster, period, n_clusters, n_periods, link,
                 use_cluster=True, use_cluster_period=False):
        self.X, self.y, self.link = X, y, link
        self.I, self.J = n_clusters, n_periods
        self.cluster = cluster
        self.cell = cluster * n_periods + (period - 1)
        self.n, self.p = X.shape
        J = n_periods
        pats, types = [], []
        if use_cluster:
            pats.append(np.ones((J, 1)))
            types.append(0)
        if use_cluster_period:
            pats.append(np.eye(J))
            types.extend([1] * J)
        self.Zpat = np.hstack(pats) if pats else np.zeros((J, 0))
        self.types = np.array(types, dtype=int)
        self.q = self.Zpat.shape[1]
        self.free = [t for t, on in ((0, use_cluster), (1, use_cluster_period)) if on]
        self.dim = self.p + len(self.free)
        C = self.I * self.J
        self.cellmat = sp.csr_matrix((np.ones(self.n), (self.cell, np.arange(self.n))),
                                     shape=(C, self.n))
        self.u = np.zeros((self.I, self.q))

    # helpers ---------------------------------------------------------------
    def split(self, theta):
        beta = theta[:self.p]
        phi_free = theta[self.p:]
        logvar = np.zeros(self.q)
        for t, ph in zip(self.free, phi_free):
            logvar[self.types == t] = ph
        return beta, phi_free, logvar

    def _cellsum(self, v):
        return np.bincount(self.cell, weights=v, minlength=self.I * self.J).reshape(self.I, self.J)

    def _eta(self, eta0, u):
        return eta0 + (u @ self.Zpat.T).ravel()[self.cell]

    def _cluster_obj(self, ll, u, dinv):
        return np.bincount(self.cluster, weights=ll, minlength=self.I) - 0.5 * (dinv * u * u).sum(axis=1)

    def modes(self, eta0, dinv, u0):
        """Newton iterations for the random-effect modes, vectorized over clusters."""
        Zp = self.Zpat
        u = u0.copy()
        ll = family_terms(self.y, self._eta(eta0, u), self.link)[0]
        obj = self._cluster_obj(ll, u, dinv)
        if not np.isfinite(obj).all():
            u = np.zeros_like(u)
            ll = family_terms(self.y, self._eta(eta0, u), self.link)[0]
            obj = self._cluster_obj(ll, u, dinv)
        for _ in range(INNER_MAX_ITER):
            _, d1, d2, _ = family_terms(self.y, self._eta(eta0, u), self.link)
            grad = self._cellsum(d1) @ Zp - dinv * u
            H = np.einsum("ij,ja,jb->iab", self._cellsum(d2), Zp, Zp) + np.diag(dinv)
            step = np.linalg.solve(H, grad[..., None])[..., 0]
            t = np.ones(self.I)
            new_u = u + step
            ll = family_terms(self.y, self._eta(eta0, new_u), self.link)[0]
            new_obj = self._cluster_obj(ll, new_u, dinv)
            for _ in range(40):
                bad = ~(new_obj >= obj - 1e-12 * np.abs(obj))
                if not bad.any():
                    break
                t[bad] /= 2
                new_u = u + t[:, None] * step
                ll = family_terms(self.y, self._eta(eta0, new_u), self.link)[0]
                new_obj = self._cluster_obj(ll, new_u, dinv)
            size = np.max(np.abs(t[:, None] * step), axis=1)
            u, obj = new_u, new_obj
            if np.max(size, initial=0.0) < INNER_TOL:
                return u
        worst = int(np.argmax(size))
        raise InnerNewtonDivergence(worst)

    # objective -------------------------------------------------------------
    def value_and_grad(self, theta):
        beta, phi_free, logvar = self.split(theta)
        X, y = self.X, self.y
        eta0 = X @ beta
        if self.q == 0:
            ll, d1, _, _ = family_terms(y, eta0, self.link)
            f = -ll.sum()
            if not np.isfinite(f):
                return INFEASIBLE, np.zeros(self.dim)
            return f, -(X.T @ d1)
        dinv = np.exp(-logvar)
        try:
            u = self.modes(eta0, dinv, self.u)
        except InnerNewtonDivergence:
            return INFEASIBLE, np.zeros(self.dim)
        self.u = u
        Zp = self.Zpat
        ll, d1, d2, d3 = family_terms(y, self._eta(eta0, u), self.link)
        Wc = self._cellsum(d2)
        H = np.einsum("ij,ja,jb->iab", Wc, Zp, Zp) + np.diag(dinv)
        Hinv = np.linalg.inv(H)
        _, logdetH = np.linalg.slogdet(H)
        f = -ll.sum() + 0.5 * (dinv * u * u).sum() + 0.5 * self.I * logvar.sum() + 0.5 * logdetH.sum()
        if not np.isfinite(f):
            return INFEASIBLE, np.zeros(self.dim)

        lev = np.einsum("ja,iab,jb->ij", Zp, Hinv, Zp)
        Lz = (lev * self._cellsum(d3)) @ Zp
        D2X = np.asarray(self.cellmat @ (d2[:, None] * X)).reshape(self.I, self.J, self.p)
        ZWX = np.einsum("ja,ijp->iap", Zp, D2X)
        dudb = -Hinv @ ZWX
        gb = -(X.T @ d1) + 0.5 * (X.T @ (d3 * lev.ravel()[self.cell])
                                  + np.einsum("iap,ia->p", dudb, Lz))
        gphi = []
        for t in self.free:
            mask = (self.types == t).astype(float)
            env = -0.5 * (mask * dinv * u * u).sum() + 0.5 * self.I * mask.sum()
            tr = -(np.einsum("iaa->ia", Hinv) * (mask * dinv)).sum()
            dudphi = np.einsum("iab,ib->ia", Hinv, mask * dinv * u)
            gphi.append(env + 0.5 * (tr + (Lz * dudphi).sum()))
        return f, np.concatenate([gb, gphi])

    def value(self, theta):
        return self.value_and_grad(theta)[0]


def _projected(theta, grad, bounds):
    g = grad.copy()
    for k, (lo, hi) in enumerate(bounds):
        if lo is not None and theta[k] <= lo + 1e-9 and g[k] > 0:
            g[k] = 0.0
        if hi is not None and theta[k] >= hi - 1e-9 and g[k] < 0:
            g[k] = 0.0
    return g


def laplace_problem(data, spec: WorkingModelSpec, design=None):
    d = design or build_design(data, spec)
    scale = column_scale(d.X)
    nested = spec.random_effects == "cluster_plus_cluster_period"
    prob = LaplaceProblem(d.X / scale, data.outcome, data.cluster, data.period,
                          data.n_clusters, data.n_periods, spec.link,
                          use_cluster="cluster" not in spec.pinned,
                          use_cluster_period=nested and "cluster_period" not in spec.pinned)
    return prob, d, scale


def fit_glmm_laplace(data, spec: WorkingModelSpec, start=None, design=None) -> FittedModel:
    """Laplace-approximate maximum likelihood for a binomial GLMM.

    Args:
        start: optional (beta, log variances) vector on the internal scale
            (warm start, e.g. from a previous fit's ``convergence['theta']``).
    """
    prob, d, scale = laplace_problem(data, spec, design)
    if np.linalg.matrix_rank(prob.X) < prob.p:
        raise RankDeficientDesign(int(np.linalg.matrix_rank(prob.X)), prob.p)
    if start is None or len(start) != prob.dim:
        beta0, _ = irls(prob.X, data.outcome, spec.link)
        theta0 = np.concatenate([beta0, np.full(len(prob.free), np.log(0.2))])
    else:
        theta0 = np.asarray(start, dtype=float)
    bounds = [(None, None)] * prob.p + [LOG_VAR_BOUNDS] * len(prob.free)
    if spec.link == "log":
        beta0 = theta0[:prob.p]
        if np.max(prob.X @ beta0) >= 0:
            theta0[:prob.p], _ = irls(prob.X, data.outcome, "log")
    res = minimize(prob.value_and_grad, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": MAX_ITER, "gtol": 1e-9, "ftol": 1e-15, "maxcor": 20})
    theta = res.x
    f, g = prob.value_and_grad(theta)
    gnorm = float(np.max(np.abs(_projected(theta, g, bounds))))
    if not f < INFEASIBLE or gnorm > GRAD_TOL * max(1.0, abs(f)):
        raise OptimizerNonConvergence(MAX_ITER, f"(gradient {gnorm:.3g})")
    beta, phi_free, _ = prob.split(theta)
    nested = spec.random_effects == "cluster_plus_cluster_period"
    vc = {"cluster": 0.0}
    if nested:
        vc["cluster_period"] = 0.0
    boundary = [k for k in vc if k in spec.pinned]
    for t, ph in zip(prob.free, phi_free):
        key = "cluster" if t == 0 else "cluster_period"
        if ph <= LOG_VAR_BOUNDS[0] + 1e-6:
            boundary.append(key)
        else:
            vc[key] = float(np.exp(ph))
    conv = {"iterations": int(res.nit), "converged": True, "objective": float(f),
            "gradient_norm": gnorm, "theta": [float(x) for x in theta]}
    return FittedModel(spec, beta / scale, d.names, d.treat_periods, data.n_periods, vc, conv,
                       boundary=tuple(boundary))
