"""Linear mixed models with cluster and cluster-period random intercepts,
fitted by restricted maximum likelihood.

The cluster covariance is sigma^2 * H_i with
    H_i = I + b * blockdiag_c(1 1') + a * 1 1'
(a = tau_alpha^2 / sigma^2, b = tau_gamma^2 / sigma^2).  Its inverse and
determinant have closed forms, so everything is computed from per-cell sums
of [X, y] and their cross products; the cost does not grow with cell size.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from scipy.optimize import minimize

from ..errors import OptimizerNonConvergence, RankDeficientDesign
from .base import FittedModel
from .design import build_design, cell_moments, column_scale
from .spec import WorkingModelSpec

LOG_BOUNDS = (-25.0, 15.0)
BOUNDARY_VALUE = 1e-10
GRAD_TOL = 1e-6
MAX_ITER = 500


class RemlProblem:
    """Profiled REML deviance as a function of log variance ratios.

    Args:
        moments: CellMoments of [X, y] (X already scaled as desired).
        use_cluster, use_cluster_period: which ratios are free.
    """

    def __init__(self, moments, use_cluster=True, use_cluster_period=False):
        self.S = moments.S
        self.G = moments.G
        self.n = moments.counts.astype(float)
        self.Gt = moments.total
        self.P = self.S.shape[-1]
        self.p = self.P - 1
        self.N = float(self.n.sum())
        self.use_a = use_cluster
        self.use_b = use_cluster_period
        self.dim = int(use_cluster) + int(use_cluster_period)
        self._SS = None

    def ratios(self, phi):
        phi = np.atleast_1d(phi)
        k = 0
        a = b = 0.0
        if self.use_a:
            a = float(np.exp(phi[k]))
            k += 1
        if self.use_b:
            b = float(np.exp(phi[k]))
        return a, b

    def _parts(self, a, b):
        S, n = self.S, self.n
        p = self.p
        w = 1.0 / (1.0 + n * b)
        Q = self.Gt.copy()
        if b > 0:
            Q -= np.einsum("ij,ija,ijb->ab", b * w, S, S)
        m = (n * w).sum(axis=1)
        k = a / (1.0 + a * m)
        T = np.einsum("ij,ija->ia", w, S)
        if a > 0:
            Q -= np.einsum("i,ia,ib->ab", k, T, T)
        A = Q[:p, :p]
        c = Q[:p, p]
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise RankDeficientDesign(int(np.linalg.matrix_rank(A)), p)
        beta = np.linalg.solve(L.T, np.linalg.solve(L, c))
        rss = Q[p, p] - c @ beta
        logdet_A = 2 * np.log(np.diag(L)).sum()
        logdet_H = np.log1p(n * b).sum() + np.log1p(a * m).sum()
        return dict(w=w, m=m, k=k, T=T, A=A, L=L, beta=beta, rss=rss,
                    logdet_A=logdet_A, logdet_H=logdet_H)

    def deviance(self, phi):
        a, b = self.ratios(phi)
        q = self._parts(a, b)
        nu = self.N - self.p
        rss = max(q["rss"], 1e-300)
        return q["logdet_H"] + q["logdet_A"] + nu * (np.log(2 * np.pi * rss / nu) + 1)

    def deviance_and_gradient(self, phi):
        a, b = self.ratios(phi)
        q = self._parts(a, b)
        p = self.p
        nu = self.N - p
        rss = max(q["rss"], 1e-300)
        dev = q["logdet_H"] + q["logdet_A"] + nu * (np.log(2 * np.pi * rss / nu) + 1)
        Ainv = np.linalg.inv(q["A"])
        beta, w, m, k, T = q["beta"], q["w"], q["m"], q["k"], q["T"]
        R = T[:, p] - T[:, :p] @ beta
        grad = []
        if self.use_a:
            den = 1.0 + a * m
            v = T[:, :p] / den[:, None]
            quad = np.einsum("ia,ab,ib->", v, Ainv, v)
            g = a * ((m / den).sum() - quad) - nu / rss * a * ((R / den) ** 2).sum()
            grad.append(g)
        if self.use_b:
            S, n = self.S, self.n
            kn = k[:, None] * n
            h = w * n * (1.0 - kn * w)
            vc = w[..., None] * (S[..., :p] - kn[..., None] * T[:, None, :p])
            quad = np.einsum("ija,ab,ijb->", vc, Ainv, vc)
            rc = S[..., p] - S[..., :p] @ beta
            rho = w * (rc - kn * R[:, None])
            g = b * (h.sum() - quad) - nu / rss * b * (rho ** 2).sum()
            grad.append(g)
        return dev, np.array(grad)

    def gls(self, a, b):
        q = self._parts(a, b)
        return q["beta"], q["rss"] / (self.N - self.p)


def _projected_grad(phi, grad, bounds):
    g = grad.copy()
    lo, hi = bounds
    g[(phi <= lo + 1e-9) & (g > 0)] = 0.0
    g[(phi >= hi - 1e-9) & (g < 0)] = 0.0
    return g


def optimize_reml(problem: RemlProblem, start=None):
    """Simplex start followed by L-BFGS-B polish on log variance ratios."""
    d = problem.dim
    x0 = np.full(d, np.log(0.05)) if start is None else np.clip(start, *LOG_BOUNDS)
    bounds = [LOG_BOUNDS] * d
    nm = minimize(problem.deviance, x0, method="Nelder-Mead", bounds=bounds,
                  options={"maxfev": 40 * d, "xatol": 1e-2, "fatol": 1e-6})
    res = minimize(problem.deviance_and_gradient, nm.x, jac=True, method="L-BFGS-B",
                   bounds=bounds, options={"maxiter": MAX_ITER, "gtol": 1e-10, "ftol": 1e-15})
    phi = res.x
    dev, grad = problem.deviance_and_gradient(phi)
    pg = _projected_grad(phi, grad, LOG_BOUNDS)
    gnorm = float(np.max(np.abs(pg))) if d else 0.0
    if gnorm > GRAD_TOL * max(1.0, abs(dev)):
        raise OptimizerNonConvergence(MAX_ITER, f"(gradient {gnorm:.3g})")
    return phi, dev, gnorm, int(res.nit) + int(nm.nit)


def fit_lmm(data, spec: WorkingModelSpec, variance_components=None, start=None,
            design=None) -> FittedModel:
    """REML fit of a gaussian linear mixed model.

    Args:
        variance_components: optional (tau_alpha^2, tau_gamma^2, sigma^2) to
            hold fixed; the fixed effects are then the GLS solution.
        start: optional starting log ratios (warm start).
    """
    d = design or build_design(data, spec)
    scale = column_scale(d.X)
    ds = replace(d, X=d.X / scale)
    mom = cell_moments(data, ds)
    nested = spec.random_effects == "cluster_plus_cluster_period"
    use_a = "cluster" not in spec.pinned
    use_b = nested and "cluster_period" not in spec.pinned
    prob = RemlProblem(mom, use_a, use_b)
    names = d.names
    p = prob.p
    vc_names = ["cluster"] + (["cluster_period"] if nested else [])

    if variance_components is not None:
        ta, tg, s2 = variance_components
        beta, _ = prob.gls(ta / s2, tg / s2)
        vc = {"cluster": ta, "residual": s2}
        if nested:
            vc["cluster_period"] = tg
        return FittedModel(spec, beta / scale, names, d.treat_periods, data.n_periods, vc,
                           {"iterations": 0, "converged": True, "fixed_variance": True})

    # degenerate outcome: no residual variation at all
    beta0, s0 = prob.gls(0.0, 0.0)
    if s0 * (prob.N - p) <= 1e-20 * max(1.0, prob.Gt[p, p]):
        vc = {k: 0.0 for k in vc_names}
        vc["residual"] = 0.0
        return FittedModel(spec, beta0 / scale, names, d.treat_periods, data.n_periods, vc,
                           {"iterations": 0, "converged": True, "objective": None,
                            "gradient_norm": 0.0}, boundary=tuple(vc_names))

    if prob.dim:
        phi, dev, gnorm, nit = optimize_reml(prob, start)
    else:
        phi, dev, gnorm, nit = np.empty(0), prob.deviance(np.empty(0)), 0.0, 0
    a, b = prob.ratios(phi)
    beta, s2 = prob.gls(a, b)
    vc = {"cluster": a * s2, "residual": s2}
    if nested:
        vc["cluster_period"] = b * s2
    boundary = []
    for key in vc_names:
        if vc[key] < BOUNDARY_VALUE:
            vc[key] = 0.0
            boundary.append(key)
    conv = {"iterations": nit, "converged": True, "objective": float(dev),
            "gradient_norm": gnorm, "log_ratios": [float(x) for x in phi]}
    return FittedModel(spec, beta / scale, names, d.treat_periods, data.n_periods, vc, conv,
                       boundary=tuple(boundary))


def reml_problem(data, spec: WorkingModelSpec) -> RemlProblem:
    """The REML objective used by ``fit_lmm`` (exposed for diagnostics)."""
    d = build_design(data, spec)
    ds = replace(d, X=d.X / column_scale(d.X))
    nested = spec.random_effects == "cluster_plus_cluster_period"
    return RemlProblem(cell_moments(data, ds), "cluster" not in spec.pinned,
                       nested and "cluster_period" not in spec.pinned)
