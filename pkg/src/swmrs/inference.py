"""Leave-one-cluster-out jackknife inference and informative-cluster-size tests."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc, betaincinv

from .data import TrialDataset, derive_layout
from .errors import EmptyArmInPeriod, LocoDegenerate, NoRolloutPeriod, SingularContrastCovariance
from .estimands import ALL_KINDS, ContrastScale, EstimandKind
from .standardization import Method, evaluate, parse_method

LOCO_POLICIES = ("error", "drop-period", "drop-replicate")
DEGENERATE_TOL = 1e-12
MAX_CONDITION = 1e12

# rows of the global contrast: h-iATE - h-cATE, v-iATE - v-cATE, h-iATE - v-iATE
GLOBAL_CONTRAST = np.array([[1.0, -1.0, 0.0, 0.0],
                            [0.0, 0.0, 1.0, -1.0],
                            [1.0, 0.0, -1.0, 0.0]])


# distributions ----------------------------------------------------------------

def t_sf_two_sided(t, df):
    """P(|T| >= |t|) for Student t with ``df`` degrees of freedom."""
    t = np.asarray(t, dtype=float)
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_quantile(q, df):
    """Upper quantile: returns x with P(T <= x) = q, for q >= 0.5."""
    x = betaincinv(df / 2.0, 0.5, 2.0 * (1.0 - q))
    return float(np.sqrt(df * (1.0 / x - 1.0)))


def f_sf(f, d1, d2):
    """P(F >= f) for the F(d1, d2) distribution."""
    f = np.asarray(f, dtype=float)
    return np.where(f <= 0, 1.0, betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * np.maximum(f, 0))))


def resolve_threads(threads=None):
    if threads is None:
        threads = os.environ.get("SWMRS_THREADS", 1)
    return max(1, int(threads))


# replicates ---------------------------------------------------------------------

def jackknife_variance(replicates):
    """((n-1)/n) * sum_g (r_g - rbar)(r_g - rbar)' over the first axis.

    A 1-d input gives a scalar variance, a 2-d input a covariance matrix.
    """
    r = np.asarray(replicates, dtype=float)
    n = r.shape[0]
    dev = r - r.mean(axis=0)
    if r.ndim == 1:
        return float((n - 1) / n * (dev @ dev))
    return (n - 1) / n * dev.T @ dev


@dataclass
class JackknifeReplicates:
    """Full-sample and leave-one-out estimates.

    ``full`` is (methods, kinds, 3) and ``loco`` is (I, methods, kinds, 3)
    with columns mu1, mu0, psi(tau).  ``valid[g]`` is False when replicate g
    was dropped; ``dropped_periods[g]`` lists periods excluded from it.
    """

    methods: list
    kinds: list
    scale: ContrastScale
    full: np.ndarray
    loco: np.ndarray
    valid: np.ndarray
    cluster_labels: tuple
    dropped_periods: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)

    @property
    def n_clusters(self):
        return len(self.cluster_labels)

    def method_index(self, method):
        if isinstance(method, int):
            return method
        return [m.name for m in self.methods].index(parse_method(method).name)

    def column(self, a, b, c=2):
        return self.loco[self.valid, a, b, c]

    def to_frame(self):
        import pandas as pd
        rows = []
        for g, lab in enumerate(self.cluster_labels):
            for a, m in enumerate(self.methods):
                for b, k in enumerate(self.kinds):
                    mu1, mu0, t = self.loco[g, a, b]
                    rows.append({"left_out": lab, "method": m.name, "estimand": k.value,
                                 "mu1": mu1, "mu0": mu0, "psi_tau": t,
                                 "used": bool(self.valid[g])})
        return pd.DataFrame(rows)


def _degenerate_periods(data):
    layout = derive_layout(data, require_rollout=False)
    e = layout.propensity
    return [j for j in range(2, data.n_periods) if e[j - 1] <= 0 or e[j - 1] >= 1]


def loco_replicates(data: TrialDataset, methods, scale="rd", kinds=ALL_KINDS,
                    policy="error", threads=None) -> JackknifeReplicates:
    """Refit every method without each cluster in turn.

    Weights (including the VIATE period means) are recomputed on each reduced
    sample.  Working-model fits on the full sample seed the optimizers of the
    leave-one-out fits.
    """
    if policy not in LOCO_POLICIES:
        raise ValueError(f"loco policy must be one of {LOCO_POLICIES}")
    scale = ContrastScale.parse(scale)
    methods = [parse_method(m) for m in methods]
    kinds = [EstimandKind.parse(k) for k in kinds]
    full = evaluate(data, methods, scale, kinds)
    I = data.n_clusters
    loco = np.full((I, len(methods), len(kinds), 3), np.nan)
    valid = np.ones(I, dtype=bool)
    dropped = {}

    def one(g):
        sub = data.drop_cluster(g)
        bad = _degenerate_periods(sub)
        periods = None
        while True:
            try:
                if bad:
                    if policy == "error":
                        raise LocoDegenerate(data.cluster_labels[g], bad[0])
                    if policy == "drop-replicate":
                        return g, None, bad
                    periods = [j for j in range(2, data.n_periods) if j not in bad]
                    if not periods:
                        return g, None, bad
                return g, evaluate(sub, methods, scale, kinds, periods=periods,
                                   warm=full.fits).values, bad
            except (EmptyArmInPeriod, NoRolloutPeriod) as exc:
                j = exc.context.get("period")
                if j in bad or j is None:
                    raise
                bad = sorted(bad + [j])

    threads = resolve_threads(threads)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(I)))
    else:
        results = [one(g) for g in range(I)]
    for g, vals, bad in results:
        if vals is None:
            valid[g] = False
        else:
            loco[g] = vals
        if bad:
            dropped[g] = bad
    return JackknifeReplicates(methods, kinds, scale, full.values, loco, valid,
                               data.cluster_labels, dropped, full.fits)


# summaries ------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimateResult:
    """Point estimate with jackknife standard error and t-based interval.

    ``estimate`` and ``ci`` are on the contrast scale; ``psi_estimate``,
    ``se`` and ``psi_ci`` on the reporting-transform scale.
    """

    kind: EstimandKind
    method: str
    scale: ContrastScale
    estimate: float
    psi_estimate: float
    se: float
    ci: tuple
    psi_ci: tuple
    df: int
    mu1: float
    mu0: float
    sigma: np.ndarray | None
    n_replicates: int

    def to_dict(self):
        return {
            "estimand": self.kind.value, "method": self.method, "scale": self.scale.kind.value,
            "estimate": self.estimate, "psi_estimate": self.psi_estimate, "se": self.se,
            "ci_lower": self.ci[0], "ci_upper": self.ci[1],
            "psi_ci_lower": self.psi_ci[0], "psi_ci_upper": self.psi_ci[1],
            "df": self.df, "mu1": self.mu1, "mu0": self.mu0,
            "sigma": None if self.sigma is None else self.sigma.tolist(),
            "n_replicates": self.n_replicates,
        }


def summarize(reps: JackknifeReplicates, level=0.95):
    """EstimateResult for every (method, kind) in ``reps``."""
    df = reps.n_clusters - 1
    q = t_quantile(0.5 + level / 2, df)
    out = []
    for a, m in enumerate(reps.methods):
        for b, k in enumerate(reps.kinds):
            mu1, mu0, psi = reps.full[a, b]
            r = reps.loco[reps.valid, a, b]
            se = float(np.sqrt(max(jackknife_variance(r[:, 2]), 0.0)))
            sigma = None
            if not np.isnan(mu1):
                sigma = jackknife_variance(r[:, :2])
            lo, hi = psi - q * se, psi + q * se
            sc = reps.scale
            out.append(EstimateResult(
                k, m.name, sc, float(sc.psi_inverse(psi)), float(psi), se,
                (float(sc.psi_inverse(lo)), float(sc.psi_inverse(hi))), (float(lo), float(hi)),
                df, float(mu1), float(mu0), sigma, int(reps.valid.sum())))
    return out


def jackknife(data: TrialDataset, scheme, model_spec=None, scale="rd", policy="error",
              method=None, threads=None) -> EstimateResult:
    """Jackknife inference for one estimand.

    With ``model_spec`` None the unadjusted estimator is used; otherwise the
    augmented estimator with that working model (or ``method`` when given).
    """
    if method is None:
        method = Method("unadj", None, "unadj") if model_spec is None else \
            Method("mrs", model_spec, "mrs")
    reps = loco_replicates(data, [method], scale, [scheme], policy, threads)
    return summarize(reps)[0]


# informative cluster size tests ----------------------------------------------------

@dataclass(frozen=True)
class IcsTestResult:
    kind: str
    statistic: float
    df_num: int
    df_den: int
    p_value: float
    estimates: np.ndarray
    covariance: np.ndarray

    def to_dict(self):
        return {"test": self.kind, "statistic": self.statistic, "df_num": self.df_num,
                "df_den": self.df_den, "p_value": self.p_value,
                "estimates": self.estimates.tolist(), "covariance": np.atleast_2d(self.covariance).tolist()}


PAIRS = {"H": (EstimandKind.HIATE, EstimandKind.HCATE),
         "V": (EstimandKind.VIATE, EstimandKind.VCATE)}


def pairwise_test_from_replicates(reps: JackknifeReplicates, pair, method=0) -> IcsTestResult:
    pair = pair.upper()[0]
    a = reps.method_index(method)
    ki, kc = (reps.kinds.index(k) for k in PAIRS[pair])
    est = reps.full[a, [ki, kc], 2]
    diff = est[0] - est[1]
    r = reps.loco[reps.valid, a]
    D = r[:, ki, 2] - r[:, kc, 2]
    vd = jackknife_variance(D)
    df = reps.n_clusters - 1
    if abs(diff) < DEGENERATE_TOL and vd < DEGENERATE_TOL:
        stat, p = 0.0, 1.0
    elif vd <= 0:
        stat, p = float(np.sign(diff) * np.inf), 0.0
    else:
        stat = float(diff / np.sqrt(vd))
        p = float(t_sf_two_sided(stat, df))
    return IcsTestResult(f"{pair}_PAIR", stat, 1, df, p, est, np.array([[vd]]))


def global_test_statistic(tau, cov, df_den):
    """F statistic and p-value of the three-contrast test for given estimates."""
    tau = np.asarray(tau, dtype=float)
    c = GLOBAL_CONTRAST @ tau
    if np.max(np.abs(c)) < DEGENERATE_TOL:
        return 0.0, 1.0
    M = GLOBAL_CONTRAST @ cov @ GLOBAL_CONTRAST.T
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularContrastCovariance(float(cond))
    F = float(c @ np.linalg.solve(M, c) / 3.0)
    return F, float(f_sf(F, 3, df_den))


def global_test_from_replicates(reps: JackknifeReplicates, method=0) -> IcsTestResult:
    a = reps.method_index(method)
    idx = [reps.kinds.index(k) for k in ALL_KINDS]
    tau = reps.full[a, idx, 2]
    V = jackknife_variance(reps.loco[reps.valid][:, a, idx, 2])
    df = reps.n_clusters - 1
    F, p = global_test_statistic(tau, V, df)
    return IcsTestResult("GLOBAL", F, 3, df, p, tau, V)


def _ics_method(model_spec):
    return Method("unadj", None, "unadj") if model_spec is None else Method("mrs", model_spec, "mrs")


def pairwise_ics_test(data, model_spec, pair, scale="rd", policy="error", threads=None):
    reps = loco_replicates(data, [_ics_method(model_spec)], scale, PAIRS[pair.upper()[0]],
                           policy, threads)
    return pairwise_test_from_replicates(reps, pair)


def global_ics_test(data, model_spec, scale="rd", policy="error", threads=None):
    reps = loco_replicates(data, [_ics_method(model_spec)], scale, ALL_KINDS, policy, threads)
    return global_test_from_replicates(reps)
