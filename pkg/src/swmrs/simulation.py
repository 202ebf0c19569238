"""Scenario data-generating processes, super-population truths and the
Monte Carlo evaluation harness."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
import pandas as pd
from scipy.special import expit

from .data import TrialDataset
from .errors import SwmrsError
from .estimands import ALL_KINDS, ContrastScale, EstimandKind
from .inference import loco_replicates, resolve_threads, summarize
from .standardization import Method, evaluate, parse_method

log = logging.getLogger(__name__)

CONTINUOUS = ("C1", "C2", "C3", "KC")
BINARY = ("B1", "B2", "B3", "KB")
SCENARIOS = CONTINUOUS + BINARY


@dataclass(frozen=True)
class ScenarioConfig:
    """Simulation settings.

    ``KC`` and ``KB`` are the informative-size dial variants (continuous and
    binary); ``delta`` scales their size-dependent effect term and is added
    to any other scenario as well.  ``x2_var`` defaults to 0.1 for continuous
    and 0.01 for binary scenarios.
    """

    scenario: str = "C1"
    n_clusters: int = 30
    n_periods: int | None = None
    seed: int = 2024
    replicates: int = 200
    delta: float = 0.0
    truth_clusters: int = 100_000
    x2_var: float | None = None

    def __post_init__(self):
        s = str(self.scenario).upper()
        if s not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        object.__setattr__(self, "scenario", s)
        if self.n_periods is None:
            object.__setattr__(self, "n_periods", 6 if s in CONTINUOUS else 4)
        if self.x2_var is None:
            object.__setattr__(self, "x2_var", 0.1 if s in CONTINUOUS else 0.01)
        if self.n_periods < 3:
            raise ValueError("n_periods must be at least 3")

    @property
    def binary(self):
        return self.scenario in BINARY

    @property
    def scale(self):
        return "or" if self.binary else "rd"

    def to_dict(self):
        return asdict(self)


# design ------------------------------------------------------------------------

def _rng(seed, stream=0):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def randomize_rollout(n_clusters, n_periods, seed=0):
    """Adoption period (2..J) per cluster.

    Each step receives I // (J-1) clusters; the remainder goes one each to
    the earliest steps.  Clusters are assigned to steps by a random
    permutation.
    """
    steps = n_periods - 1
    counts = np.full(steps, n_clusters // steps)
    counts[: n_clusters % steps] += 1
    adoption = np.repeat(np.arange(2, n_periods + 1), counts)
    return _rng(seed).permutation(adoption)


def size_range(scenario, j):
    """Inclusive bounds of the discrete-uniform cluster-period size."""
    if scenario == "C3":
        return 10 + 10 * j, 90 + 10 * j
    if scenario == "B3":
        return 5 + 5 * j, 45 + 10 * j
    if scenario in CONTINUOUS:
        return 20, 100
    return 5, 50


def expected_size(scenario, j):
    lo, hi = size_range(scenario, j)
    return (lo + hi) / 2.0


def theta(scenario, x1, x2, n, j, n_periods, nbar, delta=0.0):
    """Individual treatment effect (log-odds scale for binary scenarios)."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    n = np.asarray(n, dtype=float)
    J = n_periods
    en = expected_size(scenario, j)
    size_term = np.log(n) * n ** 2 / en ** 2
    if scenario in ("C1", "KC"):
        t = 1 + np.sin(x1) + np.exp(-x2)
    elif scenario == "C2":
        t = 0.5 - np.sin(x1) - 1.5 * np.exp(-x2) + 4 * np.sqrt(n) / (5 * nbar) + 1.5 * size_term
    elif scenario == "C3":
        e1 = expected_size("C3", 1)
        t = (1 + j * np.sin(x1) - j ** 2 * np.exp(-x2) + np.sqrt(n) / nbar
             + 3 * np.log(n) * n ** 2 / e1 ** 2)
    elif scenario == "B1":
        t = 1 + 0.5 * np.sin(np.pi * x1) + np.log(1 + x1 + 2 * x2 ** 2)
    elif scenario == "B2":
        t = 1 + np.sin(np.pi * x1) + 0.5 * np.log(1 + x1 + x2 ** 2) + size_term
    elif scenario == "B3":
        t = (0.1 + j / (2 * J) * np.sin(np.pi * x1)
             + j ** 2 / J * np.log(1 + 0.5 * x1 + 0.2 * x2 ** 2) + 0.5 * size_term)
    elif scenario == "KB":
        t = 0.5 + 0.5 * np.sin(np.pi * x1) + np.log(1 + x1 / 3 + x2 ** 2)
    else:
        raise ValueError(scenario)
    if delta:
        t = t + delta * size_term
    return t


def baseline(binary, x1, x2, j, n_periods):
    """Control-arm linear predictor without random effects."""
    J = n_periods
    frac = (j - 1) / (J - 1)
    if binary:
        return 0.05 + 0.2 * frac + j * x1 + j / J * x2 ** 2
    return 0.25 + 0.02 * frac + 1.5 * j * x1 + j / J * x2 ** 2


def _variances(binary):
    # (cluster, cluster-period, residual)
    return (0.3, 0.3, 0.0) if binary else (0.05, 0.05, 0.9)


@dataclass
class _Population:
    """Individuals of a block of clusters with conditional arm means."""

    cluster: np.ndarray
    period: np.ndarray
    x: np.ndarray
    mean0: np.ndarray
    mean1: np.ndarray
    counts: np.ndarray


def _draw_population(config: ScenarioConfig, n_clusters, rng, periods=None):
    """Sizes, covariates and conditional means E[Y(a) | X, N, random effects]."""
    s, J = config.scenario, config.n_periods
    lo, hi = np.array([size_range(s, j) for j in range(1, J + 1)]).T
    N = rng.integers(lo, hi + 1, size=(n_clusters, J))
    va, vd, _ = _variances(config.binary)
    alpha = rng.normal(0, np.sqrt(va), n_clusters)
    dcell = rng.normal(0, np.sqrt(vd), (n_clusters, J))
    use = np.ones(J, dtype=bool) if periods is None else np.isin(np.arange(1, J + 1), periods)
    Nuse = np.where(use, N, 0)
    nrow = Nuse.ravel()
    cell = np.repeat(np.arange(n_clusters * J), nrow)
    cl, pe = cell // J, cell % J + 1
    m = cell.shape[0]
    x1 = (rng.random(m) < (0.1 if config.binary else 0.5)).astype(float)
    x2 = rng.normal(0, np.sqrt(config.x2_var), m)
    n_row = N.ravel()[cell]
    th = theta(s, x1, x2, n_row, pe, J, N.mean(), config.delta)
    eta0 = baseline(config.binary, x1, x2, pe, J) + alpha[cl] + dcell.ravel()[cell]
    eta1 = eta0 + th
    if config.binary:
        mean0, mean1 = expit(eta0), expit(eta1)
    else:
        mean0, mean1 = eta0, eta1
    return _Population(cl, pe, np.column_stack([x1, x2]), mean0, mean1, N)


def generate(config: ScenarioConfig, replicate=0) -> TrialDataset:
    """One simulated trial with both potential outcomes attached."""
    rng = _rng(config.seed, replicate)
    I, J = config.n_clusters, config.n_periods
    adoption = randomize_rollout(I, J, rng)
    pop = _draw_population(config, I, rng)
    if config.binary:
        u = rng.random(pop.cluster.shape[0])
        y0 = (u < pop.mean0).astype(float)
        y1 = (u < pop.mean1).astype(float)
    else:
        eps = rng.normal(0, np.sqrt(_variances(False)[2]), pop.cluster.shape[0])
        y0, y1 = pop.mean0 + eps, pop.mean1 + eps
    z = (pop.period >= adoption[pop.cluster]).astype(np.int8)
    y = np.where(z == 1, y1, y0)
    return TrialDataset.from_arrays(pop.cluster + 1, pop.period, z, y, pop.x, ("x1", "x2"),
                                    np.column_stack([y0, y1]))


def generate_continuous(config: ScenarioConfig, replicate=0) -> TrialDataset:
    if config.binary:
        raise ValueError(f"{config.scenario} is not a continuous scenario")
    return generate(config, replicate)


def generate_binary(config: ScenarioConfig, replicate=0) -> TrialDataset:
    if not config.binary:
        raise ValueError(f"{config.scenario} is not a binary scenario")
    return generate(config, replicate)


# truth ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TruthResult:
    """Super-population estimands on the reporting scale (log-OR for binary).

    ``values`` and ``se`` follow ALL_KINDS order.  ``hcate_cluster_mean`` is
    the cluster-level h-cATE that averages each cluster's rollout-period
    mean with equal cluster weight, reported for comparison.
    """

    values: np.ndarray
    se: np.ndarray
    mu: np.ndarray
    hcate_cluster_mean: float
    hcate_cluster_mean_se: float
    n_clusters: int

    def as_dict(self):
        return {k.value: float(v) for k, v in zip(ALL_KINDS, self.values)}


def _block_moments(pop: _Population, n_clusters, J):
    """Sufficient sums over rollout periods for one block of clusters."""
    rj = np.arange(2, J)
    S = np.zeros((2, n_clusters, J))
    for a, mean in enumerate((pop.mean0, pop.mean1)):
        S[a] = np.bincount(pop.cluster * J + pop.period - 1, weights=mean,
                           minlength=n_clusters * J).reshape(n_clusters, J)
    N = pop.counts.astype(float)
    Ntot = N.sum(axis=1)
    Sr, Nr = S[:, :, rj - 1], N[:, rj - 1]
    return {
        "hi_num": Sr.sum(axis=(1, 2)), "hi_den": Nr.sum(),
        "hc_num": (Sr / Ntot[None, :, None]).sum(axis=(1, 2)), "hc_den": (Nr / Ntot[:, None]).sum(),
        "hm_num": (Sr.sum(axis=2) / Nr.sum(axis=1)).sum(axis=1), "hm_den": float(n_clusters),
        "vi_num": Sr.sum(axis=1), "vi_den": Nr.sum(axis=0),
        "vc_num": (Sr / Nr).sum(axis=1), "vc_den": float(n_clusters),
    }


def _mu_from(m):
    """(5, 2) arm means: four estimands then the cluster-mean h-cATE."""
    out = np.empty((5, 2))
    out[0] = m["hi_num"] / m["hi_den"]
    out[1] = m["hc_num"] / m["hc_den"]
    out[2] = (m["vi_num"] / m["vi_den"]).mean(axis=1)
    out[3] = (m["vc_num"] / m["vc_den"]).mean(axis=1)
    out[4] = m["hm_num"] / m["hm_den"]
    return out


def true_estimands(config: ScenarioConfig, block=5000, seed_stream=10**9) -> TruthResult:
    """Estimands of a super-population of ``config.truth_clusters`` clusters.

    Individual conditional means replace realized outcomes (their average
    over the residual noise), and cluster-period sizes, covariates and random
    effects are drawn from the scenario DGP.  The standard error comes from
    independent blocks of ``block`` clusters (batch means).
    """
    m = int(config.truth_clusters)
    if m < 10_000:
        raise ValueError("truth_clusters must be at least 1e4")
    J = config.n_periods
    scale = ContrastScale.parse(config.scale)
    rng = _rng(config.seed, seed_stream)
    blocks, total = [], None
    done = 0
    while done < m:
        b = min(block, m - done)
        pop = _draw_population(config, b, rng, periods=range(2, J))
        mom = _block_moments(pop, b, J)
        blocks.append(_mu_from(mom))
        total = mom if total is None else {k: total[k] + mom[k] for k in total}
        done += b
    mu = _mu_from(total)
    tau = np.array([scale.psi_contrast(mu[k, 1], mu[k, 0]) for k in range(5)])
    per_block = np.array([[scale.psi_contrast(x[k, 1], x[k, 0]) for k in range(5)] for x in blocks])
    nb = len(blocks)
    se = per_block.std(axis=0, ddof=1) / np.sqrt(nb) if nb > 1 else np.full(5, np.nan)
    return TruthResult(tau[:4], se[:4], mu[:4, ::-1], float(tau[4]), float(se[4]), m)


# Monte Carlo ----------------------------------------------------------------------

ORACLE = Method("oracle", None, "oracle")


def _parse_sim_method(token):
    if isinstance(token, Method):
        return token
    if str(token).strip().lower() == "oracle":
        return ORACLE
    return parse_method(token)


@dataclass
class MetricsTable:
    """Monte Carlo performance per (estimand, method).

    ``frame`` has columns estimand, method, truth, mean, rbias, mcsd, aese,
    cp, completed, completion.  ``replicates`` holds one row per replicate,
    method and estimand (estimates on the reporting scale).
    """

    frame: pd.DataFrame
    replicates: pd.DataFrame
    config: dict

    def row(self, method, estimand):
        f = self.frame
        hit = f[(f.method == method) & (f.estimand == EstimandKind.parse(estimand).value)]
        if hit.empty:
            raise KeyError((method, estimand))
        return hit.iloc[0]

    def value(self, method, estimand, metric):
        return float(self.row(method, estimand)[metric])

    def to_csv(self, path):
        from .data import atomic_write_text
        atomic_write_text(path, self.frame.to_csv(index=False))


def _summarize_replicates(rep: pd.DataFrame, truth: dict, R: int, with_se: bool):
    rows = []
    for (method, kind), g in rep.groupby(["method", "estimand"], sort=False):
        tau = truth[kind]
        ok = g[g.ok]
        est = ok.estimate.to_numpy()
        row = {"estimand": kind, "method": method, "truth": tau,
               "mean": est.mean() if len(est) else np.nan,
               "rbias": abs(est.mean() - tau) / abs(tau) * 100 if len(est) else np.nan,
               "mcsd": est.std(ddof=1) if len(est) > 1 else np.nan,
               "aese": np.nan, "cp": np.nan,
               "completed": len(est), "completion": len(est) / R}
        if with_se and len(est):
            row["aese"] = ok.se.mean()
            row["cp"] = ((ok.lower <= tau) & (tau <= ok.upper)).mean()
        rows.append(row)
    return pd.DataFrame(rows)


def _one_replicate(config, methods, kinds, truth, r, with_se, policy):
    """Records for replicate r; failing methods are retried alone so that
    one failure does not discard the others."""
    data = generate(config, r)
    real = [m for m in methods if m is not ORACLE]
    recs = []

    def run(ms):
        if not ms:
            return []
        out = []
        if with_se:
            reps = loco_replicates(data, ms, config.scale, kinds, policy, threads=1)
            for res in summarize(reps):
                out.append((res.method, res.kind.value, res.psi_estimate, res.se,
                            res.psi_ci[0], res.psi_ci[1]))
        else:
            vals = evaluate(data, ms, config.scale, kinds).values
            for a, m in enumerate(ms):
                for b, k in enumerate(kinds):
                    out.append((m.name, k.value, vals[a, b, 2], np.nan, np.nan, np.nan))
        return out

    try:
        got = run(real)
    except (SwmrsError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("replicate %d: joint fit failed (%s); retrying per method", r, exc)
        got = []
        for m in real:
            try:
                got += run([m])
            except (SwmrsError, np.linalg.LinAlgError, FloatingPointError) as exc2:
                log.warning("replicate %d method %s failed: %s", r, m.name, exc2)
                got += [(m.name, k.value, np.nan, np.nan, np.nan, np.nan) for k in kinds]
    for name, kind, est, se, lo, hi in got:
        recs.append({"replicate": r, "method": name, "estimand": kind, "estimate": est,
                     "se": se, "lower": lo, "upper": hi, "ok": bool(np.isfinite(est))})
    if ORACLE in methods:
        for k in kinds:
            t = truth[k.value]
            recs.append({"replicate": r, "method": "oracle", "estimand": k.value, "estimate": t,
                         "se": 1.0, "lower": t - 1.96, "upper": t + 1.96, "ok": True})
    return recs


def run_monte_carlo(config: ScenarioConfig, methods, truth=None, kinds=ALL_KINDS,
                    threads=None, jackknife=True, policy="error") -> MetricsTable:
    """Simulate ``config.replicates`` trials and aggregate performance.

    ``truth`` maps estimand names to true values on the reporting scale; by
    default it is computed with ``true_estimands``.  With ``jackknife``
    False only point estimates (mean, RBias, MCSD) are produced.
    """
    methods = [_parse_sim_method(m) for m in methods]
    kinds = [EstimandKind.parse(k) for k in kinds]
    if truth is None:
        truth = true_estimands(config).as_dict()
    truth = {EstimandKind.parse(k).value: float(v) for k, v in dict(truth).items()}
    R = int(config.replicates)
    threads = resolve_threads(threads)

    def one(r):
        return _one_replicate(config, methods, kinds, truth, r, jackknife, policy)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(one, range(R)))
    else:
        chunks = [one(r) for r in range(R)]
    rep = pd.DataFrame([x for c in chunks for x in c])
    rep = rep.sort_values(["replicate", "method", "estimand"], kind="stable").reset_index(drop=True)
    frame = _summarize_replicates(rep, truth, R, jackknife)
    order = {k.value: i for i, k in enumerate(kinds)}
    frame = frame.sort_values(["estimand", "method"], key=lambda s: s.map(order) if s.name == "estimand" else s)
    cfg = config.to_dict() | {"methods": [m.name for m in methods], "truth": truth}
    return MetricsTable(frame.reset_index(drop=True), rep, cfg)


def run_ics_monte_carlo(config: ScenarioConfig, method="mrs:W1", alpha=0.05, threads=None,
                        policy="error"):
    """Rejection rates of the horizontal, vertical and global ICS tests."""
    from .inference import global_test_from_replicates, pairwise_test_from_replicates
    m = _parse_sim_method(method)
    R = int(config.replicates)

    def one(r):
        data = generate(config, r)
        try:
            reps = loco_replicates(data, [m], config.scale, ALL_KINDS, policy, threads=1)
            return (pairwise_test_from_replicates(reps, "h").p_value,
                    pairwise_test_from_replicates(reps, "v").p_value,
                    global_test_from_replicates(reps).p_value)
        except (SwmrsError, np.linalg.LinAlgError) as exc:
            log.warning("replicate %d failed: %s", r, exc)
            return (np.nan, np.nan, np.nan)

    threads = resolve_threads(threads)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            p = np.array(list(pool.map(one, range(R))))
    else:
        p = np.array([one(r) for r in range(R)])
    ok = np.isfinite(p).all(axis=1)
    rates = (p[ok] < alpha).mean(axis=0) if ok.any() else np.full(3, np.nan)
    return {"h": float(rates[0]), "v": float(rates[1]), "global": float(rates[2]),
            "completed": int(ok.sum()), "completion": float(ok.mean()),
            "p_values": p, "config": config.to_dict() | {"method": m.name, "alpha": alpha}}


def with_overrides(config: ScenarioConfig, **kw) -> ScenarioConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
