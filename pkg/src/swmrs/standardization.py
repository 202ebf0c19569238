"""Model-robust standardization (augmented) estimators and the shared
evaluation engine used by inference, simulation and the CLI."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TrialDataset, derive_layout
from .errors import EmptyArmInPeriod, PeriodOutOfRange, PredictionMissing
from .estimands import (
    ALL_KINDS, ContrastScale, EstimandKind, WeightScheme, resolve_weights,
)
from .models import (
    FittedModel, WorkingModelSpec, ancova_mu, fit_ancova_wls, fit_model, predict_cells, preset,
)


@dataclass(frozen=True)
class PeriodAugmentedEstimate:
    period: int
    arm: int
    unadjusted: float
    augmentation: float

    @property
    def total(self):
        return self.unadjusted + self.augmentation


def _rollout(J, periods=None):
    return np.arange(2, J) if periods is None else np.asarray(periods, dtype=int)


def period_components(cell_w, Z, ybar, preds, z, periods=None):
    """Unadjusted and augmentation parts of the per-period estimator.

    Args:
        cell_w: (I, J) cell weights omega_ij.
        Z: (I, J) treatment matrix.
        ybar: (I, J) weighted cell means (any finite value where cell_w == 0).
        preds: (I, J) predictions m_zj, or None (no augmentation).
        z: arm.
        periods: rollout periods to evaluate (default 2..J-1).

    Returns:
        (unadjusted, augmentation, omega_j) arrays over ``periods``.
    """
    cols = _rollout(cell_w.shape[1], periods) - 1
    w = cell_w[:, cols]
    wa = np.where(Z[:, cols] == z, w, 0.0)
    denom = wa.sum(axis=0)
    if (denom <= 0).any():
        raise EmptyArmInPeriod(int(cols[np.flatnonzero(denom <= 0)[0]]) + 1, z)
    yb = np.where(w > 0, ybar[:, cols], 0.0)
    unadj = (wa * yb).sum(axis=0) / denom
    wj = w.sum(axis=0)
    if preds is None:
        return unadj, np.zeros_like(unadj), wj
    m = np.where(w > 0, preds[:, cols], 0.0)
    aug = (w * m).sum(axis=0) / wj - (wa * m).sum(axis=0) / denom
    return unadj, aug, wj


def pooled_mu(cell_w, Z, ybar, preds, z, periods=None):
    """omega_j-weighted average of per-period augmented means."""
    unadj, aug, wj = period_components(cell_w, Z, ybar, preds, z, periods)
    return float(np.dot(wj, unadj + aug) / wj.sum())


def _cell_means(data):
    return np.nan_to_num(data.cell_means(), nan=0.0)


def mrs_mu_period(data: TrialDataset, scheme: WeightScheme, preds, z, j,
                  layout=None) -> PeriodAugmentedEstimate:
    """Augmented estimator for one rollout period.

    ``preds`` holds m_zj for every cluster (NaN marks a missing prediction).
    """
    J = data.n_periods
    if not 2 <= j <= J - 1:
        raise PeriodOutOfRange(j, J)
    layout = layout or derive_layout(data)
    preds = np.asarray(preds, dtype=float)
    need = scheme.cell[:, j - 1] > 0
    if preds.shape != (data.n_clusters,) or np.isnan(preds[need]).any():
        i = int(np.flatnonzero(np.isnan(preds) & need)[0]) if preds.shape == need.shape else 0
        raise PredictionMissing(data.cluster_labels[i])
    full = np.zeros((data.n_clusters, J))
    full[:, j - 1] = np.nan_to_num(preds)
    u, a, _ = period_components(scheme.cell, layout.treatment, _cell_means(data), full, z, [j])
    return PeriodAugmentedEstimate(j, z, float(u[0]), float(a[0]))


def mrs_mu(data: TrialDataset, scheme: WeightScheme, model: FittedModel, z,
           layout=None, preds=None) -> float:
    layout = layout or derive_layout(data)
    if preds is None:
        preds = predict_cells(model, data)
    return pooled_mu(scheme.cell, layout.treatment, _cell_means(data), preds[z], z)


def mrs_tau(data: TrialDataset, scheme: WeightScheme, model: FittedModel, scale) -> float:
    scale = ContrastScale.parse(scale)
    layout = derive_layout(data)
    preds = predict_cells(model, data)
    mu1 = mrs_mu(data, scheme, model, 1, layout, preds)
    mu0 = mrs_mu(data, scheme, model, 0, layout, preds)
    return scale.contrast(mu1, mu0)


# evaluation engine ----------------------------------------------------------

@dataclass(frozen=True)
class Method:
    """An estimator: ``unadj``, ``mrs`` (augmented with a working model),
    ``coef`` (model coefficient) or ``ancova`` (coefficient-based ANCOVA)."""

    kind: str
    model: WorkingModelSpec | None = None
    label: str = ""

    @property
    def name(self):
        return self.label or self.kind


def parse_method(token) -> Method:
    if isinstance(token, Method):
        return token
    t = str(token).strip()
    low = t.lower()
    if low in ("unadj", "unadjusted", "np"):
        return Method("unadj", None, "unadj")
    if low in ("ancova", "ancova-iii", "ancova3"):
        return Method("ancova", preset("ANCOVA-III"), "ancova")
    if low in ("ancova-i", "ancova1"):
        return Method("ancova", preset("ANCOVA-I"), "ancova-i")
    kind, _, model = t.partition(":")
    kind = kind.lower()
    if kind not in ("mrs", "coef") or not model:
        raise ValueError(f"unknown method {token!r}")
    return Method(kind, preset(model), f"{kind}:{model.upper()}")


def _uses_scheme_fit(spec):
    return spec is not None and spec.estimator == "ANCOVA_WLS"


@dataclass
class Evaluation:
    """Point estimates for several methods and estimands on one dataset.

    ``values`` has shape (methods, kinds, 3) with columns mu1, mu0 and
    psi(tau); coefficient methods leave the mu columns NaN.
    """

    values: np.ndarray
    fits: dict


def evaluate(data: TrialDataset, methods, scale="rd", kinds=ALL_KINDS, periods=None,
             warm=None) -> Evaluation:
    """Evaluate ``methods`` for every estimand in ``kinds``.

    Each distinct working model is fitted once and its predictions shared by
    all weight schemes (ANCOVA fits depend on the scheme and are refitted per
    scheme).  ``warm`` maps model specs to fits used as optimizer starts.
    """
    scale = ContrastScale.parse(scale)
    methods = [parse_method(m) for m in methods]
    kinds = [EstimandKind.parse(k) for k in kinds]
    layout = derive_layout(data, require_rollout=periods is None)
    Z = layout.treatment
    ybar = _cell_means(data)
    schemes = {k: resolve_weights(data, k, layout) for k in kinds}
    fits, preds = {}, {}
    warm = warm or {}
    for m in methods:
        spec = m.model
        if spec is None or _uses_scheme_fit(spec) or spec in fits:
            continue
        fits[spec] = fit_model(data, spec, start=_warm_start(warm.get(spec)))
        if m.kind == "mrs" or any(o.kind == "mrs" and o.model == spec for o in methods):
            preds[spec] = predict_cells(fits[spec], data)
    scheme_fits = {}
    out = np.full((len(methods), len(kinds), 3), np.nan)
    for a, m in enumerate(methods):
        for b, k in enumerate(kinds):
            s = schemes[k]
            if m.kind == "coef":
                pw = s.period
                if periods is not None:
                    pw = np.zeros_like(pw)
                    pw[np.asarray(periods) - 1] = s.period[np.asarray(periods) - 1]
                out[a, b, 2] = fits[m.model].treatment_coef(pw)
                continue
            if _uses_scheme_fit(m.model):
                key = (m.model, k)
                if key not in scheme_fits:
                    scheme_fits[key] = fit_ancova_wls(data, s, m.model)
                fit = scheme_fits[key]
                if m.kind == "ancova":
                    mu = [ancova_mu(fit, s, z, periods) for z in (1, 0)]
                else:
                    p = predict_cells(fit, data)
                    mu = [pooled_mu(s.cell, Z, ybar, p[z], z, periods) for z in (1, 0)]
            else:
                p = preds.get(m.model) if m.kind == "mrs" else None
                mu = [pooled_mu(s.cell, Z, ybar, None if p is None else p[z], z, periods)
                      for z in (1, 0)]
            out[a, b, 0:2] = mu
            out[a, b, 2] = scale.psi_contrast(mu[0], mu[1])
    return Evaluation(out, fits)


def _warm_start(fit):
    if fit is None:
        return None
    conv = fit.convergence
    if "theta" in conv:
        return np.array(conv["theta"])
    if "log_ratios" in conv:
        return np.array(conv["log_ratios"])
    return None
