"""Fitted working models and cluster-period mean predictions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ..errors import PeriodOutOfRange, UnfittedModel
from .design import build_design
from .spec import WorkingModelSpec

LOGISTIC_VAR = np.pi ** 2 / 3


@dataclass(frozen=True)
class FittedModel:
    """Estimated working model.

    ``variance_components`` maps ``cluster``, ``cluster_period`` and
    ``residual`` to variances where the model has them.  ``centering`` holds
    per-period covariate centers for ANCOVA fits.
    """

    spec: WorkingModelSpec
    coef: np.ndarray
    names: tuple
    treat_periods: tuple
    n_periods: int
    variance_components: dict = field(default_factory=dict)
    convergence: dict = field(default_factory=dict)
    centering: np.ndarray | None = None
    boundary: tuple = ()

    def coefficient(self, name):
        return float(self.coef[self.names.index(name)])

    def treatment_coef(self, period_weights=None):
        """Model-based treatment effect.

        Constant-effect models return the treatment coefficient; for
        period-specific models the per-period coefficients are averaged with
        ``period_weights`` (indexed by period - 1), uniform by default.
        """
        if not self.spec.period_specific:
            return self.coefficient("treat")
        taus = np.array([self.coefficient(f"treat[{j}]") for j in self.treat_periods])
        if period_weights is None:
            w = np.ones(len(taus))
        else:
            w = np.asarray(period_weights, dtype=float)[np.array(self.treat_periods) - 1]
        return float(np.dot(w, taus) / w.sum())

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "coefficients": dict(zip(self.names, map(float, self.coef))),
            "variance_components": {k: float(v) for k, v in self.variance_components.items()},
            "boundary": list(self.boundary),
            "convergence": {k: (float(v) if isinstance(v, (np.floating, float)) else v)
                            for k, v in self.convergence.items()},
        }


def random_effect_variance(model):
    vc = model.variance_components
    return vc.get("cluster", 0.0) + vc.get("cluster_period", 0.0)


def row_means(model: FittedModel, data, z):
    """Per-row predicted mean with every row assigned to arm ``z``."""
    d = build_design(data, model.spec, z=z, treat_periods=model.treat_periods,
                     centering=model.centering)
    if d.names != model.names:
        raise ValueError("design columns do not match the fitted model")
    eta = d.X @ model.coef
    spec = model.spec
    if spec.link == "identity":
        return eta
    if spec.estimator == "GLMM_LAPLACE":
        s2 = random_effect_variance(model)
        if spec.link == "logit":
            return expit(eta / np.sqrt((s2 + LOGISTIC_VAR) / LOGISTIC_VAR))
        return np.exp(eta + s2 / 2)
    return expit(eta) if spec.link == "logit" else np.exp(eta)


def predict_cells(model: FittedModel, data) -> np.ndarray:
    """m_zj for every cell as a (2, I, J) array indexed by arm; 0 in empty cells."""
    if model is None or model.coef is None:
        raise UnfittedModel()
    out = np.empty((2, data.n_clusters, data.n_periods))
    N = data.counts
    for z in (0, 1):
        s = data.cell_sums(row_means(model, data, z))
        out[z] = np.where(N > 0, s / np.maximum(N, 1), 0.0)
    return out


def predict_m(model: FittedModel, data, z, j) -> np.ndarray:
    """Cluster-period mean predictions for arm ``z`` in rollout period ``j``."""
    if model is None or model.coef is None:
        raise UnfittedModel()
    if not 2 <= j <= data.n_periods - 1:
        raise PeriodOutOfRange(j, data.n_periods)
    return predict_cells(model, data)[z][:, j - 1]
