"""Weight schemes for the four estimands, contrast scales and the
unadjusted moment estimator."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import TrialDataset, derive_layout
from .errors import EmptyArmInPeriod, EmptyCell, ScaleDomainError, ZeroClusterTotal


class EstimandKind(str, enum.Enum):
    HIATE = "h-iate"
    HCATE = "h-cate"
    VIATE = "v-iate"
    VCATE = "v-cate"

    @classmethod
    def parse(cls, token):
        if isinstance(token, cls):
            return token
        t = str(token).strip().lower().replace("_", "-")
        for k in cls:
            if t in (k.value, k.name.lower()):
                return k
        raise ValueError(f"unknown estimand {token!r}")


ALL_KINDS = (EstimandKind.HIATE, EstimandKind.HCATE, EstimandKind.VIATE, EstimandKind.VCATE)


@dataclass(frozen=True)
class WeightScheme:
    """Resolved weights at row, cell, period and cluster level.

    ``cell`` is (I, J); ``period`` and ``cluster`` are its column and row
    sums.  Empty cells carry zero weight.
    """

    kind: EstimandKind
    row: np.ndarray
    cell: np.ndarray
    period: np.ndarray
    cluster: np.ndarray


def resolve_weights(data: TrialDataset, kind, layout=None) -> WeightScheme:
    kind = EstimandKind.parse(kind)
    N = data.counts.astype(float)
    I, J = N.shape
    if kind in (EstimandKind.VIATE, EstimandKind.VCATE):
        rollout = N[:, 1:J - 1]
        if (rollout == 0).any():
            i, j = np.argwhere(rollout == 0)[0]
            raise EmptyCell(data.cluster_labels[i], int(j) + 2)
    if kind is EstimandKind.HIATE:
        per_cell_row = np.ones_like(N)
    elif kind is EstimandKind.HCATE:
        tot = N.sum(axis=1)
        if (tot == 0).any():
            raise ZeroClusterTotal(data.cluster_labels[int(np.flatnonzero(tot == 0)[0])])
        per_cell_row = np.broadcast_to(1.0 / tot[:, None], N.shape)
    elif kind is EstimandKind.VIATE:
        mu = N.mean(axis=0)
        with np.errstate(divide="ignore"):
            per_cell_row = np.broadcast_to(np.where(mu > 0, 1.0 / (I * mu), 0.0), N.shape)
    else:
        with np.errstate(divide="ignore"):
            per_cell_row = np.where(N > 0, 1.0 / np.maximum(N, 1), 0.0)
    cell = per_cell_row * N
    row = per_cell_row.ravel()[data.cell_index]
    return WeightScheme(kind, row, cell, cell.sum(axis=0), cell.sum(axis=1))


# contrasts ---------------------------------------------------------------

class ScaleKind(str, enum.Enum):
    DIFFERENCE = "rd"
    RISK_RATIO = "rr"
    ODDS_RATIO = "or"


@dataclass(frozen=True)
class ContrastScale:
    """Contrast f(mu1, mu0) and its reporting transform psi."""

    kind: ScaleKind = ScaleKind.DIFFERENCE
    log_transform: bool | None = None

    @classmethod
    def parse(cls, token):
        if isinstance(token, ContrastScale):
            return token
        t = str(token).strip().lower()
        aliases = {"difference": "rd", "md": "rd", "risk_ratio": "rr", "odds_ratio": "or"}
        return cls(ScaleKind(aliases.get(t, t)))

    @property
    def uses_log(self):
        if self.log_transform is None:
            return self.kind is not ScaleKind.DIFFERENCE
        return self.log_transform

    def check(self, mu1, mu0):
        if self.kind is ScaleKind.DIFFERENCE:
            return
        if not mu0 > 0:
            raise ScaleDomainError(self.kind.name, mu0)
        if self.kind is ScaleKind.RISK_RATIO and not mu1 > 0 and self.uses_log:
            raise ScaleDomainError(self.kind.name, mu1)
        if self.kind is ScaleKind.ODDS_RATIO:
            for v in (mu1, mu0):
                if not 0 < v < 1:
                    raise ScaleDomainError(self.kind.name, v)

    def contrast(self, mu1, mu0):
        self.check(mu1, mu0)
        if self.kind is ScaleKind.DIFFERENCE:
            return mu1 - mu0
        if self.kind is ScaleKind.RISK_RATIO:
            return mu1 / mu0
        return mu1 * (1 - mu0) / ((1 - mu1) * mu0)

    def psi(self, value):
        return np.log(value) if self.uses_log else value

    def psi_inverse(self, value):
        return np.exp(value) if self.uses_log else value

    def psi_contrast(self, mu1, mu0):
        """psi(f(mu1, mu0)) computed without forming the ratio first."""
        self.check(mu1, mu0)
        if not self.uses_log:
            return self.contrast(mu1, mu0)
        if self.kind is ScaleKind.RISK_RATIO:
            return np.log(mu1) - np.log(mu0)
        if self.kind is ScaleKind.ODDS_RATIO:
            return np.log(mu1) - np.log1p(-mu1) - np.log(mu0) + np.log1p(-mu0)
        return np.log(mu1 - mu0)


def apply_contrast(scale, mu1, mu0):
    return ContrastScale.parse(scale).contrast(mu1, mu0)


# unadjusted estimator -------------------------------------------------------

def weighted_cell_means(data, scheme):
    wsum = data.cell_sums(scheme.row)
    wy = data.cell_sums(scheme.row * data.outcome)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(wsum > 0, wy / np.where(wsum > 0, wsum, 1.0), 0.0)


def unadjusted_mu(data: TrialDataset, scheme: WeightScheme, z, layout=None) -> float:
    """Weighted mean of arm-z cell means per rollout period, pooled over
    periods with the period weights omega_j."""
    layout = layout or derive_layout(data)
    J = data.n_periods
    w = scheme.cell[:, 1:J - 1]
    wa = np.where(layout.treatment[:, 1:J - 1] == z, w, 0.0)
    denom = wa.sum(axis=0)
    if (denom <= 0).any():
        raise EmptyArmInPeriod(int(np.flatnonzero(denom <= 0)[0]) + 2, z)
    ybar = weighted_cell_means(data, scheme)[:, 1:J - 1]
    per = (wa * ybar).sum(axis=0) / denom
    wj = w.sum(axis=0)
    return float(np.dot(wj, per) / wj.sum())
