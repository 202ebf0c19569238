"""Long-format stepped-wedge trial data: loading, validation and layout.

Rows are stored sorted by (cluster, period) so every cluster-period cell is
a contiguous block.  Clusters are integer-coded 0..I-1 and periods 1..J;
the original labels are kept for reporting and for writing back to CSV.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd

from .errors import (
    BaselineTreated, EmptyCell, FinalPeriodUntreated, InvalidTreatmentValue,
    MissingColumn, MixedTreatmentWithinCell, MonotonicityViolation,
    NoRolloutPeriod, NonNumericValue, TooFewPeriods,
)

DEFAULT_SCHEMA = {"cluster": "cluster", "period": "period",
                  "treatment": "treatment", "outcome": "outcome"}


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Validated individual-level SW-CRT data.

    Attributes:
        cluster: cluster code per row, 0..I-1.
        period: period per row, 1..J.
        treatment: Z_ij per row (0/1).
        outcome: Y_ijk per row.
        covariates: (n, p) individual covariates.
        covariate_names: names of the covariate columns.
        cluster_labels: original identifier of each cluster code.
        n_periods: J.
        period_labels: original label of each period 1..J.
        potential_outcomes: optional (n, 2) array holding Y(0), Y(1).
    """

    cluster: np.ndarray
    period: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    cluster_labels: tuple
    n_periods: int
    period_labels: tuple = ()
    potential_outcomes: np.ndarray | None = field(default=None, repr=False)

    # construction -----------------------------------------------------
    @classmethod
    def from_arrays(cls, cluster, period, treatment, outcome, covariates=None,
                    covariate_names=None, potential_outcomes=None):
        """Build a dataset from raw per-row arrays.

        Cluster and period labels may be arbitrary sortable values; periods
        are remapped to 1..J in sorted order.
        """
        cluster = np.asarray(cluster)
        period = np.asarray(period)
        n = cluster.shape[0]
        cl_labels, cl_code = np.unique(cluster, return_inverse=True)
        pe_labels, pe_code = np.unique(period, return_inverse=True)
        treatment = np.asarray(treatment)
        bad = ~np.isin(treatment, (0, 1))
        if bad.any():
            r = int(np.flatnonzero(bad)[0])
            raise InvalidTreatmentValue(r + 1, treatment[r].item())
        if covariates is None:
            covariates = np.empty((n, 0))
        covariates = np.asarray(covariates, dtype=float).reshape(n, -1)
        if covariate_names is None:
            covariate_names = tuple(f"x{k + 1}" for k in range(covariates.shape[1]))
        order = np.lexsort((pe_code, cl_code))
        po = None
        if potential_outcomes is not None:
            po = np.asarray(potential_outcomes, dtype=float)[order]
        data = cls(
            cluster=cl_code[order].astype(np.int64),
            period=pe_code[order].astype(np.int64) + 1,
            treatment=treatment[order].astype(np.int8),
            outcome=np.asarray(outcome, dtype=float)[order],
            covariates=covariates[order],
            covariate_names=tuple(covariate_names),
            cluster_labels=tuple(x.item() if hasattr(x, "item") else x for x in cl_labels),
            n_periods=len(pe_labels),
            period_labels=tuple(x.item() if hasattr(x, "item") else x for x in pe_labels),
            potential_outcomes=po,
        )
        data._check_cells()
        return data

    def _check_cells(self):
        I, J = self.n_clusters, self.n_periods
        cell = self.cell_index
        zsum = np.bincount(cell, weights=self.treatment, minlength=I * J)
        n = self.counts.ravel()
        mixed = (zsum > 0) & (zsum < n)
        if mixed.any():
            c = int(np.flatnonzero(mixed)[0])
            raise MixedTreatmentWithinCell(self.cluster_labels[c // J], self.period_labels[c % J])

    # shape ---------------------------------------------------------------
    @property
    def n_rows(self):
        return self.outcome.shape[0]

    @property
    def n_clusters(self):
        return len(self.cluster_labels)

    @cached_property
    def cell_index(self):
        """Flat cell index i*J + (j-1) for every row."""
        return self.cluster * self.n_periods + (self.period - 1)

    @cached_property
    def counts(self):
        """N_ij as an (I, J) integer matrix."""
        I, J = self.n_clusters, self.n_periods
        return np.bincount(self.cell_index, minlength=I * J).reshape(I, J)

    @cached_property
    def cluster_offsets(self):
        """Row offsets so that rows of cluster i are offsets[i]:offsets[i+1]."""
        return np.concatenate([[0], np.cumsum(self.counts.sum(axis=1))])

    @cached_property
    def observed_treatment(self):
        """Z_ij as an (I, J) matrix, -1 where the cell is empty."""
        I, J = self.n_clusters, self.n_periods
        z = np.full(I * J, -1, dtype=np.int64)
        z[self.cell_index] = self.treatment
        return z.reshape(I, J)

    # cell aggregates -------------------------------------------------------
    def cell_sums(self, values):
        I, J = self.n_clusters, self.n_periods
        return np.bincount(self.cell_index, weights=values, minlength=I * J).reshape(I, J)

    def cell_means(self, values=None):
        """Arithmetic cell means (I, J); NaN for empty cells."""
        values = self.outcome if values is None else values
        s = self.cell_sums(values)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, s / np.maximum(self.counts, 1), np.nan)

    # derived datasets ------------------------------------------------------
    def subset_clusters(self, keep):
        """Dataset restricted to clusters where boolean mask ``keep`` is True."""
        keep = np.asarray(keep, dtype=bool)
        rows = keep[self.cluster]
        new_code = np.cumsum(keep) - 1
        labels = tuple(l for l, k in zip(self.cluster_labels, keep) if k)
        return TrialDataset(
            cluster=new_code[self.cluster[rows]],
            period=self.period[rows],
            treatment=self.treatment[rows],
            outcome=self.outcome[rows],
            covariates=self.covariates[rows],
            covariate_names=self.covariate_names,
            cluster_labels=labels,
            n_periods=self.n_periods,
            period_labels=self.period_labels,
            potential_outcomes=None if self.potential_outcomes is None
            else self.potential_outcomes[rows],
        )

    def drop_cluster(self, g):
        """Leave-one-cluster-out copy without cluster code ``g``."""
        keep = np.ones(self.n_clusters, dtype=bool)
        keep[g] = False
        return self.subset_clusters(keep)

    def with_outcome(self, outcome):
        return TrialDataset(self.cluster, self.period, self.treatment,
                            np.asarray(outcome, dtype=float), self.covariates,
                            self.covariate_names, self.cluster_labels, self.n_periods,
                            self.period_labels, self.potential_outcomes)

    def covariate(self, name):
        return self.covariates[:, self.covariate_names.index(name)]

    def __eq__(self, other):
        """Field-by-field equality of the observed data (potential outcomes ignored)."""
        if not isinstance(other, TrialDataset):
            return NotImplemented
        return (self.n_periods == other.n_periods
                and self.covariate_names == other.covariate_names
                and self.cluster_labels == other.cluster_labels
                and self.period_labels == other.period_labels
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("cluster", "period", "treatment", "outcome", "covariates")))

    __hash__ = None


@dataclass(frozen=True)
class DesignLayout:
    """Rollout structure recovered from the observed treatment pattern."""

    adoption_time: np.ndarray       # A_i per cluster code
    treated_count: np.ndarray       # I_j for j = 1..J
    propensity: np.ndarray          # e_j = I_j / I
    cluster_period_size: np.ndarray  # N_ij
    treatment: np.ndarray           # Z_ij filled in from A_i, including empty cells

    @property
    def rollout_periods(self):
        J = len(self.propensity)
        return np.arange(2, J)


def derive_layout(data: TrialDataset, require_rollout=True) -> DesignLayout:
    """Recover adoption times and propensities and check the SW-CRT invariants.

    With ``require_rollout=False`` periods without treatment variation are
    tolerated (used when such periods are excluded downstream).
    """
    I, J = data.n_clusters, data.n_periods
    if J < 3:
        raise TooFewPeriods(J)
    zobs = data.observed_treatment
    periods = np.arange(1, J + 1)
    treated = zobs == 1
    adoption = np.where(treated.any(axis=1), np.argmax(treated, axis=1) + 1, J + 1)
    z = (periods[None, :] >= adoption[:, None]).astype(np.int64)
    observed = zobs >= 0
    bad = observed & (zobs != z)
    if bad.any():
        raise MonotonicityViolation(data.cluster_labels[int(np.flatnonzero(bad.any(axis=1))[0])])
    if (adoption == 1).any():
        raise BaselineTreated(data.cluster_labels[int(np.flatnonzero(adoption == 1)[0])])
    if (adoption > J).any():
        raise FinalPeriodUntreated(data.cluster_labels[int(np.flatnonzero(adoption > J)[0])])
    treated_count = z.sum(axis=0)
    e = treated_count / I
    for j in range(2, J):
        if require_rollout and (e[j - 1] <= 0 or e[j - 1] >= 1):
            raise NoRolloutPeriod(j)
    return DesignLayout(adoption, treated_count, e, data.counts, z)


def cluster_period_summary(data: TrialDataset, weights) -> pd.DataFrame:
    """Per-cell size and weighted outcome mean.

    ``weights`` is either a WeightScheme (anything with ``row`` and ``cell``
    attributes) or an array of per-row weights.
    """
    if hasattr(weights, "row"):
        row_w = np.asarray(weights.row, dtype=float)
        cell_w = np.asarray(weights.cell, dtype=float)
    else:
        row_w = np.asarray(weights, dtype=float)
        cell_w = data.cell_sums(row_w)
    N = data.counts
    empty = (N == 0) & (cell_w != 0)
    if empty.any():
        i, j = np.argwhere(empty)[0]
        raise EmptyCell(data.cluster_labels[i], int(j) + 1)
    wsum = data.cell_sums(row_w)
    wy = data.cell_sums(row_w * data.outcome)
    with np.errstate(invalid="ignore", divide="ignore"):
        ybar = np.where(N > 0, wy / wsum, np.nan)
    I, J = N.shape
    return pd.DataFrame({
        "cluster": np.repeat(np.array(data.cluster_labels, dtype=object), J),
        "period": np.tile(np.arange(1, J + 1), I),
        "n": N.ravel(),
        "weight": cell_w.ravel(),
        "ybar": ybar.ravel(),
    })


# CSV I/O ---------------------------------------------------------------

def _numeric_column(frame, column):
    # astype(float) parses exactly; to_numeric is only used to locate bad rows
    try:
        values = frame[column].astype(float).to_numpy()
        bad = ~np.isfinite(values)
    except ValueError:
        bad = pd.to_numeric(frame[column], errors="coerce").isna().to_numpy()
        values = None
    if bad.any():
        r = int(np.flatnonzero(bad)[0])
        raise NonNumericValue(r + 1, column, frame[column].iloc[r])
    return values


def load_trial_csv(path, schema=None, covariates=None) -> TrialDataset:
    """Read a long-format CSV (one row per individual).

    Args:
        path: CSV file with a header row.
        schema: optional map from the roles cluster/period/treatment/outcome
            to column names.
        covariates: covariate column names; defaults to every other column.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    frame.columns = [c.strip() for c in frame.columns]
    for role in ("cluster", "period", "treatment", "outcome"):
        if schema[role] not in frame.columns:
            raise MissingColumn(schema[role])
    used = {schema[r] for r in DEFAULT_SCHEMA}
    if covariates is None:
        covariates = [c for c in frame.columns if c not in used]
    for c in covariates:
        if c not in frame.columns:
            raise MissingColumn(c)
    treatment = _numeric_column(frame, schema["treatment"])
    outcome = _numeric_column(frame, schema["outcome"])
    X = np.column_stack([_numeric_column(frame, c) for c in covariates]) if covariates \
        else np.empty((len(frame), 0))
    return TrialDataset.from_arrays(
        _labels(frame[schema["cluster"]]), _labels(frame[schema["period"]]),
        treatment, outcome, X, covariates)


def _labels(series):
    """Integer labels when every entry parses as an integer, else strings."""
    as_num = pd.to_numeric(series, errors="coerce")
    if not as_num.isna().any() and np.all(np.mod(as_num, 1) == 0):
        return as_num.to_numpy().astype(np.int64)
    return series.to_numpy(dtype=str)


def trial_frame(data: TrialDataset, schema=None) -> pd.DataFrame:
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    cols = {
        schema["cluster"]: np.array(data.cluster_labels, dtype=object)[data.cluster],
        schema["period"]: np.array(data.period_labels, dtype=object)[data.period - 1],
        schema["treatment"]: data.treatment.astype(int),
        schema["outcome"]: data.outcome,
    }
    for k, name in enumerate(data.covariate_names):
        cols[name] = data.covariates[:, k]
    return pd.DataFrame(cols)


def write_trial_csv(data: TrialDataset, path, schema=None):
    atomic_write_text(path, trial_frame(data, schema).to_csv(index=False, float_format="%.17g"))


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
