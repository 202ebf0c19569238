"""Model-robust standardization for stepped-wedge cluster-randomized trials."""
from importlib import resources

__version__ = "0.1.0"

from .data import TrialDataset, derive_layout, load_trial_csv, write_trial_csv  # noqa: E402
from .estimands import ALL_KINDS, ContrastScale, EstimandKind, resolve_weights  # noqa: E402
from .inference import (  # noqa: E402
    EstimateResult, IcsTestResult, global_ics_test, jackknife, jackknife_variance,
    loco_replicates, pairwise_ics_test, summarize,
)
from .models import PRESETS, WorkingModelSpec, fit_model, preset  # noqa: E402
from .standardization import evaluate, mrs_mu, mrs_tau  # noqa: E402


def demo_path():
    """Path of the small synthetic trial shipped with the package."""
    return resources.files("swmrs") / "resources" / "demo_trial.csv"


__all__ = [
    "ALL_KINDS", "ContrastScale", "EstimandKind", "EstimateResult", "IcsTestResult", "PRESETS",
    "TrialDataset", "WorkingModelSpec", "demo_path", "derive_layout", "evaluate", "fit_model",
    "global_ics_test", "jackknife", "jackknife_variance", "load_trial_csv", "loco_replicates",
    "mrs_mu", "mrs_tau", "pairwise_ics_test", "preset", "resolve_weights", "summarize",
    "write_trial_csv",
]
