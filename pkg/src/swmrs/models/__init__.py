"""Working outcome models."""
from .ancova import ancova_mu, fit_ancova_wls
from .base import FittedModel, predict_cells, predict_m
from .design import build_design
from .gee import fit_gee_independence
from .glmm import fit_glmm_laplace, laplace_problem
from .lmm import fit_lmm, reml_problem
from .spec import ANCOVA_I, ANCOVA_III, PRESETS, WorkingModelSpec, preset


def fit_model(data, spec: WorkingModelSpec, scheme=None, start=None) -> FittedModel:
    """Dispatch on ``spec.estimator``; ANCOVA fits need the weight scheme."""
    est = spec.estimator
    if est == "GEE_INDEPENDENCE":
        return fit_gee_independence(data, spec)
    if est == "LMM_REML":
        return fit_lmm(data, spec, start=start)
    if est == "GLMM_LAPLACE":
        return fit_glmm_laplace(data, spec, start=start)
    if scheme is None:
        raise ValueError("ANCOVA_WLS needs a weight scheme")
    return fit_ancova_wls(data, scheme, spec)


__all__ = [
    "ANCOVA_I", "ANCOVA_III", "PRESETS", "FittedModel", "WorkingModelSpec", "ancova_mu",
    "build_design", "fit_ancova_wls", "fit_gee_independence", "fit_glmm_laplace", "fit_lmm",
    "fit_model", "laplace_problem", "predict_cells", "predict_m", "preset", "reml_problem",
]
