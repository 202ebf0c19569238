"""Working-model specifications and the named presets W1..W12."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from ..errors import InvalidModelSpec

ESTIMATORS = ("GEE_INDEPENDENCE", "LMM_REML", "GLMM_LAPLACE", "ANCOVA_WLS")
FAMILIES = ("gaussian", "binomial")
LINKS = ("identity", "logit", "log")
EFFECTS = ("constant", "period_specific")
RANDOM_EFFECTS = ("none", "cluster", "cluster_plus_cluster_period")
CELL_SIZE = "cell_size"


@dataclass(frozen=True)
class WorkingModelSpec:
    """Outcome regression used to produce cluster-period mean predictions.

    ``covariates`` lists data columns plus the optional token ``cell_size``
    (N_ij as a covariate).  ``None`` means every data covariate followed by
    ``cell_size``.  ``interactions`` adds treatment-by-covariate terms (ANCOVA
    only).  ``pinned`` names random-effect components held at zero.
    """

    estimator: str = "GEE_INDEPENDENCE"
    family: str = "gaussian"
    link: str = "identity"
    treatment_effect: str = "constant"
    random_effects: str = "none"
    covariates: tuple | None = None
    interactions: bool = False
    pinned: tuple = ()

    def __post_init__(self):
        if self.covariates is not None and not isinstance(self.covariates, tuple):
            object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "pinned", tuple(self.pinned))
        self.validate()

    def validate(self):
        for value, allowed, what in ((self.estimator, ESTIMATORS, "estimator"),
                                     (self.family, FAMILIES, "family"),
                                     (self.link, LINKS, "link"),
                                     (self.treatment_effect, EFFECTS, "treatment_effect"),
                                     (self.random_effects, RANDOM_EFFECTS, "random_effects")):
            if value not in allowed:
                raise InvalidModelSpec(f"{what} must be one of {allowed}, got {value!r}")
        est = self.estimator
        if est == "LMM_REML" and (self.family, self.link) != ("gaussian", "identity"):
            raise InvalidModelSpec("LMM_REML requires the gaussian family with identity link")
        if est == "GLMM_LAPLACE" and (self.family != "binomial" or self.link == "identity"):
            raise InvalidModelSpec("GLMM_LAPLACE requires the binomial family with logit or log link")
        if est == "ANCOVA_WLS" and self.link != "identity":
            raise InvalidModelSpec("ANCOVA_WLS requires the identity link")
        if self.family == "gaussian" and self.link != "identity":
            raise InvalidModelSpec("gaussian family supports only the identity link")
        if self.family == "binomial" and self.link == "identity":
            raise InvalidModelSpec("binomial family requires a logit or log link")
        has_re = self.random_effects != "none"
        if has_re != (est in ("LMM_REML", "GLMM_LAPLACE")):
            raise InvalidModelSpec("random effects are required for mixed models and "
                                   "forbidden for GEE_INDEPENDENCE and ANCOVA_WLS")
        if self.interactions and est != "ANCOVA_WLS":
            raise InvalidModelSpec("treatment-by-covariate interactions are only supported for ANCOVA_WLS")
        for p in self.pinned:
            if p not in ("cluster", "cluster_period"):
                raise InvalidModelSpec(f"unknown variance component {p!r}")

    @property
    def period_specific(self):
        return self.treatment_effect == "period_specific"

    def covariate_terms(self, available):
        if self.covariates is None:
            return tuple(available) + (CELL_SIZE,)
        return self.covariates

    def to_dict(self):
        d = asdict(self)
        d["covariates"] = None if self.covariates is None else list(self.covariates)
        d["pinned"] = list(self.pinned)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "preset" in d:
            base = preset(d.pop("preset"))
            return replace(base, **d)
        est = d.get("estimator", "GEE_INDEPENDENCE")
        if est in ("GLMM_LAPLACE",) or d.get("family") == "binomial":
            d.setdefault("family", "binomial")
            d.setdefault("link", "logit")
        if est in ("LMM_REML", "GLMM_LAPLACE"):
            d.setdefault("random_effects", "cluster")
        return cls(**d)

    def without_covariates(self):
        return replace(self, covariates=())


def _w(est, fam, link, eff, re):
    return WorkingModelSpec(estimator=est, family=fam, link=link, treatment_effect=eff,
                            random_effects=re)


PRESETS = {
    "W1": _w("GEE_INDEPENDENCE", "gaussian", "identity", "constant", "none"),
    "W2": _w("GEE_INDEPENDENCE", "gaussian", "identity", "period_specific", "none"),
    "W3": _w("LMM_REML", "gaussian", "identity", "constant", "cluster"),
    "W4": _w("LMM_REML", "gaussian", "identity", "period_specific", "cluster"),
    "W5": _w("LMM_REML", "gaussian", "identity", "constant", "cluster_plus_cluster_period"),
    "W6": _w("LMM_REML", "gaussian", "identity", "period_specific", "cluster_plus_cluster_period"),
    "W7": _w("GEE_INDEPENDENCE", "binomial", "logit", "constant", "none"),
    "W8": _w("GEE_INDEPENDENCE", "binomial", "logit", "period_specific", "none"),
    "W9": _w("GLMM_LAPLACE", "binomial", "logit", "constant", "cluster"),
    "W10": _w("GLMM_LAPLACE", "binomial", "logit", "period_specific", "cluster"),
    "W11": _w("GLMM_LAPLACE", "binomial", "logit", "constant", "cluster_plus_cluster_period"),
    "W12": _w("GLMM_LAPLACE", "binomial", "logit", "period_specific", "cluster_plus_cluster_period"),
}

ANCOVA_I = WorkingModelSpec(estimator="ANCOVA_WLS", treatment_effect="period_specific")
ANCOVA_III = WorkingModelSpec(estimator="ANCOVA_WLS", treatment_effect="period_specific",
                              interactions=True)


def preset(name) -> WorkingModelSpec:
    key = str(name).strip().upper()
    if key in PRESETS:
        return PRESETS[key]
    if key in ("ANCOVA", "ANCOVA-I", "ANCOVA1"):
        return ANCOVA_I
    if key in ("ANCOVA-III", "ANCOVA3"):
        return ANCOVA_III
    raise InvalidModelSpec(f"unknown working model {name!r}")
