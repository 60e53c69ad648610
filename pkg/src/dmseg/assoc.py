"""Per-CpG ordinary least squares under one shared design.

Every CpG is regressed on the same design matrix [1, group, covariates],
so the QR factorisation is computed once and reused across all rows.
The same routine serves the observed fit and the permutation null fits;
only the design changes between them.

For variability analysis the response is first replaced by absolute
deviations from the group median (:func:`levene_transform`), after which
the identical regression machinery applies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors
from .ingest import SCALE_MVALUE, AnalysisDataset, PhenotypeTable

# Residual variances below this are treated as numerically zero; the CpG
# gets z = 0 and is excluded from segment search.
DEGENERATE_VARIANCE = 1e-12


@dataclass(eq=False)
class DesignSummary:
    """A design matrix with its QR factorisation and effect-column metadata.

    ``effect_gram`` is the effect column's diagonal entry of (X'X)^-1,
    so the standard error of the effect is sqrt(sigma2 * effect_gram).
    """

    matrix: np.ndarray
    q: np.ndarray
    r: np.ndarray
    effect_column: int
    column_names: list[str]
    residual_dof: int
    effect_gram: float

    @property
    def n_samples(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_predictors(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class CpGAssociation:
    """Effect estimate for one CpG: group coefficient, its SE, and z = beta1/se."""

    probe_id: str
    beta1: float
    se: float
    z: float
    residual_variance: float
    degenerate: bool


@dataclass(eq=False)
class AssociationTable:
    """Array-backed per-CpG association results, parallel to dataset rows."""

    probe_ids: list[str]
    beta1: np.ndarray
    se: np.ndarray
    z: np.ndarray
    residual_variance: np.ndarray
    degenerate: np.ndarray
    design: DesignSummary

    def __len__(self) -> int:
        return len(self.probe_ids)

    def row(self, i: int) -> CpGAssociation:
        return CpGAssociation(
            probe_id=self.probe_ids[i],
            beta1=float(self.beta1[i]),
            se=float(self.se[i]),
            z=float(self.z[i]),
            residual_variance=float(self.residual_variance[i]),
            degenerate=bool(self.degenerate[i]),
        )

    def __iter__(self):
        return (self.row(i) for i in range(len(self)))


def design_from_arrays(
    group: np.ndarray,
    covariates: np.ndarray,
    covariate_names: list[str] | None = None,
) -> DesignSummary:
    """Assemble [intercept, group, covariates] and factorise it."""
    group = np.asarray(group, dtype=np.float64)
    covariates = np.asarray(covariates, dtype=np.float64)
    if covariates.ndim == 1:
        covariates = covariates.reshape(len(group), -1)
    n = len(group)
    names = ["intercept", "group"] + list(
        covariate_names or [f"cov{j}" for j in range(covariates.shape[1])]
    )
    x = np.column_stack([np.ones(n), group, covariates])
    k = x.shape[1]
    if n - k < 2:
        raise errors.TooFewSamples(
            f"{n} samples leave fewer than 2 residual degrees of freedom "
            f"for {k} design columns"
        )
    q, r = np.linalg.qr(x)
    diag = np.abs(np.diag(r))
    scale = np.abs(r).max()
    if scale == 0.0 or (diag < 1e-10 * scale).any():
        j = int(np.argmin(diag))
        raise errors.RankDeficient(f"design column '{names[j]}' is collinear with the others")
    effect = 1
    e = np.zeros(k)
    e[effect] = 1.0
    w = np.linalg.solve(r.T, e)
    return DesignSummary(
        matrix=x,
        q=q,
        r=r,
        effect_column=effect,
        column_names=names,
        residual_dof=n - k,
        effect_gram=float(w @ w),
    )


def build_design(phenotypes: PhenotypeTable) -> DesignSummary:
    """Design for the observed group assignment."""
    return design_from_arrays(
        phenotypes.group, phenotypes.covariates, list(phenotypes.covariate_names)
    )


def fit_arrays(
    values: np.ndarray,
    design: DesignSummary,
    rowsumsq: np.ndarray | None = None,
):
    """Fit all rows of ``values`` against ``design``.

    Returns (beta1, se, z, residual_variance, degenerate) arrays of
    length ``values.shape[0]``. Pass a precomputed
    ``rowsumsq = (values ** 2).sum(axis=1)`` when fitting the same
    values repeatedly under different designs.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[1] != design.n_samples:
        raise errors.ParseError(
            f"values have {values.shape[1]} columns but design has {design.n_samples} rows"
        )
    if rowsumsq is None:
        rowsumsq = np.einsum("ij,ij->i", values, values)
    yq = values @ design.q
    coef = np.linalg.solve(design.r, yq.T)
    beta1 = coef[design.effect_column].copy()
    fitted = np.einsum("ij,ij->i", yq, yq)
    rss = np.maximum(rowsumsq - fitted, 0.0)
    sigma2 = rss / design.residual_dof
    degenerate = sigma2 < DEGENERATE_VARIANCE
    se = np.sqrt(sigma2 * design.effect_gram)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(degenerate, 0.0, beta1 / se)
    return beta1, se, z, sigma2, degenerate


def fit_all_cpgs(dataset: AnalysisDataset, design: DesignSummary) -> AssociationTable:
    """Observed-fit wrapper around :func:`fit_arrays`, keyed by probe id."""
    beta1, se, z, sigma2, degenerate = fit_arrays(dataset.matrix.values, design)
    return AssociationTable(
        probe_ids=list(dataset.probe_ids),
        beta1=beta1,
        se=se,
        z=z,
        residual_variance=sigma2,
        degenerate=degenerate,
        design=design,
    )


def levene_transform(data, group_labels) -> np.ndarray:
    """Absolute deviation of each value from its group's per-CpG median.

    Regressing this transform on the group indicator turns a mean
    comparison into a spread comparison (medians rather than means, for
    robustness). ``data`` is an AnalysisDataset on the M-value scale or
    a raw M-value matrix; group medians come from ``group_labels``, so
    permuted labels regenerate the medians.
    """
    if isinstance(data, AnalysisDataset):
        if data.matrix.scale != SCALE_MVALUE:
            raise errors.ScaleMismatch(
                "variability transform requires M-values; convert beta input first"
            )
        values = data.matrix.values
    else:
        values = np.asarray(data, dtype=np.float64)
    group = np.asarray(group_labels)
    if len(group) != values.shape[1]:
        raise errors.ParseError("group labels do not match sample count")
    out = np.empty_like(values)
    for g in (0, 1):
        cols = np.flatnonzero(group == g)
        if len(cols) < 2:
            raise errors.SingletonGroup(f"group {g} has {len(cols)} sample(s); need at least 2")
        block = values[:, cols]
        out[:, cols] = np.abs(block - np.median(block, axis=1, keepdims=True))
    return out
