"""Detection of differentially and variably methylated regions.

CpGs are grouped into clusters by genomic distance and co-methylation,
each CpG is scored by ordinary least squares under a shared design, and
runs of associated CpGs become candidate regions scored by a likelihood
ratio. Significance comes from permuting the group labels: null scores
are pooled within cluster-size strata for p-values, and per-permutation
minimum p-values give the family-wise error rate.
"""

__version__ = "0.1.0"

from . import errors
from .assoc import (
    AssociationTable,
    CpGAssociation,
    DesignSummary,
    build_design,
    design_from_arrays,
    fit_all_cpgs,
    fit_arrays,
    levene_transform,
)
from .cluster import (
    AdjacentPairStats,
    Cluster,
    adjacent_pair_stats,
    build_clusters,
    filter_clusters,
    median_adjacent_correlation,
)
from .ingest import (
    AnalysisDataset,
    CpGAnnotation,
    MethylationMatrix,
    PhenotypeTable,
    align,
    beta_to_m,
    load_manifest,
    load_methylation_matrix,
    load_phenotypes,
    to_mvalues,
    write_methylation_matrix,
)
from .segment import (
    ScanResult,
    Segment,
    find_candidates,
    lrt_score,
    scan_dataset,
)
from .significance import (
    NullPool,
    NullScan,
    PermutationPlan,
    RegionResult,
    RunResult,
    fwer,
    make_plan,
    null_scan,
    p_value,
    run_significance,
    stratum_index,
)

__all__ = [
    "__version__",
    "errors",
    "AdjacentPairStats",
    "AnalysisDataset",
    "AssociationTable",
    "Cluster",
    "CpGAnnotation",
    "CpGAssociation",
    "DesignSummary",
    "MethylationMatrix",
    "NullPool",
    "NullScan",
    "PermutationPlan",
    "PhenotypeTable",
    "RegionResult",
    "RunResult",
    "ScanResult",
    "Segment",
    "adjacent_pair_stats",
    "align",
    "beta_to_m",
    "build_clusters",
    "build_design",
    "design_from_arrays",
    "filter_clusters",
    "find_candidates",
    "fit_all_cpgs",
    "fit_arrays",
    "fwer",
    "levene_transform",
    "load_manifest",
    "load_methylation_matrix",
    "load_phenotypes",
    "lrt_score",
    "make_plan",
    "median_adjacent_correlation",
    "null_scan",
    "p_value",
    "run_significance",
    "scan_dataset",
    "stratum_index",
    "to_mvalues",
    "write_methylation_matrix",
]
