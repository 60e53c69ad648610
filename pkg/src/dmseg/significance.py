"""Permutation-based p-values and family-wise error rates.

The group indicator is permuted (covariates stay attached to their
samples), every permuted design is refit against the methylation
values, and the best segment score per cluster is recorded, or a
zero-count increment when the permuted fit yields no segment there.
Draws are pooled across clusters of similar CpG count, in strata cut at
configurable boundaries, because the null score of a long cluster is
stochastically larger than that of a short one.

For a cluster with observed score T in the stratum pool,

    p = (1 + #{null draws >= T}) / (1 + total draws),

with no-finding draws counting as zeros. The family-wise error rate of
a p-value is the fraction of permutations whose smallest cluster-level
p-value, over all clusters with the same estimator, is at least as
small; clusters without a finding contribute 1 to that minimum.
"""

from __future__ import annotations

import logging
import multiprocessing
import time
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .assoc import (
    AssociationTable,
    build_design,
    design_from_arrays,
    fit_arrays,
    levene_transform,
)
from .cluster import (
    Cluster,
    adjacent_pair_stats,
    build_clusters,
    filter_clusters,
    median_adjacent_correlation,
)
from .ingest import AnalysisDataset, PhenotypeTable, to_mvalues
from .segment import ScanResult, cluster_max_lrt, cluster_row_codes, scan_dataset

logger = logging.getLogger(__name__)

DEFAULT_BOUNDARIES = (10, 20, 40)

MODE_DMR = "dmr"
MODE_VMR = "vmr"
MODES = (MODE_DMR, MODE_VMR)


def check_boundaries(boundaries) -> tuple[int, ...]:
    """Validate stratum cut points: strictly increasing positive integers."""
    out = tuple(int(b) for b in boundaries)
    if len(out) == 0:
        raise errors.ConfigError("at least one stratum boundary is required")
    if out[0] < 1 or any(b >= c for b, c in zip(out, out[1:])):
        raise errors.ConfigError(
            f"stratum boundaries must be strictly increasing and positive: {out}"
        )
    return out


def stratum_index(n_cpgs: int, boundaries) -> int:
    """Stratum ordinal of a cluster with ``n_cpgs`` CpGs.

    Boundaries (b1, .., bk) cut the sizes into (0, b1], (b1, b2], ..,
    (bk, inf); the ordinal indexes those intervals left to right.
    """
    if n_cpgs < 1:
        raise errors.ConfigError(f"cluster size must be positive, got {n_cpgs}")
    return int(np.searchsorted(np.asarray(boundaries), n_cpgs, side="left"))


@dataclass(eq=False)
class PermutationPlan:
    """Frozen sample orderings, one row per permutation.

    Row ``i`` comes from a counter RNG keyed by (master_seed, i), so any
    subset of rows regenerates independently of the others and the plan
    is identical on any machine and for any worker count.
    """

    master_seed: int
    n_samples: int
    orderings: np.ndarray

    def __post_init__(self):
        self.orderings = np.asarray(self.orderings)
        if self.orderings.ndim != 2 or self.orderings.shape[1] != self.n_samples:
            raise errors.InvalidPlan("orderings must be (n_permutations, n_samples)")
        if self.n_permutations < 1:
            raise errors.InvalidPlan("a plan needs at least one permutation")
        expected = np.arange(self.n_samples)
        if not (np.sort(self.orderings, axis=1) == expected).all():
            raise errors.InvalidPlan("every ordering row must be a permutation of 0..n-1")

    @property
    def n_permutations(self) -> int:
        return self.orderings.shape[0]


def make_plan(phenotypes, n_permutations: int, seed: int) -> PermutationPlan:
    """Generate orderings for ``n_permutations`` permuted group vectors.

    ``phenotypes`` may be a PhenotypeTable or just the sample count.
    """
    if isinstance(phenotypes, PhenotypeTable):
        n_samples = phenotypes.n_samples
    else:
        n_samples = int(phenotypes)
    if n_samples < 2:
        raise errors.ConfigError(f"need at least 2 samples, got {n_samples}")
    if n_permutations < 1:
        raise errors.InvalidPlan(f"need at least 1 permutation, got {n_permutations}")
    if seed < 0:
        raise errors.ConfigError(f"seed must be non-negative, got {seed}")
    orderings = np.empty((n_permutations, n_samples), dtype=np.int64)
    for i in range(n_permutations):
        rng = np.random.Generator(np.random.Philox(key=[seed, i]))
        orderings[i] = rng.permutation(n_samples)
    return PermutationPlan(master_seed=seed, n_samples=n_samples, orderings=orderings)


@dataclass(eq=False)
class NullPool:
    """Null draws of one cluster-size stratum.

    ``null_lrts`` holds the strictly positive draws, sorted ascending;
    ``zero_count`` counts the (cluster x permutation) draws with no
    segment or a zero score. The stratum covers cluster sizes in
    (stratum_low, stratum_high], with ``stratum_high=None`` unbounded.
    """

    stratum_low: int
    stratum_high: int | None
    null_lrts: np.ndarray
    zero_count: int

    @property
    def total_draws(self) -> int:
        return len(self.null_lrts) + self.zero_count

    def count_ge(self, value: float) -> int:
        """Draws >= value, zero-count draws included at value 0."""
        ge = len(self.null_lrts) - int(np.searchsorted(self.null_lrts, value, side="left"))
        if value <= 0.0:
            ge += self.zero_count
        return ge


def p_value(observed_lrt: float, pool: NullPool) -> float:
    """Pooled permutation p-value of one observed cluster score."""
    if pool.total_draws == 0:
        raise errors.EmptyPool(
            f"stratum ({pool.stratum_low}, {pool.stratum_high}] received no null draws"
        )
    return (1.0 + pool.count_ge(observed_lrt)) / (1.0 + pool.total_draws)


def fwer(p_values, per_permutation_min_p) -> np.ndarray:
    """Fraction of permutations whose minimum cluster p-value is <= each p."""
    minp = np.sort(np.asarray(per_permutation_min_p, dtype=np.float64))
    if len(minp) == 0:
        raise errors.EmptyPool("no permutation minima available")
    ps = np.asarray(p_values, dtype=np.float64)
    counts = np.searchsorted(minp, ps, side="right")
    return counts / len(minp)


@dataclass(eq=False)
class NullScan:
    """Everything the permutation pass produced.

    ``draws[i, j]`` is permutation i's best segment score in cluster j
    (NaN when none was found). ``pools`` are the per-stratum draw pools
    and ``min_p`` the per-permutation minimum stratified p-value used
    for the family-wise error rate.
    """

    draws: np.ndarray
    strata: np.ndarray
    boundaries: tuple[int, ...]
    pools: list[NullPool] = field(init=False)
    min_p: np.ndarray = field(init=False)

    def __post_init__(self):
        self.boundaries = check_boundaries(self.boundaries)
        if self.draws.ndim != 2 or len(self.strata) != self.draws.shape[1]:
            raise errors.InvalidPlan("draw matrix and stratum assignment disagree")
        n_strata = len(self.boundaries) + 1
        b = self.draws.shape[0]
        self.pools = []
        minp = np.ones(b)
        for s in range(n_strata):
            low = 0 if s == 0 else self.boundaries[s - 1]
            high = self.boundaries[s] if s < len(self.boundaries) else None
            cols = np.flatnonzero(self.strata == s)
            block = self.draws[:, cols]
            found = np.isfinite(block) & (block > 0.0)
            values = block[found]
            pool = NullPool(
                stratum_low=low,
                stratum_high=high,
                null_lrts=np.sort(values),
                zero_count=int(block.size - values.size),
            )
            self.pools.append(pool)
            if block.size == 0:
                continue
            # each draw's own p-value against its stratum pool (self-inclusive)
            ge = len(pool.null_lrts) - np.searchsorted(pool.null_lrts, values, side="left")
            pb = np.ones_like(block)
            pb[found] = (1.0 + ge) / (1.0 + pool.total_draws)
            minp = np.minimum(minp, pb.min(axis=1))
        self.min_p = minp

    @property
    def n_permutations(self) -> int:
        return self.draws.shape[0]

    def pool_for_size(self, n_cpgs: int) -> NullPool:
        return self.pools[stratum_index(n_cpgs, self.boundaries)]


# state handed to forked workers; populated only around the worker pool
_CHUNK_STATE: dict = {}


def _null_chunk(bounds) -> tuple[int, np.ndarray]:
    start, stop = bounds
    s = _CHUNK_STATE
    values = s["values"]
    group = s["group"]
    covariates = s["covariates"]
    orderings = s["orderings"]
    codes = s["codes"]
    rowsumsq = s["rowsumsq"]
    n_clusters = s["n_clusters"]
    vmr = s["mode"] == MODE_VMR
    out = np.empty((stop - start, n_clusters))
    for i in range(start, stop):
        order = orderings[i]
        permuted = group[order]
        design = design_from_arrays(permuted, covariates)
        if vmr:
            fit_input = levene_transform(values, permuted)
            est, se, z, _, degenerate = fit_arrays(fit_input, design)
        else:
            est, se, z, _, degenerate = fit_arrays(values, design, rowsumsq)
        out[i - start] = cluster_max_lrt(
            est,
            se ** 2,
            z,
            degenerate,
            codes,
            n_clusters,
            s["z_main"],
            s["z_bridge"],
            s["min_cpgs"],
        )
    return start, out


def null_scan(
    values: np.ndarray,
    group: np.ndarray,
    covariates: np.ndarray,
    clusters: list[Cluster],
    plan: PermutationPlan,
    mode: str = MODE_DMR,
    z_main: float = 1.96,
    z_bridge: float = 1.64,
    min_cpgs: int = 2,
    boundaries=DEFAULT_BOUNDARIES,
    threads: int = 1,
) -> NullScan:
    """Refit every permuted design and collect per-cluster best scores.

    For ``mode="vmr"`` pass the untransformed M-values: the absolute
    deviations from group medians are recomputed under each permuted
    labeling, exactly as the observed fit computes them from the
    observed labeling. Work is split into contiguous permutation-index
    chunks across forked processes and merged by index, so the result
    does not depend on the thread count.
    """
    values = np.asarray(values, dtype=np.float64)
    if mode not in MODES:
        raise errors.ConfigError(f"unknown mode '{mode}'; expected one of {MODES}")
    if plan.n_samples != values.shape[1]:
        raise errors.InvalidPlan(
            f"plan is for {plan.n_samples} samples but values have {values.shape[1]} columns"
        )
    boundaries = check_boundaries(boundaries)
    if threads < 1:
        raise errors.ConfigError(f"threads must be at least 1, got {threads}")
    codes = cluster_row_codes(clusters, values.shape[0])
    strata = np.array(
        [stratum_index(c.n_cpgs, boundaries) for c in clusters], dtype=np.int8
    )
    b = plan.n_permutations
    state = {
        "values": values,
        "group": np.asarray(group),
        "covariates": np.asarray(covariates, dtype=np.float64),
        "orderings": plan.orderings,
        "codes": codes,
        "rowsumsq": np.einsum("ij,ij->i", values, values),
        "n_clusters": len(clusters),
        "mode": mode,
        "z_main": z_main,
        "z_bridge": z_bridge,
        "min_cpgs": min_cpgs,
    }
    n_workers = min(threads, b)
    edges = np.linspace(0, b, n_workers + 1).astype(int)
    chunks = [(int(a), int(c)) for a, c in zip(edges[:-1], edges[1:]) if c > a]
    draws = np.empty((b, len(clusters)))
    global _CHUNK_STATE
    _CHUNK_STATE = state
    try:
        if n_workers == 1:
            parts = [_null_chunk(chunks[0])]
        else:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(processes=n_workers) as worker_pool:
                parts = worker_pool.map(_null_chunk, chunks)
    finally:
        _CHUNK_STATE = {}
    for start, block in parts:
        draws[start : start + block.shape[0]] = block
    return NullScan(draws=draws, strata=strata, boundaries=boundaries)


@dataclass(frozen=True)
class RegionResult:
    """One reported segment with its cluster-level significance.

    ``stratum_total_draws`` is the size of the null pool the p-value was
    computed against, which fixes the p-value's resolution floor.
    """

    rank: int
    mode: str
    chromosome: str
    start_probe: str
    end_probe: str
    start_pos: int
    end_pos: int
    n_cpgs: int
    segment_mean: float
    lrt: float
    p_value: float
    fwer: float
    cluster_id: int
    stratum_total_draws: int


@dataclass(eq=False)
class RunResult:
    """Full per-run record: reported regions plus the intermediate objects."""

    mode: str
    regions: list[RegionResult]
    clusters: list[Cluster]
    used_clusters: list[Cluster]
    assoc: AssociationTable
    scan: ScanResult
    null: NullScan | None
    plan: PermutationPlan | None
    corr_min: float


def run_significance(
    dataset: AnalysisDataset,
    mode: str = MODE_DMR,
    max_gap_bp: int = 500,
    corr_min: float | None = 0.6,
    z_main: float = 1.96,
    z_bridge: float = 1.64,
    min_cpgs: int = 2,
    n_permutations: int = 500,
    seed: int = 0,
    boundaries=DEFAULT_BOUNDARIES,
    threads: int = 1,
) -> RunResult:
    """End-to-end analysis: cluster, fit, scan, permute, attach p and FWER.

    Pass ``corr_min=None`` to use the median adjacent-pair correlation.
    In ``vmr`` mode beta values are mapped to M-values and the fits run
    on absolute deviations from group medians, recomputed under every
    permuted labeling. Permutations are skipped entirely when the
    observed scan finds no candidate segment.
    """
    if mode not in MODES:
        raise errors.ConfigError(f"unknown mode '{mode}'; expected one of {MODES}")
    boundaries = check_boundaries(boundaries)

    phase = time.perf_counter()
    pair_stats = adjacent_pair_stats(dataset)
    if corr_min is None:
        corr_min = median_adjacent_correlation(pair_stats, max_gap_bp)
        logger.info("corr_min from median distance-joined pair correlation: %.6f", corr_min)
    clusters = build_clusters(
        dataset, pair_stats, max_gap_bp=max_gap_bp, corr_min=corr_min
    )
    used = filter_clusters(clusters, 2)
    logger.info(
        "clusters: %d built, %d with at least 2 CpGs (%.2fs)",
        len(clusters),
        len(used),
        time.perf_counter() - phase,
    )

    phase = time.perf_counter()
    if mode == MODE_VMR:
        base_values = to_mvalues(dataset).matrix.values
        fit_values = levene_transform(base_values, dataset.phenotypes.group)
    else:
        base_values = dataset.matrix.values
        fit_values = base_values

    design = build_design(dataset.phenotypes)
    beta1, se, z, sigma2, degenerate = fit_arrays(fit_values, design)
    assoc_table = AssociationTable(
        probe_ids=list(dataset.probe_ids),
        beta1=beta1,
        se=se,
        z=z,
        residual_variance=sigma2,
        degenerate=degenerate,
        design=design,
    )
    scan = scan_dataset(
        dataset, used, assoc_table, z_main=z_main, z_bridge=z_bridge, min_cpgs=min_cpgs, mode=mode
    )
    logger.info(
        "observed scan: %d candidate segments (%.2fs)",
        len(scan.segments),
        time.perf_counter() - phase,
    )

    if not scan.segments:
        return RunResult(
            mode=mode,
            regions=[],
            clusters=clusters,
            used_clusters=used,
            assoc=assoc_table,
            scan=scan,
            null=None,
            plan=None,
            corr_min=float(corr_min),
        )

    phase = time.perf_counter()
    plan = make_plan(dataset.phenotypes, n_permutations, seed)
    null = null_scan(
        base_values,
        dataset.phenotypes.group,
        dataset.phenotypes.covariates,
        used,
        plan,
        mode=mode,
        z_main=z_main,
        z_bridge=z_bridge,
        min_cpgs=min_cpgs,
        boundaries=boundaries,
        threads=threads,
    )
    logger.info(
        "%d permutations on %d threads (%.2fs)",
        n_permutations,
        threads,
        time.perf_counter() - phase,
    )

    cluster_p: dict[int, float] = {}
    pool_total: dict[int, int] = {}
    for j, c in enumerate(used):
        best = scan.cluster_max[j]
        if np.isfinite(best):
            pool = null.pool_for_size(c.n_cpgs)
            cluster_p[c.cluster_id] = p_value(float(best), pool)
            pool_total[c.cluster_id] = pool.total_draws

    annotations = dataset.annotations
    rows = []
    for seg in scan.segments:
        p = cluster_p[seg.cluster_id]
        fw = float(fwer([p], null.min_p)[0])
        rows.append((seg, p, fw))
    rows.sort(
        key=lambda t: (
            t[2],
            t[1],
            -t[0].lrt,
            annotations[t[0].start_index].chromosome,
            annotations[t[0].start_index].position,
        )
    )
    regions = []
    for rank, (seg, p, fw) in enumerate(rows, start=1):
        first = annotations[seg.start_index]
        last = annotations[seg.end_index]
        regions.append(
            RegionResult(
                rank=rank,
                mode=mode,
                chromosome=first.chromosome,
                start_probe=first.probe_id,
                end_probe=last.probe_id,
                start_pos=first.position,
                end_pos=last.position,
                n_cpgs=seg.n_cpgs,
                segment_mean=seg.segment_mean,
                lrt=seg.lrt,
                p_value=p,
                fwer=fw,
                cluster_id=seg.cluster_id,
                stratum_total_draws=pool_total[seg.cluster_id],
            )
        )
    return RunResult(
        mode=mode,
        regions=regions,
        clusters=clusters,
        used_clusters=used,
        assoc=assoc_table,
        scan=scan,
        null=null,
        plan=plan,
        corr_min=float(corr_min),
    )
