"""Grouping neighbouring CpGs into clusters.

Two consecutive CpGs on the same chromosome are joined when they are
close (gap strictly below ``max_gap_bp``) or co-methylated (Pearson
correlation strictly above ``corr_min``). Cluster ids are assigned in
genomic order starting at 0 and are never renumbered, so ids stay
stable across the size filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors
from .ingest import AnalysisDataset


@dataclass(eq=False)
class AdjacentPairStats:
    """Per adjacent row pair (i, i+1): chromosome adjacency, gap, correlation.

    Pairs spanning a chromosome boundary have ``same_chromosome`` False
    and undefined gap/correlation. A pair where either row is constant
    across samples gets correlation 0 and the ``either_constant`` flag,
    so it can still join by distance but never by correlation.
    """

    same_chromosome: np.ndarray
    gap_bp: np.ndarray
    correlation: np.ndarray
    either_constant: np.ndarray

    @property
    def n_pairs(self) -> int:
        return len(self.gap_bp)


@dataclass(frozen=True)
class Cluster:
    """A run of consecutive dataset rows treated as one candidate region.

    ``correlation_joins`` counts joins inside the cluster made by the
    correlation rule alone (the gap rule failed for that adjacency).
    """

    cluster_id: int
    chromosome: str
    start_index: int
    n_cpgs: int
    correlation_joins: int

    @property
    def stop_index(self) -> int:
        """One past the last row index, usable as a slice bound."""
        return self.start_index + self.n_cpgs

    @property
    def indices(self) -> range:
        return range(self.start_index, self.stop_index)


def adjacent_pair_stats(dataset: AnalysisDataset) -> AdjacentPairStats:
    """Gap and Pearson correlation for every adjacent row pair."""
    values = dataset.matrix.values
    if dataset.n_samples < 3:
        raise errors.TooFewSamples(
            f"pair correlations need at least 3 samples, got {dataset.n_samples}"
        )
    p = values.shape[0]
    if p < 2:
        return AdjacentPairStats(
            same_chromosome=np.empty(0, dtype=bool),
            gap_bp=np.empty(0, dtype=np.int64),
            correlation=np.empty(0),
            either_constant=np.empty(0, dtype=bool),
        )
    chrom = dataset.chromosomes
    pos = dataset.positions
    same = chrom[1:] == chrom[:-1]
    gaps = pos[1:] - pos[:-1]

    constant_row = np.all(values == values[:, :1], axis=1)
    centered = values - values.mean(axis=1, keepdims=True)
    ss = np.einsum("ij,ij->i", centered, centered)
    num = np.einsum("ij,ij->i", centered[1:], centered[:-1])
    either_constant = (constant_row[1:] | constant_row[:-1]) & same
    corr = np.full(p - 1, np.nan)
    defined = same & ~either_constant
    with np.errstate(invalid="ignore", divide="ignore"):
        denom = np.sqrt(ss[1:] * ss[:-1])
        corr[defined] = num[defined] / denom[defined]
    corr[either_constant] = 0.0
    return AdjacentPairStats(
        same_chromosome=same,
        gap_bp=gaps,
        correlation=corr,
        either_constant=either_constant,
    )


def build_clusters(
    dataset: AnalysisDataset,
    pair_stats: AdjacentPairStats | None = None,
    max_gap_bp: int = 500,
    corr_min: float = 0.6,
) -> list[Cluster]:
    """Partition dataset rows into clusters; every row lands in exactly one.

    Rows i and i+1 share a cluster iff they sit on the same chromosome
    and (gap < max_gap_bp or correlation > corr_min), both strict. A
    ``corr_min`` above 1 disables the correlation rule entirely.
    """
    if max_gap_bp <= 0:
        raise errors.ConfigError(f"max_gap_bp must be positive, got {max_gap_bp}")
    if corr_min < -1.0:
        raise errors.ConfigError(f"corr_min below -1 is meaningless, got {corr_min}")
    p = dataset.n_cpgs
    if p == 0:
        return []
    if pair_stats is None:
        pair_stats = adjacent_pair_stats(dataset)
    near = pair_stats.gap_bp < max_gap_bp
    with np.errstate(invalid="ignore"):
        comethylated = pair_stats.correlation > corr_min
    joined = pair_stats.same_chromosome & (near | comethylated)
    corr_only = joined & ~near

    breaks = np.flatnonzero(~joined)
    starts = np.concatenate(([0], breaks + 1))
    stops = np.concatenate((breaks + 1, [p]))
    chrom = dataset.chromosomes
    clusters = []
    for cid, (a, b) in enumerate(zip(starts, stops)):
        clusters.append(
            Cluster(
                cluster_id=cid,
                chromosome=str(chrom[a]),
                start_index=int(a),
                n_cpgs=int(b - a),
                correlation_joins=int(corr_only[a : b - 1].sum()),
            )
        )
    return clusters


def filter_clusters(clusters: list[Cluster], min_size: int = 2) -> list[Cluster]:
    """Drop clusters with fewer than ``min_size`` CpGs; ids are kept as assigned."""
    if min_size < 1:
        raise errors.ConfigError(f"min_size must be at least 1, got {min_size}")
    return [c for c in clusters if c.n_cpgs >= min_size]


def median_adjacent_correlation(
    pair_stats: AdjacentPairStats, max_gap_bp: int = 500
) -> float:
    """Median correlation of pairs inside distance-only clusters.

    This is the data-driven stand-in for corr_min: cluster by the gap
    rule alone, then take the median correlation over the adjacencies
    those clusters contain.
    """
    inside = pair_stats.same_chromosome & (pair_stats.gap_bp < max_gap_bp)
    if not inside.any():
        raise errors.EmptyPool("no adjacent pair joined by the distance rule")
    return float(np.median(pair_stats.correlation[inside]))
