"""Candidate segment search and likelihood-ratio scoring.

Within each cluster, CpGs whose |z| reaches ``z_main`` seed candidate
segments; sign is ignored, so a segment may mix hyper- and
hypomethylated CpGs. A single sub-threshold CpG sitting between two
seeds is absorbed when its |z| reaches the softer ``z_bridge``; the
merge chains until stable. Maximal runs of at least ``min_cpgs`` CpGs
become candidate segments, scored by a likelihood ratio contrasting
the CpG-level effect estimates against their precision-weighted mean.

The same span finder and scorer run on observed and permuted fits, so a
permutation that reproduces the observed design reproduces the observed
scores bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import errors
from .assoc import AssociationTable
from .cluster import Cluster


@dataclass(frozen=True)
class Segment:
    """A candidate region: dataset rows start_index..end_index inclusive.

    ``segment_mean`` is the precision-weighted mean of the CpG effect
    estimates (the common-effect MLE), NaN until scored.
    """

    cluster_id: int
    start_index: int
    end_index: int
    segment_mean: float = math.nan
    lrt: float = math.nan
    mode: str = "dmr"

    @property
    def n_cpgs(self) -> int:
        return self.end_index - self.start_index + 1

    @property
    def stop_index(self) -> int:
        """One past end_index, usable as a slice bound."""
        return self.end_index + 1


@dataclass(eq=False)
class ScanResult:
    """Segments sorted by decreasing LRT plus the per-cluster maximum.

    ``cluster_max[j]`` is the best LRT among segments of ``clusters[j]``,
    NaN when the cluster produced no candidate segment.
    """

    segments: list[Segment]
    cluster_max: np.ndarray
    clusters: list[Cluster]


def lrt_score(betas, variances) -> tuple[float, float]:
    """Common-effect MLE and likelihood-ratio statistic for one segment.

    Returns (segment_mean, lrt). ``variances`` are squared standard
    errors. The statistic equals the quadratic form
    b' V^-1 b - (b - m J)' V^-1 (b - m J) with m the precision-weighted
    mean; it is computed here in the algebraically reduced shape
    m^2 * sum(1/v), which avoids cancelling two nearly equal quadratics.
    """
    b = np.asarray(betas, dtype=np.float64)
    v = np.asarray(variances, dtype=np.float64)
    if b.shape != v.shape or b.ndim != 1 or len(b) == 0:
        raise ValueError("betas and variances must be equal-length non-empty 1-d arrays")
    if np.any(v <= 0.0):
        raise errors.NonPositiveVariance("segment variances must be strictly positive")
    if len(b) == 1:
        return float(b[0]), float(b[0] * b[0] / v[0])
    w = 1.0 / v
    sw = float(np.sum(w))
    mean = float(np.sum(b * w)) / sw
    return mean, mean * mean * sw


def cluster_row_codes(clusters: list[Cluster], n_rows: int) -> np.ndarray:
    """Map each dataset row to the ordinal of its cluster in ``clusters``, -1 if none."""
    codes = np.full(n_rows, -1, dtype=np.int32)
    for j, c in enumerate(clusters):
        if c.stop_index > n_rows:
            raise errors.UnknownSegment(
                f"cluster {c.cluster_id} extends past the dataset ({c.stop_index} > {n_rows})"
            )
        codes[c.start_index : c.stop_index] = j
    return codes


def _check_thresholds(z_main: float, z_bridge: float, min_cpgs: int) -> None:
    if z_main <= 0.0:
        raise errors.ConfigError(f"z_main must be positive, got {z_main}")
    if not 0.0 < z_bridge <= z_main:
        raise errors.ConfigError(f"z_bridge must lie in (0, z_main], got {z_bridge}")
    if min_cpgs < 1:
        raise errors.ConfigError(f"min_cpgs must be at least 1, got {min_cpgs}")


def _candidate_spans(
    z: np.ndarray,
    degenerate: np.ndarray,
    codes: np.ndarray,
    z_main: float,
    z_bridge: float,
    min_cpgs: int,
):
    """Vectorised span finder; returns (starts, stops) with stops exclusive."""
    p = len(z)
    eligible = (codes >= 0) & ~degenerate
    absz = np.abs(z)
    hit = eligible & (absz >= z_main)
    extended = hit.copy()
    if p >= 3:
        # a non-hit between two hits of the same cluster is absorbed;
        # two absorbed CpGs are never adjacent (each needs hits on both
        # sides), so a single pass reaches the iterative fixed point
        promote = (
            eligible[1:-1]
            & ~hit[1:-1]
            & (absz[1:-1] >= z_bridge)
            & hit[:-2]
            & hit[2:]
            & (codes[1:-1] == codes[:-2])
            & (codes[1:-1] == codes[2:])
        )
        extended[1:-1] |= promote
    if not extended.any():
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    new_block = np.empty(p, dtype=bool)
    new_block[0] = True
    new_block[1:] = (~extended[:-1]) | (codes[1:] != codes[:-1])
    starts = np.flatnonzero(extended & new_block)
    block_end = np.empty(p, dtype=bool)
    block_end[-1] = True
    block_end[:-1] = (~extended[1:]) | (codes[1:] != codes[:-1])
    stops = np.flatnonzero(extended & block_end) + 1
    keep = (stops - starts) >= min_cpgs
    return starts[keep], stops[keep]


def _score_spans(starts, stops, beta1, variance):
    means = np.empty(len(starts))
    lrts = np.empty(len(starts))
    for i, (a, b) in enumerate(zip(starts, stops)):
        means[i], lrts[i] = lrt_score(beta1[a:b], variance[a:b])
    return means, lrts


def cluster_max_lrt(
    beta1: np.ndarray,
    variance: np.ndarray,
    z: np.ndarray,
    degenerate: np.ndarray,
    codes: np.ndarray,
    n_clusters: int,
    z_main: float,
    z_bridge: float,
    min_cpgs: int,
) -> np.ndarray:
    """Best segment LRT per cluster ordinal; NaN where no segment was found.

    This is the permutation hot path: it skips Segment construction and
    works directly on fit arrays.
    """
    starts, stops = _candidate_spans(z, degenerate, codes, z_main, z_bridge, min_cpgs)
    best = np.full(n_clusters, np.nan)
    if len(starts) == 0:
        return best
    _, lrts = _score_spans(starts, stops, beta1, variance)
    for a, score in zip(starts, lrts):
        j = codes[a]
        if np.isnan(best[j]) or score > best[j]:
            best[j] = score
    return best


def _stats_arrays(stats):
    """Accept an AssociationTable or a bare z vector (no degenerate CpGs)."""
    if isinstance(stats, AssociationTable):
        return stats.z, stats.degenerate
    z = np.asarray(stats, dtype=np.float64)
    return z, np.zeros(len(z), dtype=bool)


def find_candidates(
    cluster: Cluster,
    stats,
    z_main: float = 1.96,
    z_bridge: float = 1.64,
    min_cpgs: int = 2,
) -> list[Segment]:
    """Unscored candidate segments of one cluster, in genomic order.

    ``stats`` is the dataset-wide AssociationTable (or a bare z vector
    covering all dataset rows); only the cluster's rows are searched.
    """
    _check_thresholds(z_main, z_bridge, min_cpgs)
    z, degenerate = _stats_arrays(stats)
    codes = cluster_row_codes([cluster], len(z))
    starts, stops = _candidate_spans(z, degenerate, codes, z_main, z_bridge, min_cpgs)
    return [
        Segment(cluster_id=cluster.cluster_id, start_index=int(a), end_index=int(b) - 1)
        for a, b in zip(starts, stops)
    ]


def scan_dataset(
    dataset,
    clusters: list[Cluster],
    stats: AssociationTable,
    z_main: float = 1.96,
    z_bridge: float = 1.64,
    min_cpgs: int = 2,
    mode: str = "dmr",
) -> ScanResult:
    """Full observed-data scan over all clusters, scored and sorted.

    ``dataset`` fixes the row count; segments come back sorted by
    decreasing LRT (ties broken by cluster id, then start).
    """
    _check_thresholds(z_main, z_bridge, min_cpgs)
    n_rows = dataset.n_cpgs if hasattr(dataset, "n_cpgs") else len(stats)
    if len(stats) != n_rows:
        raise errors.ParseError("statistics do not cover the dataset rows")
    codes = cluster_row_codes(clusters, n_rows)
    variance = stats.se ** 2
    starts, stops = _candidate_spans(
        stats.z, stats.degenerate, codes, z_main, z_bridge, min_cpgs
    )
    means, lrts = _score_spans(starts, stops, stats.beta1, variance)
    best = np.full(len(clusters), np.nan)
    segments = []
    for a, b, mean, score in zip(starts, stops, means, lrts):
        j = int(codes[a])
        segments.append(
            Segment(
                cluster_id=clusters[j].cluster_id,
                start_index=int(a),
                end_index=int(b) - 1,
                segment_mean=float(mean),
                lrt=float(score),
                mode=mode,
            )
        )
        if np.isnan(best[j]) or score > best[j]:
            best[j] = score
    segments.sort(key=lambda s: (-s.lrt, s.cluster_id, s.start_index))
    return ScanResult(segments=segments, cluster_max=best, clusters=clusters)
