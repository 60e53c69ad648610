"""Loading, validation, and alignment of the three input tables.

The analysis operates on one object, :class:`AnalysisDataset`, built by
:func:`align` from a methylation matrix (CpGs x samples), a phenotype
table (group indicator plus optional numeric covariates), and a CpG
manifest (probe coordinates). All validation happens at construction;
downstream modules assume the invariants hold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd

from . import errors

logger = logging.getLogger(__name__)

SCALE_BETA = "beta"
SCALE_MVALUE = "mvalue"
SCALES = (SCALE_BETA, SCALE_MVALUE)


def _separator(path: str) -> str:
    lower = str(path).lower()
    if lower.endswith(".tsv") or lower.endswith(".tsv.gz"):
        return "\t"
    if lower.endswith(".csv") or lower.endswith(".csv.gz"):
        return ","
    raise errors.ParseError(f"cannot infer delimiter from extension of '{path}' (expected .tsv or .csv)")


def _first_duplicate(ids) -> str | None:
    seen = set()
    for x in ids:
        if x in seen:
            return x
        seen.add(x)
    return None


@dataclass(frozen=True)
class CpGAnnotation:
    """One probe's identity and genomic coordinate (1-based position)."""

    probe_id: str
    chromosome: str
    position: int


@dataclass(eq=False)
class PhenotypeTable:
    """Sample-level group indicator and numeric covariates.

    ``group`` is coded 0/1; ``group_labels[g]`` is the original label for
    code ``g``. Covariates are stored as an (n_samples, n_covariates)
    float array (possibly with zero columns).
    """

    sample_ids: list[str]
    group: np.ndarray
    covariates: np.ndarray
    covariate_names: list[str]
    group_labels: tuple[str, str]

    def __post_init__(self):
        self.group = np.asarray(self.group, dtype=np.int8)
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates.reshape(len(self.sample_ids), -1)
        dup = _first_duplicate(self.sample_ids)
        if dup is not None:
            raise errors.DuplicateId(f"duplicate sample id '{dup}'")
        if len(self.group) != len(self.sample_ids):
            raise errors.ParseError("group vector length does not match sample ids")
        values = set(np.unique(self.group).tolist())
        if not values <= {0, 1} or len(values) != 2:
            raise errors.NonBinaryGroup("group indicator must contain both 0 and 1")
        for g in (0, 1):
            count = int((self.group == g).sum())
            if count < 2:
                raise errors.SingletonGroup(
                    f"group '{self.group_labels[g]}' has {count} sample(s); at least 2 required"
                )
        if self.covariates.shape[0] != len(self.sample_ids):
            raise errors.ParseError("covariate row count does not match sample ids")
        if np.isnan(self.covariates).any():
            j = int(np.argwhere(np.isnan(self.covariates))[0][1])
            raise errors.MissingValue(f"covariate '{self.covariate_names[j]}' has missing values")
        for j, name in enumerate(self.covariate_names):
            col = self.covariates[:, j]
            if np.all(col == col[0]):
                raise errors.ConstantColumn(f"covariate '{name}' is constant")

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)


@dataclass(eq=False)
class MethylationMatrix:
    """Methylation values, rows = CpGs, columns = samples.

    ``scale`` is ``"beta"`` (values strictly inside (0,1)) or ``"mvalue"``
    (any finite real).
    """

    values: np.ndarray
    scale: str
    row_ids: list[str]
    col_ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.scale not in SCALES:
            raise errors.ConfigError(f"unknown scale '{self.scale}'; expected one of {SCALES}")
        if self.values.ndim != 2:
            raise errors.ParseError("matrix values must be 2-dimensional")
        p, n = self.values.shape
        if p != len(self.row_ids) or n != len(self.col_ids):
            raise errors.ParseError("matrix shape does not match row/column ids")
        dup = _first_duplicate(self.row_ids)
        if dup is not None:
            raise errors.DuplicateId(f"duplicate probe id '{dup}'")
        dup = _first_duplicate(self.col_ids)
        if dup is not None:
            raise errors.DuplicateId(f"duplicate sample id '{dup}'")
        bad = ~np.isfinite(self.values)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            if np.isnan(self.values[i, j]):
                raise errors.MissingValue(
                    f"missing value at probe '{self.row_ids[i]}', sample '{self.col_ids[j]}'"
                )
            raise errors.OutOfRange(
                f"non-finite value at probe '{self.row_ids[i]}', sample '{self.col_ids[j]}'"
            )
        if self.scale == SCALE_BETA:
            bad = (self.values <= 0.0) | (self.values >= 1.0)
            if bad.any():
                i, j = np.argwhere(bad)[0]
                raise errors.OutOfRange(
                    f"beta value {self.values[i, j]!r} at probe '{self.row_ids[i]}', "
                    f"sample '{self.col_ids[j]}' is outside (0,1)"
                )

    @property
    def n_cpgs(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]


@dataclass(eq=False)
class AnalysisDataset:
    """Aligned matrix + annotations + phenotypes; rows in coordinate order.

    Annotations parallel the matrix rows, phenotypes parallel the matrix
    columns; construction via :func:`align` guarantees the ordering
    invariants so this class only re-checks them.
    """

    matrix: MethylationMatrix
    annotations: list[CpGAnnotation]
    phenotypes: PhenotypeTable

    def __post_init__(self):
        if len(self.annotations) != self.matrix.n_cpgs:
            raise errors.ParseError("annotation count does not match matrix rows")
        if self.phenotypes.n_samples != self.matrix.n_samples:
            raise errors.ParseError("phenotype count does not match matrix columns")
        for ann, rid in zip(self.annotations, self.matrix.row_ids):
            if ann.probe_id != rid:
                raise errors.ParseError(f"annotation order mismatch at probe '{rid}'")
        if self.phenotypes.sample_ids != self.matrix.col_ids:
            raise errors.ParseError("sample order mismatch between matrix and phenotypes")
        prev = None
        for ann in self.annotations:
            key = (ann.chromosome, ann.position)
            if prev is not None:
                if key[0] == prev[0]:
                    if key[1] == prev[1]:
                        raise errors.DuplicatePosition(
                            f"duplicate position {key[0]}:{key[1]}"
                        )
                    if key[1] < prev[1]:
                        raise errors.ParseError(
                            f"rows not sorted by position at {key[0]}:{key[1]}"
                        )
                elif key[0] < prev[0]:
                    raise errors.ParseError(f"rows not sorted by chromosome at {key[0]}")
            prev = key

    @cached_property
    def chromosomes(self) -> np.ndarray:
        return np.array([a.chromosome for a in self.annotations])

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.annotations], dtype=np.int64)

    @cached_property
    def probe_ids(self) -> list[str]:
        return [a.probe_id for a in self.annotations]

    @property
    def n_cpgs(self) -> int:
        return self.matrix.n_cpgs

    @property
    def n_samples(self) -> int:
        return self.matrix.n_samples


def load_methylation_matrix(path: str, scale: str) -> MethylationMatrix:
    """Read a TSV/CSV methylation matrix (header = sample ids, first column = probe ids)."""
    sep = _separator(path)
    try:
        # the default float parser can be off by one ulp; values must
        # survive a write/read cycle bit for bit
        frame = pd.read_csv(path, sep=sep, index_col=0, header=0, float_precision="round_trip")
    except (pd.errors.ParserError, OSError, ValueError) as exc:
        raise errors.ParseError(f"cannot read matrix file '{path}': {exc}") from None
    if frame.shape[1] == 0:
        raise errors.ParseError(f"matrix file '{path}' has no sample columns")
    for col in frame.columns:
        if frame[col].dtype == object:
            converted = pd.to_numeric(frame[col], errors="coerce")
            bad = converted.isna() & frame[col].notna()
            if bad.any():
                row = bad.idxmax()
                raise errors.ParseError(
                    f"non-numeric value {frame.loc[row, col]!r} in matrix",
                    row=str(row),
                    column=str(col),
                )
            frame[col] = converted
    return MethylationMatrix(
        values=frame.to_numpy(dtype=np.float64),
        scale=scale,
        row_ids=[str(x) for x in frame.index],
        col_ids=[str(x) for x in frame.columns],
    )


def write_methylation_matrix(matrix: MethylationMatrix, path: str) -> None:
    """Write a matrix back to TSV/CSV with shortest round-trip float formatting."""
    sep = _separator(path)
    with open(path, "w", encoding="utf-8") as out:
        out.write("probe_id" + sep + sep.join(matrix.col_ids) + "\n")
        for rid, row in zip(matrix.row_ids, matrix.values):
            out.write(rid + sep + sep.join(repr(float(v)) for v in row) + "\n")


def load_phenotypes(
    path: str,
    group_column: str,
    covariate_columns: list[str] | None = None,
    case_label: str | None = None,
) -> PhenotypeTable:
    """Read the phenotype table and recode the group column to {0,1}.

    By default the lexicographically smaller group label is coded 0; pass
    ``case_label`` to force that label to 1 instead.
    """
    covariate_columns = list(covariate_columns or [])
    sep = _separator(path)
    try:
        frame = pd.read_csv(path, sep=sep, header=0, dtype={0: str}, float_precision="round_trip")
    except (pd.errors.ParserError, OSError, ValueError) as exc:
        raise errors.ParseError(f"cannot read phenotype file '{path}': {exc}") from None
    if frame.shape[1] < 2:
        raise errors.ParseError(f"phenotype file '{path}' needs a sample id column plus data columns")
    sample_col = frame.columns[0]
    for col in [group_column, *covariate_columns]:
        if col not in frame.columns:
            raise errors.MissingColumn(f"column '{col}' not found in phenotype file")
    sample_ids = [str(x) for x in frame[sample_col]]
    raw_group = frame[group_column].astype(str)
    levels = sorted(raw_group.unique())
    if len(levels) != 2:
        raise errors.NonBinaryGroup(
            f"group column '{group_column}' has {len(levels)} distinct values: {levels}"
        )
    if case_label is not None:
        if case_label not in levels:
            raise errors.UnknownLabel(f"case label '{case_label}' not among group values {levels}")
        labels = (next(l for l in levels if l != case_label), case_label)
    else:
        labels = (levels[0], levels[1])
    logger.info("group recoding: '%s' -> 0, '%s' -> 1", labels[0], labels[1])
    group = (raw_group == labels[1]).to_numpy(dtype=np.int8)
    cov = np.empty((len(sample_ids), len(covariate_columns)), dtype=np.float64)
    for j, col in enumerate(covariate_columns):
        converted = pd.to_numeric(frame[col], errors="coerce")
        bad = converted.isna() & frame[col].notna()
        if bad.any():
            raise errors.ParseError(
                f"covariate '{col}' contains non-numeric value {frame.loc[bad.idxmax(), col]!r}",
                column=col,
            )
        cov[:, j] = converted.to_numpy(dtype=np.float64)
    return PhenotypeTable(
        sample_ids=sample_ids,
        group=group,
        covariates=cov,
        covariate_names=covariate_columns,
        group_labels=labels,
    )


def load_manifest(path: str) -> list[CpGAnnotation]:
    """Read the CpG manifest (probe_id, chromosome, position; case-insensitive headers)."""
    sep = _separator(path)
    try:
        frame = pd.read_csv(path, sep=sep, header=0)
    except (pd.errors.ParserError, OSError, ValueError) as exc:
        raise errors.ParseError(f"cannot read manifest file '{path}': {exc}") from None
    lookup = {str(c).lower(): c for c in frame.columns}
    missing = [name for name in ("probe_id", "chromosome", "position") if name not in lookup]
    if missing:
        raise errors.MissingColumn(f"manifest is missing column(s): {missing}")
    probe_ids = frame[lookup["probe_id"]].astype(str)
    dup = _first_duplicate(probe_ids)
    if dup is not None:
        raise errors.DuplicateId(f"duplicate probe id '{dup}' in manifest")
    positions = pd.to_numeric(frame[lookup["position"]], errors="coerce")
    if positions.isna().any():
        row = positions.isna().idxmax()
        raise errors.ParseError("non-numeric manifest position", row=str(probe_ids[row]))
    if (positions != positions.astype(np.int64)).any():
        row = (positions != positions.astype(np.int64)).idxmax()
        raise errors.ParseError("manifest position is not an integer", row=str(probe_ids[row]))
    annotations = []
    for pid, chrom, pos in zip(probe_ids, frame[lookup["chromosome"]].astype(str), positions):
        pos = int(pos)
        if pos <= 0:
            raise errors.NonPositivePosition(f"probe '{pid}' has non-positive position {pos}")
        annotations.append(CpGAnnotation(probe_id=pid, chromosome=chrom, position=pos))
    return annotations


def align(
    matrix: MethylationMatrix,
    manifest: list[CpGAnnotation],
    phenotypes: PhenotypeTable,
) -> AnalysisDataset:
    """Sort matrix rows by genomic coordinate and columns by phenotype order.

    Manifest probes absent from the matrix are dropped (count logged);
    matrix probes absent from the manifest and phenotype samples absent
    from the matrix are errors.
    """
    by_probe = {}
    for ann in manifest:
        if ann.probe_id in by_probe:
            raise errors.DuplicateId(f"duplicate probe id '{ann.probe_id}' in manifest")
        by_probe[ann.probe_id] = ann
    row_index = {rid: i for i, rid in enumerate(matrix.row_ids)}
    for rid in matrix.row_ids:
        if rid not in by_probe:
            raise errors.UnknownProbe(f"matrix probe '{rid}' not present in manifest")
    dropped = len(by_probe) - len(row_index)
    if dropped:
        logger.info("manifest probes absent from matrix: %d dropped", dropped)

    kept = [by_probe[rid] for rid in matrix.row_ids]
    order = sorted(range(len(kept)), key=lambda i: (kept[i].chromosome, kept[i].position))
    annotations = [kept[i] for i in order]
    for a, b in zip(annotations, annotations[1:]):
        if a.chromosome == b.chromosome and a.position == b.position:
            raise errors.DuplicatePosition(
                f"probes '{a.probe_id}' and '{b.probe_id}' share {a.chromosome}:{a.position}"
            )

    col_index = {cid: j for j, cid in enumerate(matrix.col_ids)}
    for sid in phenotypes.sample_ids:
        if sid not in col_index:
            raise errors.MissingSample(f"phenotype sample '{sid}' not present in matrix")
    pheno_ids = set(phenotypes.sample_ids)
    for cid in matrix.col_ids:
        if cid not in pheno_ids:
            raise errors.UnknownSample(f"matrix sample '{cid}' not present in phenotype table")
    col_order = [col_index[sid] for sid in phenotypes.sample_ids]

    values = matrix.values[np.asarray(order)[:, None], np.asarray(col_order)[None, :]]
    aligned = MethylationMatrix(
        values=values,
        scale=matrix.scale,
        row_ids=[a.probe_id for a in annotations],
        col_ids=list(phenotypes.sample_ids),
    )
    return AnalysisDataset(matrix=aligned, annotations=annotations, phenotypes=phenotypes)


def beta_to_m(beta):
    """Map beta values in (0,1) to M-values via log2(b / (1-b)); elementwise on arrays."""
    arr = np.asarray(beta, dtype=np.float64)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise errors.OutOfRange("beta values must lie strictly inside (0,1)")
    result = np.log2(arr / (1.0 - arr))
    if np.ndim(beta) == 0:
        return float(result)
    return result


def to_mvalues(dataset: AnalysisDataset) -> AnalysisDataset:
    """Return the dataset on the M-value scale (identity if already there)."""
    if dataset.matrix.scale == SCALE_MVALUE:
        return dataset
    converted = MethylationMatrix(
        values=beta_to_m(dataset.matrix.values),
        scale=SCALE_MVALUE,
        row_ids=list(dataset.matrix.row_ids),
        col_ids=list(dataset.matrix.col_ids),
    )
    return AnalysisDataset(
        matrix=converted, annotations=dataset.annotations, phenotypes=dataset.phenotypes
    )
