"""Command-line front end.

Subcommands: ``dmr`` and ``vmr`` run the full pipeline and write a
results TSV; ``cluster-stats`` dumps the cluster partition;
``plot-data`` dumps the per-CpG series behind one reported region;
``validate`` re-scans clusters overlapping previously reported regions
in an independent dataset.

Configuration comes from defaults, then a flat key=value config file,
then DMSEG_THREADS (threads only), then command-line flags. The
effective configuration is written next to the results so a run can be
reproduced from it alone; every output file starts with a comment
header carrying the tool version, a hash of the analysis-relevant
configuration, and the seed. Logs go to stderr, data to files, stdout
stays silent.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import sys
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import __version__, errors
from .assoc import build_design, fit_all_cpgs, fit_arrays, levene_transform
from .cluster import adjacent_pair_stats, build_clusters, filter_clusters, median_adjacent_correlation
from .ingest import (
    AnalysisDataset,
    align,
    load_manifest,
    load_methylation_matrix,
    load_phenotypes,
    to_mvalues,
)
from .segment import scan_dataset
from .significance import (
    MODE_DMR,
    MODE_VMR,
    check_boundaries,
    make_plan,
    null_scan,
    p_value,
    run_significance,
)

logger = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "rank",
    "mode",
    "chromosome",
    "start_probe",
    "end_probe",
    "start_pos",
    "end_pos",
    "n_cpgs",
    "segment_mean",
    "lrt",
    "p_value",
    "fwer",
)

# configuration keys whose value cannot change the numbers in the outputs
_HASH_EXCLUDED = {"threads", "out", "cpg_stats"}


@dataclass
class RunConfig:
    """Every user-settable quantity; field names mirror the CLI flags."""

    matrix: str | None = None
    phenotypes: str | None = None
    manifest: str | None = None
    out: str | None = None
    scale: str = "beta"
    group_column: str = "group"
    covariates: tuple[str, ...] = ()
    case_label: str | None = None
    max_gap: int = 500
    corr_min: float = 0.6
    corr_auto: bool = False
    z_main: float = 1.96
    z_bridge: float = 1.64
    min_cpgs: int = 2
    permutations: int = 500
    seed: int = 0
    strata: tuple[int, ...] = (10, 20, 40)
    threads: int = 1
    cpg_stats: str | None = None


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise errors.ConfigError(f"cannot parse boolean from '{text}'")


def _parse_int_list(text: str) -> tuple[int, ...]:
    if not text.strip():
        return ()
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise errors.ConfigError(f"cannot parse integer list from '{text}'") from None


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


_PARSERS = {
    str: lambda s: s if s != "" else None,
    int: int,
    float: float,
    bool: _parse_bool,
}


def _field_kind(field: dataclasses.Field):
    if field.name in ("strata",):
        return "ints"
    if field.name in ("covariates",):
        return "strs"
    if isinstance(field.default, bool):
        return bool
    if isinstance(field.default, int):
        return int
    if isinstance(field.default, float):
        return float
    return str


def _parse_config_value(field: dataclasses.Field, text: str):
    kind = _field_kind(field)
    try:
        if kind == "ints":
            return _parse_int_list(text)
        if kind == "strs":
            return _parse_str_list(text)
        return _PARSERS[kind](text)
    except (ValueError, TypeError):
        raise errors.ConfigError(
            f"cannot parse value '{text}' for config key '{field.name}'"
        ) from None


def _render_config_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def read_config_file(path: str) -> dict:
    """Parse a flat key=value file; '#' starts a comment, blank lines ignored."""
    by_name = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    try:
        with open(path, encoding="utf-8") as handle:
            for lineno, raw in enumerate(handle, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise errors.ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
                key, text = line.split("=", 1)
                key = key.strip()
                if key not in by_name:
                    raise errors.ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
                values[key] = _parse_config_value(by_name[key], text.strip())
    except OSError as exc:
        raise errors.ConfigError(f"cannot read config file '{path}': {exc}") from None
    return values


def effective_config_lines(config: RunConfig) -> list[str]:
    """Canonical serialization: sorted key=value, one per line."""
    pairs = sorted(dataclasses.asdict(config).items())
    return [f"{k}={_render_config_value(v)}" for k, v in pairs]


def config_hash(config: RunConfig) -> str:
    """Hash of the analysis-relevant configuration.

    Thread count and output destinations are excluded: they cannot
    change any computed number, and runs that differ only there must
    produce byte-identical result files.
    """
    lines = [
        line
        for line in effective_config_lines(config)
        if line.split("=", 1)[0] not in _HASH_EXCLUDED
    ]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < DMSEG_THREADS (threads only) < flags."""
    merged = dataclasses.asdict(RunConfig())
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    env_threads = os.environ.get("DMSEG_THREADS")
    if env_threads is not None:
        try:
            merged["threads"] = int(env_threads)
        except ValueError:
            raise errors.ConfigError(
                f"DMSEG_THREADS must be an integer, got '{env_threads}'"
            ) from None
    for field in dataclasses.fields(RunConfig):
        flag_value = getattr(args, field.name, None)
        if flag_value is not None:
            merged[field.name] = flag_value
    config = RunConfig(**merged)
    _check_config(config)
    return config


def _check_config(config: RunConfig) -> None:
    if config.scale not in ("beta", "mvalue"):
        raise errors.ConfigError(f"scale must be beta or mvalue, got '{config.scale}'")
    if config.permutations < 1:
        raise errors.ConfigError(f"permutations must be at least 1, got {config.permutations}")
    if not 0.0 < config.corr_min <= 1.0:
        raise errors.ConfigError(f"corr_min must lie in (0,1], got {config.corr_min}")
    if not 0.0 < config.z_bridge <= config.z_main:
        raise errors.ConfigError(
            f"z_bridge must lie in (0, z_main], got z_bridge={config.z_bridge} z_main={config.z_main}"
        )
    if config.max_gap < 1:
        raise errors.ConfigError(f"max_gap must be at least 1, got {config.max_gap}")
    if config.min_cpgs < 1:
        raise errors.ConfigError(f"min_cpgs must be at least 1, got {config.min_cpgs}")
    if config.threads < 1:
        raise errors.ConfigError(f"threads must be at least 1, got {config.threads}")
    if config.seed < 0:
        raise errors.ConfigError(f"seed must be non-negative, got {config.seed}")
    check_boundaries(config.strata)


def _require(config: RunConfig, *names: str) -> None:
    for name in names:
        if getattr(config, name) is None:
            flag = "--" + name.replace("_", "-")
            raise errors.ConfigError(f"missing required option {flag}")


def _header_lines(config: RunConfig) -> list[str]:
    return [
        f"# dmseg {__version__}",
        f"# config_sha256={config_hash(config)}",
        f"# seed={config.seed}",
    ]


def _write_table(path: str, config: RunConfig, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as out:
        for line in _header_lines(config):
            out.write(line + "\n")
        out.write("\t".join(columns) + "\n")
        for row in rows:
            out.write("\t".join(str(v) for v in row) + "\n")


def _write_effective_config(config: RunConfig) -> str:
    path = os.path.join(config.out, "effective_config.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as out:
        for line in _header_lines(config):
            out.write(line + "\n")
        for line in effective_config_lines(config):
            out.write(line + "\n")
    return path


def _fmt(x: float) -> str:
    return format(float(x), ".6g")


def _fmt_p(p: float, total_draws: int) -> str:
    floor = 1.0 / (1.0 + total_draws)
    if p <= floor * (1.0 + 1e-12):
        return "<" + _fmt(floor)
    return _fmt(p)


def _fmt_fwer(value: float, n_permutations: int) -> str:
    if value == 0.0:
        return "<" + _fmt(1.0 / n_permutations)
    return _fmt(value)


def _load_dataset(config: RunConfig) -> AnalysisDataset:
    _require(config, "matrix", "phenotypes", "manifest")
    started = time.perf_counter()
    manifest = load_manifest(config.manifest)
    phenotypes = load_phenotypes(
        config.phenotypes,
        config.group_column,
        list(config.covariates),
        case_label=config.case_label,
    )
    matrix = load_methylation_matrix(config.matrix, config.scale)
    dataset = align(matrix, manifest, phenotypes)
    logger.info(
        "loaded %d CpGs x %d samples in %.2fs",
        dataset.n_cpgs,
        dataset.n_samples,
        time.perf_counter() - started,
    )
    return dataset


def _ensure_outdir(config: RunConfig) -> None:
    _require(config, "out")
    os.makedirs(config.out, exist_ok=True)


def _write_cpg_stats(config: RunConfig, dataset: AnalysisDataset, assoc_table) -> None:
    rows = (
        (
            pid,
            repr(float(assoc_table.beta1[i])),
            repr(float(assoc_table.se[i])),
            repr(float(assoc_table.z[i])),
            int(assoc_table.degenerate[i]),
        )
        for i, pid in enumerate(dataset.probe_ids)
    )
    _write_table(
        config.cpg_stats, config, ("probe_id", "beta1", "se", "z", "degenerate"), rows
    )
    logger.info("per-CpG statistics written to %s", config.cpg_stats)


def cmd_run(config: RunConfig, mode: str) -> int:
    """Shared body of the dmr and vmr subcommands."""
    _ensure_outdir(config)
    dataset = _load_dataset(config)
    run = run_significance(
        dataset,
        mode=mode,
        max_gap_bp=config.max_gap,
        corr_min=None if config.corr_auto else config.corr_min,
        z_main=config.z_main,
        z_bridge=config.z_bridge,
        min_cpgs=config.min_cpgs,
        n_permutations=config.permutations,
        seed=config.seed,
        boundaries=config.strata,
        threads=config.threads,
    )
    corr_joins = sum(c.correlation_joins for c in run.clusters)
    logger.info(
        "clusters: %d total, %d correlation-only joins, %d after size filter",
        len(run.clusters),
        corr_joins,
        len(run.used_clusters),
    )
    rows = []
    for r in run.regions:
        rows.append(
            (
                r.rank,
                r.mode,
                r.chromosome,
                r.start_probe,
                r.end_probe,
                r.start_pos,
                r.end_pos,
                r.n_cpgs,
                _fmt(r.segment_mean),
                _fmt(r.lrt),
                _fmt_p(r.p_value, r.stratum_total_draws),
                _fmt_fwer(r.fwer, run.null.n_permutations),
            )
        )
    results_path = os.path.join(config.out, "results.tsv")
    _write_table(results_path, config, RESULT_COLUMNS, rows)
    config_path = _write_effective_config(config)
    logger.info("results written to %s (config: %s)", results_path, config_path)
    for r in run.regions[:5]:
        logger.info(
            "top: %s:%d-%d n_cpgs=%d lrt=%s p=%s fwer=%s",
            r.chromosome,
            r.start_pos,
            r.end_pos,
            r.n_cpgs,
            _fmt(r.lrt),
            _fmt(r.p_value),
            _fmt(r.fwer),
        )
    if not run.regions:
        logger.info("no candidate segments found; results file has zero rows")
    if config.cpg_stats:
        _write_cpg_stats(config, dataset, run.assoc)
    return 0


def _clusters_for(config: RunConfig, dataset: AnalysisDataset):
    pair_stats = adjacent_pair_stats(dataset)
    corr_min = config.corr_min
    if config.corr_auto:
        corr_min = median_adjacent_correlation(pair_stats, config.max_gap)
        logger.info("corr_min from median adjacent-pair correlation: %.6f", corr_min)
    clusters = build_clusters(
        dataset, max_gap_bp=config.max_gap, corr_min=corr_min, pair_stats=pair_stats
    )
    return clusters


def cmd_cluster_stats(config: RunConfig) -> int:
    """Write the full cluster partition, one row per cluster, size filter not applied."""
    _ensure_outdir(config)
    dataset = _load_dataset(config)
    clusters = _clusters_for(config, dataset)
    positions = dataset.positions
    rows = (
        (
            c.cluster_id,
            c.chromosome,
            int(positions[c.start_index]),
            int(positions[c.stop_index - 1]),
            c.n_cpgs,
            c.correlation_joins,
        )
        for c in clusters
    )
    path = os.path.join(config.out, "cluster_stats.tsv")
    _write_table(
        path,
        config,
        ("cluster_id", "chromosome", "start_position", "end_position", "n_cpgs", "correlation_joins"),
        rows,
    )
    logger.info("%d clusters written to %s", len(clusters), path)
    return 0


def _read_region_table(path: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, sep="\t", comment="#", header=0)
    except (pd.errors.ParserError, OSError, ValueError) as exc:
        raise errors.ParseError(f"cannot read region file '{path}': {exc}") from None
    lookup = {str(c).lower(): c for c in frame.columns}
    missing = [k for k in ("chromosome", "start_pos", "end_pos") if k not in lookup]
    if missing:
        raise errors.MissingColumn(f"region file is missing column(s): {missing}")
    return frame.rename(columns={lookup[k]: k for k in ("chromosome", "start_pos", "end_pos")})


def cmd_plot_data(config: RunConfig, results_path: str, rank: int) -> int:
    """Dump per-CpG series (group means, difference, z) for one reported region."""
    _ensure_outdir(config)
    table = _read_region_table(results_path)
    if "rank" not in table.columns:
        raise errors.MissingColumn("results file has no 'rank' column")
    match = table[table["rank"] == rank]
    if len(match) == 0:
        raise errors.UnknownSegment(f"no region with rank {rank} in {results_path}")
    row = match.iloc[0]
    dataset = _load_dataset(config)
    index_of = {pid: i for i, pid in enumerate(dataset.probe_ids)}
    for key in ("start_probe", "end_probe"):
        if key not in table.columns:
            raise errors.MissingColumn(f"results file has no '{key}' column")
        if row[key] not in index_of:
            raise errors.UnknownSegment(f"probe '{row[key]}' not present in this dataset")
    start = index_of[row["start_probe"]]
    stop = index_of[row["end_probe"]] + 1
    if stop <= start or dataset.annotations[start].chromosome != dataset.annotations[stop - 1].chromosome:
        raise errors.UnknownSegment(
            f"probes '{row['start_probe']}'..'{row['end_probe']}' do not span a region here"
        )
    mode = str(row["mode"]) if "mode" in table.columns else MODE_DMR
    if mode == MODE_VMR:
        fit_values = levene_transform(
            to_mvalues(dataset).matrix.values, dataset.phenotypes.group
        )
    else:
        fit_values = dataset.matrix.values
    design = build_design(dataset.phenotypes)
    _, _, z, _, _ = fit_arrays(fit_values, design)
    group = dataset.phenotypes.group
    values = dataset.matrix.values
    mean0 = values[start:stop, group == 0].mean(axis=1)
    mean1 = values[start:stop, group == 1].mean(axis=1)
    rows = (
        (
            dataset.probe_ids[i],
            int(dataset.positions[i]),
            repr(float(mean0[i - start])),
            repr(float(mean1[i - start])),
            repr(float(mean1[i - start] - mean0[i - start])),
            repr(float(z[i])),
        )
        for i in range(start, stop)
    )
    path = os.path.join(config.out, "plot_data.tsv")
    _write_table(
        path,
        config,
        ("probe_id", "position", "mean_group0", "mean_group1", "difference", "z"),
        rows,
    )
    logger.info("plot data for rank %d (%d CpGs) written to %s", rank, stop - start, path)
    return 0


def cmd_validate(config: RunConfig, regions_path: str) -> int:
    """Re-scan clusters overlapping previously reported regions.

    Clustering runs on the current dataset; only clusters overlapping at
    least one input region enter the scan and the permutation pass, so
    p-values condition on the regions under validation.
    """
    _ensure_outdir(config)
    regions = _read_region_table(regions_path)
    dataset = _load_dataset(config)
    clusters = _clusters_for(config, dataset)
    used = filter_clusters(clusters, 2)
    positions = dataset.positions
    chromosomes = dataset.chromosomes

    overlapping: dict[int, list[int]] = {}
    selected = []
    selected_ids = set()
    for ridx in range(len(regions)):
        row = regions.iloc[ridx]
        chrom = str(row["chromosome"])
        lo, hi = int(row["start_pos"]), int(row["end_pos"])
        hits = []
        for c in used:
            if c.chromosome != chrom:
                continue
            c_lo = int(positions[c.start_index])
            c_hi = int(positions[c.stop_index - 1])
            if c_lo <= hi and lo <= c_hi:
                hits.append(c)
                if c.cluster_id not in selected_ids:
                    selected_ids.add(c.cluster_id)
                    selected.append(c)
        overlapping[ridx] = hits

    out_rows = []
    scan = None
    null = None
    ordinal: dict[int, int] = {}
    segments_by_cluster: dict[int, list] = {}
    if selected:
        design = build_design(dataset.phenotypes)
        assoc_table = fit_all_cpgs(dataset, design)
        scan = scan_dataset(
            dataset,
            selected,
            assoc_table,
            z_main=config.z_main,
            z_bridge=config.z_bridge,
            min_cpgs=config.min_cpgs,
        )
        if scan.segments:
            plan = make_plan(dataset.phenotypes, config.permutations, config.seed)
            null = null_scan(
                dataset.matrix.values,
                dataset.phenotypes.group,
                dataset.phenotypes.covariates,
                selected,
                plan,
                mode=MODE_DMR,
                z_main=config.z_main,
                z_bridge=config.z_bridge,
                min_cpgs=config.min_cpgs,
                boundaries=config.strata,
                threads=config.threads,
            )
        ordinal = {c.cluster_id: j for j, c in enumerate(selected)}
        for seg in scan.segments:
            segments_by_cluster.setdefault(seg.cluster_id, []).append(seg)

    for ridx in range(len(regions)):
        row = regions.iloc[ridx]
        chrom = str(row["chromosome"])
        lo, hi = int(row["start_pos"]), int(row["end_pos"])
        in_region = (chromosomes == chrom) & (positions >= lo) & (positions <= hi)
        n_cpgs = int(in_region.sum())
        hits = overlapping[ridx]
        if not hits:
            out_rows.append((chrom, lo, hi, n_cpgs, "", "NA", "NA", "no_overlap"))
            continue
        segs = []
        best_lrt = np.nan
        best_cluster = None
        for c in hits:
            segs.extend(sorted(segments_by_cluster.get(c.cluster_id, []), key=lambda s: s.start_index))
            cm = scan.cluster_max[ordinal[c.cluster_id]]
            if np.isfinite(cm) and (best_cluster is None or cm > best_lrt):
                best_lrt = float(cm)
                best_cluster = c
        means = ";".join(_fmt(s.segment_mean) for s in segs)
        if best_cluster is None:
            out_rows.append((chrom, lo, hi, n_cpgs, means, "NA", _fmt(1.0), "ok"))
        else:
            pool = null.pool_for_size(best_cluster.n_cpgs)
            p = p_value(best_lrt, pool)
            out_rows.append(
                (chrom, lo, hi, n_cpgs, means, _fmt(best_lrt), _fmt_p(p, pool.total_draws), "ok")
            )

    path = os.path.join(config.out, "validation.tsv")
    _write_table(
        path,
        config,
        ("chromosome", "start_pos", "end_pos", "n_cpgs", "segment_means", "lrt", "p_value", "status"),
        out_rows,
    )
    logger.info("%d regions validated, written to %s", len(out_rows), path)
    return 0


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--matrix", help="methylation matrix TSV/CSV")
    parser.add_argument("--phenotypes", help="phenotype table TSV/CSV")
    parser.add_argument("--manifest", help="CpG manifest TSV/CSV")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--scale", choices=("beta", "mvalue"), help="scale of the matrix values")
    parser.add_argument("--group-column", dest="group_column", help="phenotype column with the two groups")
    parser.add_argument(
        "--covariates",
        type=_parse_str_list,
        help="comma-separated numeric covariate columns",
    )
    parser.add_argument("--case-label", dest="case_label", help="group label to code as 1")
    parser.add_argument("--max-gap", dest="max_gap", type=int, help="cluster join distance in bp")
    parser.add_argument("--corr-min", dest="corr_min", type=float, help="cluster join correlation")
    parser.add_argument(
        "--corr-auto",
        dest="corr_auto",
        action="store_const",
        const=True,
        help="set corr-min to the median adjacent-pair correlation",
    )
    parser.add_argument("--z-main", dest="z_main", type=float, help="segment seed |z| threshold")
    parser.add_argument("--z-bridge", dest="z_bridge", type=float, help="single-CpG bridge |z| threshold")
    parser.add_argument("--min-cpgs", dest="min_cpgs", type=int, help="minimum CpGs per segment")
    parser.add_argument("--permutations", type=int, help="number of permutations")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument(
        "--strata",
        type=_parse_int_list,
        help="comma-separated cluster-size stratum boundaries",
    )
    parser.add_argument("--threads", type=int, help="worker processes (DMSEG_THREADS as fallback)")
    parser.add_argument("--cpg-stats", dest="cpg_stats", help="also write per-CpG statistics to this path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmseg",
        description="Differentially and variably methylated region detection "
        "with permutation-based significance",
    )
    parser.add_argument("--version", action="version", version=f"dmseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("dmr", "detect differentially methylated regions"),
        ("vmr", "detect variably methylated regions"),
        ("cluster-stats", "write the CpG cluster partition"),
        ("plot-data", "write per-CpG series for one reported region"),
        ("validate", "re-scan reported regions in another dataset"),
    ):
        p = sub.add_parser(name, help=text)
        _add_common_flags(p)
        if name == "plot-data":
            p.add_argument("--results", required=True, help="results TSV from a dmr/vmr run")
            p.add_argument("--rank", required=True, type=int, help="rank column value of the region")
        if name == "validate":
            p.add_argument("--regions", required=True, help="TSV with chromosome, start_pos, end_pos")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.perf_counter()
    try:
        config = resolve_config(args)
        if args.command == "dmr":
            code = cmd_run(config, MODE_DMR)
        elif args.command == "vmr":
            code = cmd_run(config, MODE_VMR)
        elif args.command == "cluster-stats":
            code = cmd_cluster_stats(config)
        elif args.command == "plot-data":
            code = cmd_plot_data(config, args.results, args.rank)
        else:
            code = cmd_validate(config, args.regions)
    except errors.DmsegError as exc:
        print(f"dmseg: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything unexpected still yields one parseable line
        print(f"dmseg: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    logger.info("done in %.2fs", time.perf_counter() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
