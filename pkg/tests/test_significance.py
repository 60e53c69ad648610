"""Permutation plans, stratified null pools, p-values, and the full run."""

import numpy as np
import pytest
from scipy.stats import kstest

import synthbackbone as sb
from dmseg import errors
from dmseg.assoc import build_design, fit_arrays, levene_transform
from dmseg.cluster import build_clusters, filter_clusters
from dmseg.ingest import to_mvalues
from dmseg.segment import cluster_max_lrt, cluster_row_codes, scan_dataset
from dmseg.significance import (
    DEFAULT_BOUNDARIES,
    NullPool,
    NullScan,
    PermutationPlan,
    check_boundaries,
    fwer,
    make_plan,
    null_scan,
    p_value,
    run_significance,
    stratum_index,
)


# ---------------------------------------------------------------- strata


def test_stratum_index_bins():
    assert [stratum_index(n, DEFAULT_BOUNDARIES) for n in (1, 2, 10)] == [0, 0, 0]
    assert [stratum_index(n, DEFAULT_BOUNDARIES) for n in (11, 20)] == [1, 1]
    assert [stratum_index(n, DEFAULT_BOUNDARIES) for n in (21, 40)] == [2, 2]
    assert [stratum_index(n, DEFAULT_BOUNDARIES) for n in (41, 10_000)] == [3, 3]
    assert stratum_index(3, (5,)) == 0
    assert stratum_index(6, (5,)) == 1


def test_stratum_index_rejects_nonpositive_size():
    with pytest.raises(errors.ConfigError):
        stratum_index(0, DEFAULT_BOUNDARIES)


def test_check_boundaries():
    assert check_boundaries((10, 20, 40)) == (10, 20, 40)
    assert check_boundaries([5]) == (5,)
    for bad in ((), (0, 10), (10, 10), (20, 10)):
        with pytest.raises(errors.ConfigError):
            check_boundaries(bad)


# ---------------------------------------------------------------- plans


def test_make_plan_is_deterministic():
    a = make_plan(12, 6, seed=9)
    b = make_plan(12, 6, seed=9)
    assert np.array_equal(a.orderings, b.orderings)
    c = make_plan(12, 6, seed=10)
    assert not np.array_equal(a.orderings, c.orderings)


def test_plan_rows_do_not_depend_on_total_count():
    # row i is keyed by (seed, i): a longer plan starts with the same rows
    short = make_plan(12, 5, seed=9)
    long = make_plan(12, 10, seed=9)
    assert np.array_equal(short.orderings, long.orderings[:5])


def test_plan_rows_are_permutations():
    plan = make_plan(15, 40, seed=3)
    expected = np.arange(15)
    assert (np.sort(plan.orderings, axis=1) == expected).all()
    assert plan.n_permutations == 40


def test_make_plan_accepts_phenotypes():
    phen = sb.make_phenotypes(np.array([0, 0, 1, 1]))
    plan = make_plan(phen, 3, seed=0)
    assert plan.n_samples == 4


def test_make_plan_input_validation():
    with pytest.raises(errors.InvalidPlan):
        make_plan(10, 0, seed=0)
    with pytest.raises(errors.ConfigError):
        make_plan(10, 5, seed=-1)
    with pytest.raises(errors.ConfigError):
        make_plan(1, 5, seed=0)


def test_plan_rejects_malformed_orderings():
    with pytest.raises(errors.InvalidPlan):
        PermutationPlan(master_seed=0, n_samples=4, orderings=np.array([[0, 1, 2, 2]]))
    with pytest.raises(errors.InvalidPlan):
        PermutationPlan(master_seed=0, n_samples=4, orderings=np.array([[0, 1, 2]]))
    with pytest.raises(errors.InvalidPlan):
        PermutationPlan(master_seed=0, n_samples=4, orderings=np.empty((0, 4), dtype=int))


# ---------------------------------------------------------------- pools


def small_pool():
    return NullPool(
        stratum_low=0, stratum_high=10, null_lrts=np.array([1.0, 2.0, 12.0]), zero_count=7
    )


def test_p_value_counts_by_hand():
    pool = small_pool()
    assert pool.total_draws == 10
    assert p_value(10.0, pool) == 2 / 11
    assert p_value(13.0, pool) == 1 / 11
    assert p_value(2.0, pool) == 3 / 11  # ties count as >=
    assert p_value(0.5, pool) == 4 / 11
    assert p_value(0.0, pool) == 1.0  # zero draws join at the bottom


def test_p_value_on_empty_pool():
    empty = NullPool(stratum_low=0, stratum_high=10, null_lrts=np.empty(0), zero_count=0)
    with pytest.raises(errors.EmptyPool):
        p_value(1.0, empty)


def test_p_value_never_zero_and_monotone():
    rng = np.random.default_rng(30)
    pool = NullPool(
        stratum_low=0,
        stratum_high=None,
        null_lrts=np.sort(rng.exponential(size=50)),
        zero_count=13,
    )
    obs = np.sort(rng.exponential(size=40))
    ps = [p_value(float(t), pool) for t in obs]
    assert all(p > 0 for p in ps)
    assert all(a >= b for a, b in zip(ps, ps[1:]))
    floor = 1.0 / (1 + pool.total_draws)
    assert min(ps) >= floor


def test_fwer_by_hand():
    minima = np.array([0.9, 0.01, 0.5, 0.2])
    got = fwer([0.15, 1.0, 0.005, 0.2], minima)
    assert got.tolist() == [0.25, 1.0, 0.0, 0.5]


def test_fwer_monotone_and_bounded():
    rng = np.random.default_rng(31)
    minima = rng.uniform(size=200)
    ps = np.sort(rng.uniform(size=50))
    vals = fwer(ps, minima)
    assert (np.diff(vals) >= 0).all()
    assert (vals >= 0).all() and (vals <= 1).all()


def test_fwer_requires_minima():
    with pytest.raises(errors.EmptyPool):
        fwer([0.5], np.empty(0))


# ---------------------------------------------------------------- null scan bookkeeping


def test_null_scan_pools_by_hand():
    draws = np.array([[5.0, np.nan], [3.0, 4.0]])
    scan = NullScan(draws=draws, strata=np.array([0, 0]), boundaries=DEFAULT_BOUNDARIES)
    pool = scan.pools[0]
    assert pool.null_lrts.tolist() == [3.0, 4.0, 5.0]
    assert pool.zero_count == 1
    assert pool.total_draws == draws.size
    # permutation 0: best p is for the 5.0 draw, (1+1)/(1+4)
    # permutation 1: draws 3.0 and 4.0 give 4/5 and 3/5
    assert scan.min_p.tolist() == [0.4, 0.6]
    assert scan.pool_for_size(10) is pool
    for s in (1, 2, 3):
        assert scan.pools[s].total_draws == 0


def test_null_scan_zero_valued_draws_count_as_zeros():
    draws = np.array([[0.0], [2.0], [np.nan]])
    scan = NullScan(draws=draws, strata=np.array([0]), boundaries=(10,))
    assert scan.pools[0].null_lrts.tolist() == [2.0]
    assert scan.pools[0].zero_count == 2


def test_null_scan_splits_strata():
    draws = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    scan = NullScan(draws=draws, strata=np.array([0, 2, 2]), boundaries=DEFAULT_BOUNDARIES)
    assert scan.pools[0].null_lrts.tolist() == [1.0, 4.0]
    assert scan.pools[2].null_lrts.tolist() == [2.0, 3.0, 5.0, 6.0]
    assert scan.pools[1].total_draws == 0
    # min over strata of the per-draw self-inclusive p-values
    # perm 0: stratum 0 draw 1 -> 3/3; stratum 2 draws 2,3 -> 5/5, 4/5; min 0.8
    # perm 1: stratum 0 draw 4 -> 2/3; stratum 2 draws 5,6 -> 3/5, 2/5; min 0.4
    assert np.allclose(scan.min_p, [0.8, 0.4])


def test_null_scan_shape_mismatch():
    with pytest.raises(errors.InvalidPlan):
        NullScan(draws=np.zeros((2, 3)), strata=np.array([0, 1]), boundaries=(10,))


# ---------------------------------------------------------------- permuted refits


def fixture_dataset(seed=40):
    rng = np.random.default_rng(seed)
    return sb.spiked_beta_dataset(rng, [8, 10, 6], 8, 8, spike_block=1, effect=0.2)


def test_identity_permutation_reproduces_observed_dmr():
    ds = fixture_dataset()
    clusters = filter_clusters(build_clusters(ds), 2)
    design = build_design(ds.phenotypes)
    beta1, se, z, _, degenerate = fit_arrays(ds.matrix.values, design)
    codes = cluster_row_codes(clusters, ds.n_cpgs)
    observed = cluster_max_lrt(
        beta1, se ** 2, z, degenerate, codes, len(clusters), 1.96, 1.64, 2
    )
    rng = np.random.default_rng(0)
    orderings = np.vstack([np.arange(ds.n_samples), rng.permutation(ds.n_samples)])
    plan = PermutationPlan(master_seed=0, n_samples=ds.n_samples, orderings=orderings)
    null = null_scan(
        ds.matrix.values, ds.phenotypes.group, ds.phenotypes.covariates, clusters, plan
    )
    assert np.array_equal(null.draws[0], observed, equal_nan=True)
    assert not np.array_equal(null.draws[1], observed, equal_nan=True)


def test_identity_permutation_reproduces_observed_vmr():
    rng = np.random.default_rng(41)
    group = np.array([0] * 10 + [1] * 10, dtype=np.int8)
    values = sb.mvalue_blocks(rng, [8, 6], group, spike_block=0, sd_factor=3.0)
    positions, chroms = sb.block_positions([8, 6])
    ds = sb.make_dataset(values, positions, group, scale="mvalue", chromosomes=chroms)
    clusters = filter_clusters(build_clusters(ds), 2)

    base = to_mvalues(ds).matrix.values
    design = build_design(ds.phenotypes)
    beta1, se, z, _, degenerate = fit_arrays(
        levene_transform(base, ds.phenotypes.group), design
    )
    codes = cluster_row_codes(clusters, ds.n_cpgs)
    observed = cluster_max_lrt(
        beta1, se ** 2, z, degenerate, codes, len(clusters), 1.96, 1.64, 2
    )
    orderings = np.arange(ds.n_samples)[None, :]
    plan = PermutationPlan(master_seed=0, n_samples=ds.n_samples, orderings=orderings)
    null = null_scan(
        base, ds.phenotypes.group, ds.phenotypes.covariates, clusters, plan, mode="vmr"
    )
    assert np.array_equal(null.draws[0], observed, equal_nan=True)


def test_null_scan_draws_do_not_depend_on_thread_count():
    ds = fixture_dataset()
    clusters = filter_clusters(build_clusters(ds), 2)
    plan = make_plan(ds.n_samples, 9, seed=5)
    args = (ds.matrix.values, ds.phenotypes.group, ds.phenotypes.covariates, clusters, plan)
    one = null_scan(*args, threads=1)
    four = null_scan(*args, threads=4)
    assert np.array_equal(one.draws, four.draws, equal_nan=True)
    assert np.array_equal(one.min_p, four.min_p)


def test_null_scan_input_validation():
    ds = fixture_dataset()
    clusters = filter_clusters(build_clusters(ds), 2)
    plan = make_plan(ds.n_samples + 1, 3, seed=0)
    with pytest.raises(errors.InvalidPlan):
        null_scan(ds.matrix.values, ds.phenotypes.group, ds.phenotypes.covariates, clusters, plan)
    plan = make_plan(ds.n_samples, 3, seed=0)
    with pytest.raises(errors.ConfigError):
        null_scan(
            ds.matrix.values,
            ds.phenotypes.group,
            ds.phenotypes.covariates,
            clusters,
            plan,
            mode="emr",
        )
    with pytest.raises(errors.ConfigError):
        null_scan(
            ds.matrix.values,
            ds.phenotypes.group,
            ds.phenotypes.covariates,
            clusters,
            plan,
            threads=0,
        )


# ---------------------------------------------------------------- end to end


def test_run_significance_wiring():
    ds = fixture_dataset()
    result = run_significance(ds, n_permutations=60, seed=1)
    assert result.mode == "dmr"
    assert result.regions, "planted effect should be found"
    assert [r.rank for r in result.regions] == list(range(1, len(result.regions) + 1))
    keys = [(r.fwer, r.p_value, -r.lrt, r.chromosome, r.start_pos) for r in result.regions]
    assert keys == sorted(keys)

    by_id = {c.cluster_id: c for c in result.used_clusters}
    order = {c.cluster_id: j for j, c in enumerate(result.used_clusters)}
    for r in result.regions:
        cluster = by_id[r.cluster_id]
        pool = result.null.pool_for_size(cluster.n_cpgs)
        best = result.scan.cluster_max[order[r.cluster_id]]
        assert r.p_value == p_value(float(best), pool)
        assert r.fwer == fwer([r.p_value], result.null.min_p)[0]
        assert r.stratum_total_draws == pool.total_draws
        assert r.n_cpgs >= 2
        assert r.start_probe.startswith("cg") and r.end_probe.startswith("cg")
        assert r.chromosome == "chr1"
        assert r.start_pos <= r.end_pos

    top = result.regions[0]
    lo, hi = sb.block_bounds([8, 10, 6], 1)
    planted = {ds.annotations[i].probe_id for i in range(lo, hi)}
    assert top.start_probe in planted and top.end_probe in planted


def test_run_significance_skips_permutations_without_candidates():
    rng = np.random.default_rng(42)
    ds = sb.null_beta_dataset(rng, [6, 6], 6, 6)
    result = run_significance(ds, z_main=50.0, z_bridge=40.0, n_permutations=10, seed=0)
    assert result.regions == []
    assert result.null is None and result.plan is None
    assert len(result.used_clusters) == 2


def test_run_significance_median_correlation_fallback():
    ds = fixture_dataset()
    result = run_significance(ds, corr_min=None, n_permutations=5, seed=0)
    assert 0.0 < result.corr_min < 1.0


def test_run_significance_rejects_unknown_mode():
    ds = fixture_dataset()
    with pytest.raises(errors.ConfigError):
        run_significance(ds, mode="both")


def test_vmr_run_flags_variance_spike():
    rng = np.random.default_rng(43)
    group = np.array([0] * 12 + [1] * 12, dtype=np.int8)
    values = sb.mvalue_blocks(rng, [8, 8, 8], group, spike_block=1, sd_factor=3.0)
    positions, chroms = sb.block_positions([8, 8, 8])
    ds = sb.make_dataset(values, positions, group, scale="mvalue", chromosomes=chroms)
    result = run_significance(ds, mode="vmr", n_permutations=100, seed=2)
    assert result.regions
    top = result.regions[0]
    assert top.mode == "vmr"
    lo, hi = sb.block_bounds([8, 8, 8], 1)
    planted = {ds.annotations[i].probe_id for i in range(lo, hi)}
    assert top.start_probe in planted


# ---------------------------------------------------------------- calibration


def test_observed_rank_is_conditionally_uniform():
    """Exchangeability check on the whole permutation machinery.

    Under the null the observed score and the B permuted scores are
    exchangeable. Conditional on the observed draw being positive, its
    rank among the k positive draws is uniform on 1..k, so the
    randomized transform (rank - U)/k must be standard uniform.
    """
    rng = np.random.default_rng(44)
    n0 = n1 = 10
    u_values = []
    for rep in range(200):
        group = np.array([0] * n0 + [1] * n1, dtype=np.int8)
        values = sb.mvalue_blocks(rng, [8], group)
        positions, chroms = sb.block_positions([8])
        ds = sb.make_dataset(values, positions, group, scale="mvalue", chromosomes=chroms)
        result = run_significance(
            ds, z_main=1.0, z_bridge=0.8, n_permutations=60, seed=1000 + rep
        )
        if not result.regions:
            continue
        observed = float(result.scan.cluster_max[0])
        pool = result.null.pools[0]
        rank = 1 + int(np.sum(pool.null_lrts > observed))
        k = 1 + len(pool.null_lrts)
        u_values.append((rank - rng.uniform()) / k)
    assert len(u_values) > 100, "conditioning should keep most replicates"
    assert kstest(u_values, "uniform").pvalue > 0.01
