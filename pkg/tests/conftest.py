"""Shared fixtures: deterministic datasets on disk and an in-process CLI runner."""

import logging

import numpy as np
import pytest

import synthbackbone as sb
from dmseg import cli

BLOCKS = [8, 10, 6, 12]
SPIKE_BLOCK = 1


@pytest.fixture
def run_cli():
    """Invoke the CLI entry point in-process.

    Root logging handlers are cleared around each call so log output
    binds to the stderr object active during the test, not a stream
    captured by an earlier test.
    """

    def invoke(argv):
        root = logging.getLogger()
        saved = root.handlers[:]
        root.handlers.clear()
        try:
            return cli.main([str(a) for a in argv])
        finally:
            for handler in root.handlers:
                handler.close()
            root.handlers[:] = saved

    return invoke


@pytest.fixture
def spiked_files(tmp_path):
    """A spiked beta dataset written as matrix/phenotypes/manifest TSVs."""
    rng = np.random.default_rng(42)
    dataset = sb.spiked_beta_dataset(rng, BLOCKS, 16, 16, spike_block=SPIKE_BLOCK, effect=0.15)
    matrix, phenotypes, manifest = sb.write_dataset_files(dataset, str(tmp_path))
    return {
        "matrix": matrix,
        "phenotypes": phenotypes,
        "manifest": manifest,
        "dataset": dataset,
        "spike_rows": sb.block_bounds(BLOCKS, SPIKE_BLOCK),
        "dir": tmp_path,
    }
