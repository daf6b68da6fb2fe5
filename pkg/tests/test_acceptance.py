"""Acceptance gate: one test per shipped guarantee, one printed line each.

Criteria 1-4 run standalone oracle checks at full size.  Criteria 5-12 and
14 read off a full-scale pipeline run (session fixture, marked slow along
with everything that depends on it; deselect with --skip-slow).  Criterion
13 combines the full run's round-trip checks with manifest equality across
the two reduced runs from the shared fixture.
"""

import time

import pytest

from knnt.pipeline import (PipelineSettings, criterion_degeneracy,
                           criterion_gradients, criterion_knn,
                           criterion_loss_oracle, run_pipeline)


@pytest.fixture(scope="session")
def announce(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def _announce(line):
        if reporter is not None:
            reporter.write_line(line)
        else:
            print(line)

    return _announce


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    return run_pipeline(PipelineSettings(), tmp_path_factory.mktemp("full"),
                        log=lambda message: None)


def test_criterion_01_finite_difference_gradients(announce):
    start = time.time()
    c = criterion_gradients()
    elapsed = time.time() - start
    announce(c.line() + f" [{elapsed:.0f}s]")
    assert c.passed, c.detail
    assert elapsed < 300.0


def test_criterion_02_loss_matches_enumeration(announce):
    start = time.time()
    c = criterion_loss_oracle()
    elapsed = time.time() - start
    announce(c.line() + f" [{elapsed:.0f}s]")
    assert c.passed, c.detail
    assert elapsed < 60.0


def test_criterion_03_zero_projection_identity(announce):
    c = criterion_degeneracy()
    announce(c.line())
    assert c.passed, c.detail


def test_criterion_04_nearest_neighbour_search(announce):
    c = criterion_knn()
    announce(c.line())
    assert c.passed, c.detail


@pytest.mark.slow
@pytest.mark.parametrize("cid", [5, 6, 7, 8, 9, 10, 11, 12, 14])
def test_trend_criterion(full_run, announce, cid):
    c = full_run.criterion(cid)
    announce(c.line())
    assert c.passed, c.detail


@pytest.mark.slow
def test_criterion_13_persistence_and_reruns(full_run, mini_runs, announce):
    c = full_run.criterion(13)
    first, second = mini_runs
    cross = first.manifest == second.manifest
    announce(c.line() + f"; independent reruns match: {cross}")
    assert c.passed, c.detail
    assert cross, "reduced pipeline reruns produced different artifacts"
    assert first.manifest["files"], "empty artifact manifest"
