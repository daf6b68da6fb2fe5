import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def mini_runs(tmp_path_factory):
    """The reduced pipeline, run twice into separate directories.

    Shared across test modules because each run costs about a minute; the
    pair also serves as the cross-run determinism evidence.
    """
    from knnt.pipeline import PipelineSettings, run_pipeline
    settings = PipelineSettings.mini()
    quiet = lambda message: None
    return (run_pipeline(settings, tmp_path_factory.mktemp("mini-a"), quiet),
            run_pipeline(settings, tmp_path_factory.mktemp("mini-b"), quiet))


def pytest_addoption(parser):
    parser.addoption("--skip-slow", action="store_true", default=False,
                     help="skip tests marked slow (the full-scale pipeline)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--skip-slow"):
        marker = pytest.mark.skip(reason="--skip-slow")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(marker)
