import numpy as np
import pytest
import torch

from afine import AFINE, BackboneConfig
from afine.images import ImageStore
from afine.synthetic import synthetic_corpus

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model():
    return AFINE(BackboneConfig.toy(seed=0))


@pytest.fixture(scope="session")
def small_corpus():
    return synthetic_corpus(6, size=16, seed=3)


@pytest.fixture
def small_store(small_corpus):
    return ImageStore(images=small_corpus.images)


def random_images(rng, n, h=16, w=16):
    return torch.from_numpy(rng.uniform(0, 1, size=(n, 3, h, w))).float()


# ---------------------------------------------------------------- acceptance reporting

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): acceptance criterion, reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    # one line per criterion: the call outcome, or a setup failure
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    _ACCEPTANCE.append((marker.args[0], rep.passed, dict(item.user_properties).get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
