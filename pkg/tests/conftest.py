from __future__ import annotations

import numpy as np
import pytest

from mimgen.backbone import Condition, ModelConfig, build_model
from mimgen.tooling.data import DatasetSpec, caption_vocabulary, gen_dataset
from mimgen.vq import VqConfig, train_vq

from . import fixtures as F


@pytest.fixture(scope="session")
def vocab():
    return caption_vocabulary()


@pytest.fixture(scope="session")
def desk_config(vocab):
    return ModelConfig(caption_vocab_size=len(vocab))


@pytest.fixture
def desk_model(desk_config):
    return build_model(desk_config)


def make_condition(vocab, config, captions, seed=0):
    rng = np.random.default_rng(seed)
    ids = np.stack([vocab.encode(c, config.max_caption_len) for c in captions])
    micro = np.column_stack([
        rng.integers(32, 45, len(captions)), rng.integers(32, 45, len(captions)),
        rng.integers(0, 8, len(captions)), rng.integers(0, 8, len(captions)),
        rng.uniform(0.5, 3.0, len(captions))]).astype(float)
    return Condition(ids, micro)


@pytest.fixture(scope="session")
def shapes8():
    return gen_dataset(DatasetSpec(count=F.VQ_IMAGES, seed=0))


@pytest.fixture(scope="session")
def trained_vq(shapes8):
    """The VQ run used by every test that needs real token grids."""
    images = np.stack([s.pixels for s in shapes8])
    return train_vq(images, VqConfig(steps=F.VQ_STEPS))


@pytest.fixture(scope="session")
def overfit_run(trained_vq, shapes8, vocab):
    return F.overfit(trained_vq.model, shapes8[0], vocab)


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    """The CLI pipeline run twice from scratch in separate directories."""
    roots = [tmp_path_factory.mktemp("cli_a"), tmp_path_factory.mktemp("cli_b")]
    return [(root, F.run_cli_pipeline(root)) for root in roots]


# one PASS/FAIL line per acceptance criterion at the end of the session

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.failed:
        _CRITERIA[number] = (title, "FAIL")
    elif report.when == "call" and report.passed:
        _CRITERIA.setdefault(number, (title, "PASS"))
    elif report.skipped:
        _CRITERIA.setdefault(number, (title, "SKIP"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {title:<26} {status}")
