import time

import numpy as np
import pytest

from mspe.evaluate import Mode, ModelState, sweep
from mspe.pipeline import ModelConfig, run_pipeline, synthetic_split, TEST_SAMPLES_PER_CLASS

ACCEPT_SEEDS = (0, 1, 2)
ACCEPT_RESOLUTIONS = (16, 24, 32, 48, 64)
MODES = (Mode.VANILLA, Mode.FLEXIVIT, Mode.MSPE)

_criteria: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, [title, "PASS", 0.0, ""])
    if rep.when == "call":
        entry[2] += rep.duration
    if rep.failed:
        entry[1] = "FAIL"
        entry[3] = rep.longreprtext.strip().splitlines()[-1][:160] if rep.longreprtext else ""
    elif rep.skipped and entry[1] == "PASS":
        entry[1] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status, secs, why = _criteria[n]
        line = f"criterion {n:>2} {status}: {title} ({secs:.1f}s)"
        if why:
            line += f" | {why}"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def accept_runs():
    """Pretrain, build the bank, fine-tune and sweep once per acceptance seed."""
    runs = []
    model = ModelConfig()
    for seed in ACCEPT_SEEDS:
        t0 = time.perf_counter()
        state, bank0, h_pre, h_mspe = run_pipeline(seed, model)
        test = synthetic_split(seed, "test", TEST_SAMPLES_PER_CLASS, model.num_classes)
        report = sweep(state, test, MODES, ACCEPT_RESOLUTIONS)
        pretrained = ModelState(state.params, state.kernel, state.bias, bank0, state.base_resolution)
        runs.append({
            "seed": seed, "state": state, "pretrained": pretrained, "test": test, "report": report,
            "h_pre": h_pre, "h_mspe": h_mspe, "seconds": time.perf_counter() - t0,
        })
    return runs


@pytest.fixture(scope="session")
def seed_mean(accept_runs):
    """Seed-averaged top-1 of one (mode, resolution) cell."""
    def mean(mode, res):
        return float(np.mean([r["report"].cell(mode, res).top1 for r in accept_runs]))
    return mean
