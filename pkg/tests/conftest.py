from __future__ import annotations

import os
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent


def dataset_dir(name: str) -> Path:
    base = os.environ.get("CWCNET_DATA")
    return Path(base) / name if base else REPO / "data" / name


def has_mnist() -> bool:
    d = dataset_dir("mnist")
    return all((d / f).exists() or (d / (f + ".gz")).exists() for f in (
        "train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    if not has_mnist():
        pytest.skip("MNIST files not found; run scripts/fetch_data.py mnist or set CWCNET_DATA")
    return dataset_dir("mnist")


# Per-criterion summary for tests/test_acceptance.py.  Tests carry
# ``@pytest.mark.criterion(n)``; notes recorded through the ``note``
# fixture are printed next to the verdict.

CRITERIA = {
    1: "parameter counts",
    2: "mult-adds",
    3: "MNIST end-to-end",
    4: "predictor ordering",
    5: "loss ablation direction",
    6: "Fashion-MNIST / CIFAR-10",
    7: "gradient correctness",
    8: "structural oracles",
    9: "ILT schedule semantics",
    10: "feature separation",
}

_outcomes = pytest.StashKey[dict]()
_notes = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_outcomes] = {}
    config.stash[_notes] = {}


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    return mark.args[0] if mark else None


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    n = _criterion(item)
    if n is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        item.config.stash[_outcomes].setdefault(n, []).append(
            "skipped" if report.skipped else "passed" if report.passed else "failed")


@pytest.fixture
def note(request):
    def record(text: str):
        n = _criterion(request.node)
        request.config.stash[_notes].setdefault(n, []).append(text)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = config.stash[_outcomes]
    if not outcomes:
        return
    notes = config.stash[_notes]
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = outcomes.get(n)
        if not results:
            verdict = "NOT RUN"
        elif "failed" in results:
            verdict = "FAIL"
        elif all(r == "skipped" for r in results):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        counts = ", ".join(f"{results.count(k)} {k}" for k in ("passed", "failed", "skipped")
                           if results and results.count(k))
        detail = "; ".join(notes.get(n, []))
        line = f"criterion {n:>2} ({title}): {verdict}"
        if counts:
            line += f" [{counts}]"
        if detail:
            line += f" :: {detail}"
        terminalreporter.write_line(line)
