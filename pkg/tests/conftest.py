import time
from contextlib import contextmanager
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from plantdet.tensor import default_dtype

ACCEPTANCE: list[str] = []


@pytest.fixture
def fp64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _cli_train(tmp_path_factory, name, *extra):
    from plantdet.cli import main

    out = tmp_path_factory.mktemp(name)
    t0 = time.perf_counter()
    code = main(["train", "--profile", "smoke", "--out", str(out), "--quiet", *extra])
    seconds = time.perf_counter() - t0
    runs = sorted(p for p in Path(out).iterdir() if p.is_dir())
    return SimpleNamespace(code=code, run_dir=runs[0] if runs else None, seconds=seconds)


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """One ``plantdet train --profile smoke`` run shared by every test that needs a trained model."""
    return _cli_train(tmp_path_factory, "smoke")


@pytest.fixture(scope="session")
def single_leaf_run(tmp_path_factory):
    """Smoke run on scenes holding exactly one leaf each."""
    return _cli_train(tmp_path_factory, "single", "--set", "synth.leaves_min=1", "--set", "synth.leaves_max=1")


@contextmanager
def criterion(number: int, title: str):
    """Record one PASS/FAIL line for an acceptance criterion, printed live and in the summary."""
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        line = f"criterion {number} FAIL  {title}  ({type(exc).__name__}: {str(exc).splitlines()[0][:120] if str(exc) else ''})"
        ACCEPTANCE.append(line)
        print("\n" + line, flush=True)
        raise
    line = f"criterion {number} PASS  {title}  [{time.perf_counter() - t0:.1f}s]"
    ACCEPTANCE.append(line)
    print("\n" + line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
