from pathlib import Path

import pytest

from specfence.isa import parse_asm

CORPUS = Path(__file__).resolve().parents[1] / "corpus"


def load(name: str):
    return parse_asm((CORPUS / f"{name}.s").read_text(), name=name)


@pytest.fixture
def confusion():
    return load("type_confusion")


@pytest.fixture
def corpus_dir():
    return CORPUS


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    outcomes = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            name = rep.nodeid.rpartition("::")[2]
            if "test_acceptance.py" not in rep.nodeid or not name.startswith("test_criterion_"):
                continue
            num = int(name.split("_")[2])
            ok = key == "passed"
            outcomes[num] = outcomes.get(num, True) and ok
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(outcomes):
        terminalreporter.write_line(f"criterion {num}: {'PASS' if outcomes[num] else 'FAIL'}")
