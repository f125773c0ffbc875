"""One test per acceptance criterion, run on the shipped desk configuration
at the stated tolerances.  Each test prints a single pass/fail line."""
import pytest

from lensxray.acceptance import DETERMINISM_SUBSET, criterion_determinism, run_criterion

from conftest import ACCEPTANCE_LINES

# results of the subset re-used by the determinism check
_FIRST = {}


def _report(r):
    line = r.line()
    print(line)
    ACCEPTANCE_LINES.append(line)
    for c in r.checks:
        print(f"    {c.name} = {c.value:.6g} ({c.threshold}) {'ok' if c.ok else 'FAIL'}")
    assert r.passed, line


def _run(k, cfg):
    r = run_criterion(k, cfg)
    if k in DETERMINISM_SUBSET:
        _FIRST[k] = r
    _report(r)


def test_criterion_01_flow(desk_cfg):
    _run(1, desk_cfg)


def test_criterion_02_transport(desk_cfg):
    _run(2, desk_cfg)


def test_criterion_03_linearization(desk_cfg):
    _run(3, desk_cfg)


def test_criterion_04_potential(desk_cfg):
    _run(4, desk_cfg)


@pytest.mark.slow
def test_criterion_05_duality(desk_cfg):
    _run(5, desk_cfg)


@pytest.mark.slow
def test_criterion_06_normal(desk_cfg):
    _run(6, desk_cfg)


def test_criterion_07_decomposition(desk_cfg):
    _run(7, desk_cfg)


def test_criterion_08_symbols(desk_cfg):
    _run(8, desk_cfg)


def test_criterion_09_conjugacy(desk_cfg):
    _run(9, desk_cfg)


@pytest.mark.slow
def test_criterion_10_reconstruction(desk_cfg):
    _run(10, desk_cfg)


def test_criterion_11_determinism(desk_cfg):
    _report(criterion_determinism(desk_cfg, dict(_FIRST)))
