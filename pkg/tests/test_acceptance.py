"""Acceptance criteria, one PASS/FAIL line each.

Learning sweeps are cached under ``results/sweeps`` and reused when the
simulation code and scenario are unchanged; a cold run takes hours.
Set ``KARMA_SWEEP_DIR`` to use another cache directory.
"""
import os
from pathlib import Path

import pytest

from karma_pricing.acceptance import run_checks

SWEEP_DIR = Path(os.environ.get("KARMA_SWEEP_DIR",
                                Path(__file__).resolve().parents[1] / "results" / "sweeps"))
CRITERIA = {
    1: "flow solvers reproduce reference flows",
    2: "optimum/uncontrolled cost gaps",
    3: "learning converges to the optimum",
    4: "moving-average cost stays below uncontrolled",
    5: "recovery after a capacity change",
    6: "moment matching vs Monte Carlo",
    7: "policy gradients vs finite differences",
    8: "agent choice vs enumeration",
    9: "expected saturated cost",
    10: "invariants and determinism",
}


@pytest.fixture(scope="module")
def results():
    return run_checks(seeds=20, out=SWEEP_DIR, reuse=True)


@pytest.mark.parametrize("criterion", sorted(CRITERIA), ids=lambda c: f"c{c}")
def test_criterion(criterion, results, capsys):
    mine = [r for r in results if r.criterion == criterion]
    assert mine, f"no checks ran for {CRITERIA[criterion]}"
    with capsys.disabled():
        print()
        for r in mine:
            print(r.line())
    failed = [r.line() for r in mine if not r.passed]
    assert not failed, "\n".join(failed)
