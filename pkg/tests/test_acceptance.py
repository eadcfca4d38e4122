"""Acceptance criteria 1-11, each at its stated tolerance.

Every criterion prints one ``[PASS]``/``[FAIL]`` line; under pytest the
lines are also repeated in the terminal summary (see conftest.py).
Run directly with ``python tests/test_acceptance.py`` for the lines alone.
"""
import subprocess
import sys
import time

import pytest

from vrk.harness import checks

LINES: dict = {}


def record(n: int, result: checks.CheckResult) -> None:
    line = f"criterion {n:2d} " + result.line()
    LINES[n] = line
    print(line)


CRITERIA = {
    1: lambda: checks.check_aggregator_equivalence(cases=100),
    2: lambda: checks.check_voxel_query_oracle(grids=50),
    3: lambda: checks.check_query_scaling(repetitions=1000),
    4: checks.check_flop_model,
    5: checks.check_sparse_conv_oracle,
    6: lambda: checks.check_rotated_iou_oracle(pairs=100, samples=1_000_000),
    7: checks.check_confidence_target,
    8: checks.check_loss_fixtures,
    9: checks.check_ap_evaluator,
    10: checks.check_end_to_end,
}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    result = CRITERIA[n]()
    record(n, result)
    assert result.passed, result.detail
    assert result.within_budget, f"{result.seconds:.1f}s over the {result.budget:.0f}s budget"


def test_criterion_11_selftest_runtime():
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "vrk.harness.cli", "selftest"], capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    reported = [ln for ln in proc.stdout.splitlines() if ln.startswith("[PASS]") or ln.startswith("[FAIL]")]
    ok = elapsed < 300.0 and len(reported) == 10
    result = checks.CheckResult(
        "11 selftest runs criteria 1-10",
        ok,
        f"{len(reported)} checks reported, {sum(ln.startswith('[PASS]') for ln in reported)} passing, "
        f"exit code {proc.returncode}",
        elapsed,
        300.0,
    )
    record(11, result)
    assert ok, proc.stdout + proc.stderr


if __name__ == "__main__":
    for n in sorted(CRITERIA):
        record(n, CRITERIA[n]())
    test_criterion_11_selftest_runtime()
