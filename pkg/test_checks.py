"""
Tests for the invariant suite behind `dig check`.
"""
import pytest

import checks
from checks import CheckResult, run_checks
from tensor import NumericError


@pytest.mark.parametrize("check", checks.CHECKS, ids=lambda c: c.__name__)
def test_each_check_passes(check):
    result = check()
    assert result.passed, result.to_dict()


def test_results_are_emitted_in_order():
    seen = []
    results = run_checks(emit=seen.append)
    assert [r.name for r in seen] == [r.name for r in results]
    assert len(results) == len(checks.CHECKS)


def test_errors_become_failed_results(monkeypatch):
    def broken():
        raise NumericError("diverged")

    monkeypatch.setattr(checks, "CHECKS", (broken,))
    (result,) = run_checks()
    assert not result.passed
    assert result.to_dict() == {"check": "broken", "passed": False,
                                "error": "NumericError: diverged"}


def test_result_dict_flattens_detail():
    assert CheckResult("x", True, {"a": 1}).to_dict() == {"check": "x", "passed": True, "a": 1}


def test_chunked_equivalence_covers_harsh_gates():
    result = checks.check_chunked_equivalence()
    assert result.passed, result.to_dict()
    assert result.detail["cases"] == 200 and result.detail["harsh_cases"] == 50
