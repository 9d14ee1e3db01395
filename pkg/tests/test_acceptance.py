"""Acceptance criteria 1 to 9, each printing one PASS/FAIL line."""

from __future__ import annotations

import pytest

import criteria

CRITERIA = [
    (1, "historical CVE minimal thresholds", criteria.check_cve_thresholds),
    (2, "two-filesystem context averages", criteria.check_vfs_context),
    (3, "init ratio shift", criteria.check_ratio_shift),
    (4, "safe-function interaction", criteria.check_safe_fn),
    (5, "coverage equals path oracle", criteria.check_coverage_oracle),
    (6, "threshold monotonicity", criteria.check_monotonicity),
    (7, "context only suppresses", criteria.check_context_subset),
    (8, "extensions", criteria.check_extensions),
    (9, "determinism across workers", criteria.check_determinism),
]


@pytest.mark.parametrize("number, title, check", CRITERIA, ids=[f"criterion_{n}" for n, _, _ in CRITERIA])
def test_criterion(number, title, check, capsys):
    ok, detail = check()
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title}: {detail}")
    assert ok, detail
