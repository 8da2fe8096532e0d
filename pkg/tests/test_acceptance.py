"""Runs every acceptance criterion at its stated tolerance.

One [PASS]/[FAIL] line per criterion is printed and repeated in the terminal
summary. Criterion 7 needs four physical cores; see the README.
"""
import pytest

from pocketdex import acceptance
from pocketdex.cli import main

from conftest import ACCEPTANCE_LINES


@pytest.mark.parametrize("number", sorted(acceptance.CHECKS), ids=lambda n: f"{n:02d}-{acceptance.CHECKS[n][0].replace(' ', '_')}")
def test_criterion(number):
    (result,) = acceptance.run([number])
    line = result.line().splitlines()[0]
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert result.passed, result.detail


def test_selftest_fast_checks(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1] == f"{len(acceptance.CHECKS) - len(acceptance.SLOW)}/{len(acceptance.CHECKS) - len(acceptance.SLOW)} checks passed"
