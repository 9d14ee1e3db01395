from __future__ import annotations

import sys
from fractions import Fraction
from pathlib import Path

import pytest

TESTS = Path(__file__).resolve().parent
ROOT = TESTS.parent
sys.path.insert(0, str(TESTS))

from raceweaver.kir import parse_module  # noqa: E402
from raceweaver.pipeline import AnalysisConfig, analyze_module  # noqa: E402

CORPUS = ROOT / "corpus"
SCHEMA = ROOT / "docs" / "report.schema.json"


def analyze_text(text: str, **overrides):
    """Run the whole pipeline on KIR source held in memory."""
    overrides.setdefault("threshold", Fraction(1, 6))
    return analyze_module(parse_module(text), AnalysisConfig(**overrides))


@pytest.fixture
def corpus_dir() -> Path:
    return CORPUS
