import os

import pytest

from src.case_io import load_case

ROOT = os.path.dirname(os.path.abspath(__file__))
CASES = os.path.join(ROOT, "assets", "cases")


@pytest.fixture(scope="session")
def case5():
    return load_case(os.path.join(CASES, "case5_oed.m"))


@pytest.fixture(scope="session")
def case2():
    return load_case(os.path.join(CASES, "case2.m"))
