import numpy as np
import pytest

from octforge import synthgen

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def corpus200():
    """200 reals and 200 fakes per family, seed 0, in memory."""
    out = {"camera": synthgen.gen_real(0, 200).images}
    for fam in synthgen.FAMILIES:
        out[fam] = synthgen.gen_fake(fam, 0, 200).images
    return out


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """12 images per class on disk for two fake families (36 rows)."""
    root = tmp_path_factory.mktemp("tiny")
    synthgen.write_corpus(root, seed=3, count=12, families=("nearest", "bilinear"))
    return root


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
