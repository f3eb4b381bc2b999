import numpy as np
import pytest
import torch

from mssr.data import OracleDegradation, load_corpus, make_oracle_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("oracle")
    make_oracle_corpus(root, OracleDegradation(), n_hr=10, n_lr=10, size=64, seed=0)
    return root


@pytest.fixture(scope="session")
def small_corpus(small_corpus_root):
    return load_corpus(small_corpus_root, (0.6, 0.2, 0.2), seed=0, patch_size_hr=32, scale=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    from pathlib import Path

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
    mod.write_results(Path(__file__).resolve().parent.parent / "acceptance_results.txt")
