import copy

import pytest

# small enough for the whole pipeline to run in seconds
TINY_TREE = {
    "phantom": {"grid": [16, 16, 4]},
    "corpus": {"n": 8, "n_heldout": 4, "ablation_sizes": [2, 4]},
    "fusion": {"augment_factor": 1},
    "codec": {"width": 8, "temporal_width": 8, "codebook_size": 16, "iterations": 4,
              "batch_volumes": 1, "patch": [16, 16, 3]},
    "diffusion": {"T": 4, "iterations": 4, "batch": 4, "widths": [8, 16], "emb_dim": 8, "groups": 4},
    "synthesis": {"n": 3},
    "metrics": {"kid_subset_size": 4, "kid_subsets": 5},
}


@pytest.fixture
def tiny_tree():
    return copy.deepcopy(TINY_TREE)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
