import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from robustnas.graph import SbmParams, generate_sbm, split_nodes  # noqa: E402


@pytest.fixture
def small_graph():
    return split_nodes(generate_sbm(SbmParams(blocks=3, nodes_per_block=12, p_in=0.5, p_out=0.05,
                                              feature_dim=6, seed=4)), (0.3, 0.2, 0.5), seed=1)

