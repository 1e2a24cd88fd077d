import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_YAML = """
method: peso
seed: 0
data:
  n_stages: 3
  drift: {n_users: 80, n_items: 32, n_clusters: 4, stage_sizes: [30, 10, 10]}
model: {d: 8, rank: 2, L: 3, K: 4}
train: {epochs: 2, pretrain_epochs: 2, batch_size: 64, lam: 1.0}
eval: {beam_width: 10}
sweep: {lambda_values: [0.5, 2.0], lr_scales: [0.1], seeds: [0, 1]}
"""


@pytest.fixture
def tiny_config():
    from peso_cl.harness import ExperimentConfig

    return ExperimentConfig.loads(TINY_YAML)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        def order(line):
            head = line.split()[1].rstrip(":").split(".")[0]
            return (0, int(head), line) if head.isdigit() else (1, 0, line)

        for line in sorted(lines, key=order):
            terminalreporter.write_line(line)
