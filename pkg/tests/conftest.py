import pytest

from causalign.mlp import Mlp, MlpConfig, train
from causalign.tasks import gen_base_dataset, gen_interchange_dataset


@pytest.fixture(scope="session")
def heq_mlp():
    cfg = MlpConfig(16, (16, 16, 16), seed=0)
    m = Mlp.init(cfg)
    train(m, gen_base_dataset("heq", 262144, 1), cfg, gen_base_dataset("heq", 10000, 2))
    return m


@pytest.fixture(scope="session")
def heq_interchange():
    return (gen_interchange_dataset("heq", "both-eq", 20000, 10),
            gen_interchange_dataset("heq", "both-eq", 4000, 11),
            gen_interchange_dataset("heq", "both-eq", 4000, 12))


def pytest_terminal_summary(terminalreporter):
    lines = getattr(__import__("sys").modules.get("test_acceptance"), "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
