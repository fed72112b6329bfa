import pytest

from dfgp.pipeline import CnnSettings, GpSettings, PipelineConfig, SplitSettings
from dfgp.synth import make_scene


def tiny_config(n_train=150, scenario="random", **gp):
    """Few epochs and a narrow CNN so pipeline tests run in seconds."""
    gp_kw = dict(num_inducing=20, batch_size=64, schedule=[[5, 0.01]], exact_schedule=[[5, 0.01]])
    gp_kw.update(gp)
    return PipelineConfig(CnnSettings(width=2, batch_size=32, schedule=[[2, 0.01]]), GpSettings(**gp_kw),
                          SplitSettings(scenario, n_train))


@pytest.fixture(scope="session")
def tiny_scene():
    return make_scene(seed=0, size=24, n_features=4)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
