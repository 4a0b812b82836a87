import pytest

from tsforget.continual import ExperimentConfig, prepare_dataset
from tsforget.synthgen import builtin_series

# A scaled-down setup so protocol-level tests run in about a second.
TINY = {
    "context_len": 32, "horizon": 16, "patch_len": 8, "embed_dim": 8,
    "hidden_dim": 32, "n_blocks": 1, "epochs": 2, "lr": 1e-3,
}


@pytest.fixture
def tiny_cfg():
    return ExperimentConfig.from_dict(TINY)


@pytest.fixture
def tiny_pair(tiny_cfg):
    d1 = prepare_dataset(builtin_series("d1", 0), "d1", tiny_cfg.window)
    d2 = prepare_dataset(builtin_series("d2", 0), "d2", tiny_cfg.window)
    return d1, d2


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for criterion, status in sorted(lines, key=lambda x: int(x[0].split()[0])):
            terminalreporter.write_line(f"{status}  {criterion}")
