import json

import pytest

from cfmpolicy.benchcli import RunConfig


def tiny_config_dict(out_dir, **policy):
    pol = dict(hidden=[16], epochs=10, eval_every=2, eval_episodes=2, n_demos=2,
               batch_size=128, n_points=8, visual_dim=8, lr=1e-3)
    pol.update(policy)
    return {
        "task": {"max_steps": 60},
        "policy": pol,
        "seeds": [0, 1],
        "out_dir": str(out_dir),
        "timing_calls": 3,
        "timing_warmup": 1,
    }


@pytest.fixture
def tiny_cfg(tmp_path):
    return RunConfig.from_dict(tiny_config_dict(tmp_path / "run"))


@pytest.fixture
def tiny_cfg_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config_dict(tmp_path / "run")))
    return path


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
