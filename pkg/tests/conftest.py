import json
from pathlib import Path

import pytest

TINY_RUN = {
    "seed": 3,
    "scene": {"n_videos": 10, "length": 8, "n_frames": 3, "height": 16, "width": 16},
    "model": {"stem_channels": 2, "encoder_channels": [2, 3, 4, 6], "decoder_channels": [4, 3, 2],
              "spatial_kernels": [3, 3, 3, 3], "head_channels": [2, 3]},
    "train": {"epochs": 1, "steps_per_epoch": 2, "lr": 0.01, "max_eval_clips": 4, "eval_batch_size": 4},
    "evaluate": {"max_clips": 6, "batch_size": 6},
    "search": {"budget": 3, "steps": 2, "max_eval_clips": 4},
    "benchmark": {"repeats": 2},
}


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_RUN))
    return path


@pytest.fixture(scope="session")
def tiny_data(tiny_config, tmp_path_factory) -> Path:
    from pedforecast.cli import main

    out = tmp_path_factory.mktemp("data") / "ds"
    assert main(["generate", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


# --- acceptance summary ------------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 10


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """``report(n, title, checks)`` records one PASS/FAIL line and fails the test on FAIL.

    ``checks`` is a list of ``(description, ok)`` pairs.
    """
    lines = request.config.stash[ACCEPTANCE]

    def report(n, title, checks, note=""):
        failed = [d for d, ok in checks if not ok]
        status = "FAIL" if failed else "PASS"
        detail = f"failed: {'; '.join(failed)}" if failed else f"{len(checks)} checks"
        if note:
            detail += f"; {note}"
        line = f"criterion {n:2d} {status}  {title} ({detail})"
        lines[n] = line
        print(line)
        assert not failed, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(lines.get(n, f"criterion {n:2d} FAIL  (no result: test errored or was not run)"))
