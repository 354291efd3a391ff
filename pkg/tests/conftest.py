from __future__ import annotations

import pytest

from trajstyle.cli import main


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """One complete smoke-profile pipeline run, shared read-only across tests."""
    run = tmp_path_factory.mktemp("smoke") / "run"
    assert main(["run-all", "--profile", "smoke", "--out", str(run)]) == 0
    return run
