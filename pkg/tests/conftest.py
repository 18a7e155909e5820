import os
import sys
from pathlib import Path

import pytest

from mvmap import io
from mvmap.config import PipelineConfig
from mvmap.pipeline import STAGE_ORDER, run_all


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)


def _complete(root: Path, cfg: PipelineConfig) -> bool:
    done = {r["command"] for r in io.read_manifest(root) if r["config_sha256"] == cfg.digest()}
    return set(STAGE_ORDER) <= done


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """Two full default pipeline runs.

    ``MVMAP_ACCEPTANCE_RUNS=dirA,dirB`` reuses two finished artifact trees
    instead of running the pipeline (about 25 minutes for both).
    """
    cfg = PipelineConfig()
    given = os.environ.get("MVMAP_ACCEPTANCE_RUNS")
    if given:
        roots = [Path(p) for p in given.split(",")]
        if len(roots) != 2 or not all(_complete(r, cfg) for r in roots):
            pytest.fail("MVMAP_ACCEPTANCE_RUNS must name two finished default runs")
        return roots
    roots = [tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")]
    for root in roots:
        run_all(cfg, root)
    return roots
