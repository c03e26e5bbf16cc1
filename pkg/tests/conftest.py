import numpy as np
import pytest

from vigait.data.synth import generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """4 subjects x 3 views x 4 sequences x 6 frames, written once per session."""
    root = tmp_path_factory.mktemp("synth")
    generate(root, subjects=4, views=[0, 45, 90], seqs_per_view=4, frames=6, seed=3)
    return root


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_record(request):
    """``record(criterion, ok, detail)`` collects one summary line per criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(criterion: int, ok: bool, detail: str) -> None:
        lines[criterion] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(lines):
        ok, detail = lines[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
