import pytest

from stereopose.scenegen import generate_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 20-sample generated dataset shared read-only across tests."""
    root = tmp_path_factory.mktemp("ds20")
    generate_dataset(root, n_samples=20, master_seed=3)
    return root


_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record a one-line PASS/FAIL result for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        _VERDICTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[k])
