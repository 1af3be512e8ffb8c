import json
from pathlib import Path

import pytest

CORPUS = Path(__file__).resolve().parent.parent / "corpus"

_acceptance_results: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _acceptance_results.append((name, outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance_results:
        terminalreporter.write_line(f"{outcome}  {name}")


@pytest.fixture(scope="session")
def corpus_dir() -> Path:
    assert CORPUS.is_dir(), "fixture corpus missing; run corpus/make_corpus.py"
    return CORPUS


@pytest.fixture(scope="session")
def corpus_gt(corpus_dir):
    from pagemine.dataset_io import load_coco

    return load_coco(corpus_dir / "gt.json")


@pytest.fixture()
def fixture_backend_desc(corpus_dir):
    from pagemine.backend import BackendDescriptor

    return BackendDescriptor(kind="fixture", fixture_root=str(corpus_dir / "fixtures"))


@pytest.fixture()
def preprocessed_corpus(tmp_path, corpus_dir):
    """Preprocess the corpus pages into a fresh run directory."""
    from pagemine.preprocess import PreprocessConfig, preprocess_page

    cfg = PreprocessConfig()
    run_dir = tmp_path / "run"
    pages = [
        preprocess_page(p, cfg, run_dir)
        for p in sorted((corpus_dir / "pages").glob("*.png"))
    ]
    return run_dir, pages, cfg


def load_json(path: Path):
    return json.loads(path.read_text())
