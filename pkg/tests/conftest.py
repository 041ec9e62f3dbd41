from collections import OrderedDict
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

FIXTURES = Path(__file__).parent / "fixtures"

# (name, RGB) of the separable two-class toy corpus
TOY_COLOURS = (("green", (40, 170, 60)), ("red", (190, 40, 40)))
TOY_PER_CLASS = 8
TOY_SIZE = 64


def write_toy_corpus(root: Path, per_class=TOY_PER_CLASS, size=TOY_SIZE, seed=0):
    """Solid-colour PNGs with a little per-pixel jitter, one folder per class."""
    rng = np.random.default_rng(seed)
    for name, rgb in TOY_COLOURS:
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            noise = rng.integers(-12, 13, size=(size, size, 3))
            pixels = np.clip(np.array(rgb) + noise, 0, 255).astype(np.uint8)
            Image.fromarray(pixels).save(folder / f"{name}_{i:02d}.png")
    return root


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    return write_toy_corpus(tmp_path_factory.mktemp("toy") / "images")


@pytest.fixture(scope="session")
def toy_manifest_path(toy_dir):
    from appledx import data

    classes, records = data.scan_directory(toy_dir)
    manifest = data.split_dataset(records, 0.7, 42, classes)
    return data.write_manifest(manifest, toy_dir.parent / "manifest.tsv")


@pytest.fixture(scope="session")
def toy_manifest(toy_manifest_path):
    from appledx import data

    return data.read_manifest(toy_manifest_path)


@pytest.fixture(scope="session")
def table2_path():
    return FIXTURES / "table2_cm.csv"


# --- acceptance criterion summary -----------------------------------------

_criteria: "OrderedDict[int, dict]" = OrderedDict()


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _criteria.setdefault(number, {"title": title, "outcomes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _criteria[mark.args[0]]["outcomes"].append((item.name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        outcomes = entry["outcomes"]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for _, o in outcomes):
            status = "PASS"
        elif all(o == "skipped" for _, o in outcomes):
            status = "SKIP"
        else:
            status = "FAIL"
        failed = [name for name, o in outcomes if o == "failed"]
        detail = f"  (failed: {', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {number}: {status:<7} {entry['title']}{detail}")
