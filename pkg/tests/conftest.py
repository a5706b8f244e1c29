import numpy as np
import pytest
import torch
from PIL import Image

from fssfda.data import DomainDataset, LabeledExample
from fssfda.synthetic import SyntheticConfig, make_synthetic_dataset
from fssfda.transforms import AugmentConfig

torch.set_num_threads(1)

SMALL_AUG = AugmentConfig(crop_size=24)


def write_folder(root, domain, counts, size=8, seed=0):
    """Tiny image folder: ``counts`` maps class name -> number of images."""
    rng = np.random.default_rng(seed)
    for name, n in counts.items():
        d = root / domain / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            arr = rng.integers(0, 255, (size, size, 3), dtype=np.uint8)
            Image.fromarray(arr).save(d / f"{i:03d}.png")
    return root


def index_only(domain, counts, vocabulary=None):
    """DomainDataset without files on disk; ``counts[c]`` examples for class ``c``."""
    examples = []
    for c, n in enumerate(counts):
        for i in range(n):
            eid = f"{domain}/c{c:02d}/{i:04d}"
            examples.append(LabeledExample(eid, eid, c, domain))
    vocab = vocabulary or tuple(f"c{c:02d}" for c in range(len(counts)))
    return DomainDataset(domain, tuple(examples), vocab)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    return make_synthetic_dataset(root, SyntheticConfig(n_classes=3, per_class=12, seed=0))


@pytest.fixture
def small_aug():
    return SMALL_AUG


# ---------------------------------------------------------------- acceptance reporting

_ACCEPTANCE: dict[str, tuple[str, str, float, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _ACCEPTANCE[str(number)] = (status, title, rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE, key=lambda n: int(n)):
        status, title, dur, detail = _ACCEPTANCE[number]
        line = f"[{status}] criterion {number}: {title} ({dur:.1f} s)"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
