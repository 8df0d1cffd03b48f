import warnings

import pytest
import torch

from setdino import encoder, synthgen


@pytest.fixture(scope="session")
def tiny_world():
    cfg = synthgen.WorldConfig(n_genes=16, n_modules=2, module_size=5, n_batches=3, image_size=32)
    return synthgen.generate_world(cfg, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_world):
    return synthgen.generate_dataset(tiny_world, cells_per_guide_per_batch=2, seed=3)


@pytest.fixture(scope="session")
def micro_cfg():
    return encoder.ViTConfig(image_size=16, patch_size=8, embed_dim=16, depth=4, n_heads=2,
                             n_prototypes=8, projector_hidden_dim=16, bottleneck_dim=8)


@pytest.fixture(autouse=True)
def _quiet_torch():
    torch.set_num_threads(1)
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", category=UserWarning, module="torch")
        yield


# ---- acceptance reporting ----------------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "ran": False})
    if call.when == "call":
        entry["ran"] = True
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] and entry["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  {entry['title']}")
