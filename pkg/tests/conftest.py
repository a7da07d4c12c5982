import numpy as np
import pytest

from cdtrust.raster import ChangeMask, Raster, ScenePair


def make_scene(scene_id="s0", bands=4, h=16, w=16, seed=0, split="train", with_mask=True, change=0.3):
    """Random scene whose post image is brighter wherever the mask says changed."""
    rng = np.random.default_rng(seed)
    pre = rng.uniform(0.0, 1.0, size=(bands, h, w)).astype(np.float32)
    labels = (rng.uniform(size=(h, w)) < change).astype(np.uint8)
    post = pre + labels[None] * 0.8 + rng.normal(0, 0.02, size=pre.shape)
    mask = ChangeMask(labels) if with_mask else None
    return ScenePair(scene_id, Raster(pre), Raster(post.astype(np.float32)), mask, "g", split)


@pytest.fixture
def scene():
    return make_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance criteria report: one PASS/FAIL line per criterion, printed after the run.
_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _CRITERIA.append((marker.args[0], marker.args[1], status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, status, detail in sorted(_CRITERIA):
        line = f"{status} criterion {n}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
