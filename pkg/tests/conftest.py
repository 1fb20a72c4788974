import numpy as np
import pytest
import torch

from maskctl.layout import PatchRect, build_token_layout

torch.set_num_threads(1)


def random_rects(rng, n, grid_h, grid_w, max_tries=200):
    """Up to ``n`` pairwise-disjoint random rects, by rejection."""
    rects = []
    for _ in range(max_tries):
        if len(rects) == n:
            break
        h = int(rng.integers(1, max(2, grid_h // 2) + 1))
        w = int(rng.integers(1, max(2, grid_w // 2) + 1))
        r0 = int(rng.integers(0, grid_h - h + 1))
        c0 = int(rng.integers(0, grid_w - w + 1))
        cand = PatchRect(r0, r0 + h, c0, c0 + w)
        if all(
            cand.row_end <= r.row_start or r.row_end <= cand.row_start or cand.col_end <= r.col_start or r.col_end <= cand.col_start
            for r in rects
        ):
            rects.append(cand)
    return rects


def random_layout(rng, max_regions=5, max_grid=16, min_len=2, max_len=8):
    while True:
        grid_h = int(rng.integers(2, max_grid + 1))
        grid_w = int(rng.integers(2, max_grid + 1))
        n = int(rng.integers(1, max_regions + 1))
        rects = random_rects(rng, n, grid_h, grid_w)
        if len(rects) == n:
            break
    lengths = [int(v) for v in rng.integers(min_len, max_len + 1, size=n + 1)]
    boxes = [r.to_bbox(grid_h, grid_w) for r in rects]
    return build_token_layout(lengths, boxes, grid_h, grid_w)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary --------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one of the numbered acceptance criteria")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        previous = _ACCEPTANCE.get(number, (title, "PASS"))[1]
        status = "FAIL" if failed or previous == "FAIL" else "PASS"
        _ACCEPTANCE[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
