import numpy as np
import pytest

from panocc.grid import GridSpec, SemanticGrid

SMALL = GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=(0.4, 0.4, 0.4), dims=(10, 10, 10))


@pytest.fixture
def small_spec():
    return SMALL


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sampling_visibility(grid: SemanticGrid, ego, samples: int = 1000) -> np.ndarray:
    """Dense ray-sampling visibility: a voxel is hidden if any sample strictly
    between the ego cell and the target cell falls in an occupied voxel."""
    spec = grid.spec
    o, s = np.asarray(spec.origin), np.asarray(spec.voxel_size)
    ego = np.asarray(ego, float)
    ego_cell = np.floor((ego - o) / s).astype(int)
    occ = grid.occupied()
    t = (np.arange(samples) + 0.5) / samples
    out = np.ones(spec.dims, dtype=bool)
    for idx in np.ndindex(*spec.dims):
        target = o + (np.asarray(idx) + 0.5) * s
        pts = ego + t[:, None] * (target - ego)
        cells = np.floor((pts - o) / s).astype(int)
        keep = ~np.all(cells == ego_cell, axis=1) & ~np.all(cells == np.asarray(idx), axis=1)
        c = cells[keep]
        if len(c) and occ[c[:, 0], c[:, 1], c[:, 2]].any():
            out[idx] = False
    return out


def random_panoptic(rng: np.random.Generator, spec: GridSpec = SMALL, n_instances: int = 6):
    """Random valid PanopticGrid: stuff noise plus box instances with random ids."""
    from panocc.grid import DEFAULT_CLASSES, PanopticGrid

    labels = rng.choice([0, 0, 0, 4, 5], size=spec.dims)
    ids = np.full(spec.dims, -1)
    things = DEFAULT_CLASSES.thing_ids
    for iid in rng.choice(1000, size=n_instances, replace=False):
        lo = rng.integers(0, np.asarray(spec.dims) - 1)
        hi = lo + rng.integers(1, 4, 3)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        labels[sl] = rng.choice(things)
        ids[sl] = iid
    # force one class per id
    for iid in np.unique(ids[ids >= 0]):
        sel = ids == iid
        labels[sel] = labels[sel][0]
    return PanopticGrid(spec, labels, ids)


# -- acceptance reporting -----------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or (report.when == "call" and number not in _CRITERIA):
        _CRITERIA[number] = ("FAIL" if failed else "PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
