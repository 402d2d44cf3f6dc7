import time

import pytest

from modens import pipeline
from modens.data import gen_benchmark
from modens.model import default_arch, forward, train_mode

SMALL_OVERRIDES = {
    "data": {"n_train": 300, "n_test": 200, "n_ood": 200},
    "training": {"epochs": 6},
    "mode_seeds": [1, 2, 3],
    "ensemble_sizes": [1, 2],
    "landscape": {"resolution": 5, "slice_resolution": 5, "trajectory_every": 3},
    "theory": {"trials": 20},
    "ablation": {"num_modes": 3, "k": 2},
}


@pytest.fixture(scope="session")
def small_cfg():
    return pipeline.load_config(overrides=SMALL_OVERRIDES)


@pytest.fixture(scope="session")
def bench():
    cfg = {"n_train": 600, "n_test": 300, "n_ood": 300}
    return gen_benchmark(cfg)


@pytest.fixture(scope="session")
def modes(bench):
    arch = default_arch()
    return [train_mode(arch, bench["train"], s, bench["test"], epochs=15) for s in (1, 2, 3)]


@pytest.fixture(scope="session")
def dumps(bench, modes):
    return {n: [forward(c, ds.x, n) for c in modes] for n, ds in bench.items()}


@pytest.fixture(scope="session")
def study(tmp_path_factory):
    """The pinned default study, run twice into separate directories."""
    cfg = pipeline.load_config()
    runs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"study{i}")
        t0 = time.perf_counter()
        result = pipeline.reproduce(cfg, out)
        runs.append({"dir": out, "seconds": time.perf_counter() - t0, "result": result})
    return {"cfg": cfg, "runs": runs}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
