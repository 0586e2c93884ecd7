from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from helpers import small_mixed_net
from latentadv.data import Dataset, load_mnist_dir
from latentadv.network import mlp
from latentadv.tensor import make_rng
from latentadv.training import TrainConfig, train

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def mixed_net(rng):
    return small_mixed_net(rng)



MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist"


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "t10k-images-idx3-ubyte.gz").exists():
        pytest.skip("MNIST files not present (run tools/build_mnist_idx.py)")
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist_mlp(mnist_dir):
    """A naturally trained 784-64-10 MLP and 1000 test points, for attack-ordering checks."""
    train_set = load_mnist_dir(mnist_dir, "train").subset(5000)
    test_set = load_mnist_dir(mnist_dir, "test").subset(1000)
    flat = lambda d: Dataset(d.images.reshape(len(d), -1), d.labels, d.name)  # noqa: E731
    net = mlp(make_rng(0), [784, 64, 10])
    net, _ = train(net, flat(train_set), TrainConfig("natural", lr=0.1, epochs=2, seed=0))
    return net, flat(test_set)


# ---------------------------------------------------------------- acceptance lines

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.fixture
def criterion(request):
    """Record the measured detail for the test's criterion; the verdict comes from the test outcome."""
    marker = request.node.get_closest_marker("criterion")
    number = marker.args[0]
    entry = _CRITERIA.setdefault(number, {"detail": "", "outcome": None})

    def record(detail: str):
        entry["detail"] = detail
        print(f"criterion {number}: {detail}")

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"detail": "", "outcome": None})
    if rep.when == "call" or rep.outcome != "passed":
        entry["outcome"] = rep.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(entry["outcome"], "FAIL")
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {entry['detail']}")
