import pytest

from flowprior.flow import FlowModel
from flowprior.numkit import make_rng
from flowprior.training import TrainConfig, synth_dataset, train_flow


@pytest.fixture(scope="session")
def mixture_flow():
    """Small flow fitted to the two-mode 2-D mixture; shared by flow, theory and training tests."""
    data = synth_dataset("gauss_mixture_2d", 2000, make_rng(10))
    model = FlowModel(2, 4, 32, rng=make_rng(11))
    result = train_flow(model, data, TrainConfig(epochs=60, batch_size=128, lr=2e-3,
                                                 lr_halving_period=25, seed=12))
    return model, result


@pytest.fixture(scope="session")
def small_priors(tmp_path_factory):
    """Quickly trained blobs signal prior and bars noise flow, saved as checkpoints."""
    from flowprior.flow import checkpoint_save
    root = tmp_path_factory.mktemp("priors")
    paths = {}
    for kind, seed in (("blobs8x8", 1), ("bars8x8", 2)):
        data = synth_dataset(kind, 1000, make_rng([seed, 0]))
        model = FlowModel(64, 4, 32, rng=make_rng([seed, 1]))
        train_flow(model, data, TrainConfig(epochs=5, batch_size=100, lr=2e-3, seed=seed))
        paths[kind] = str(root / f"{kind}.nfck")
        checkpoint_save(model, paths[kind])
    return paths


# acceptance reporting: one PASS/FAIL line per criterion ----------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    number = int(name.split("_")[2])
    failed = report.failed
    if report.when == "call" or failed:
        _CRITERIA[number] = (name, "FAIL" if failed else "PASS" if report.passed else "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  ({name})")
