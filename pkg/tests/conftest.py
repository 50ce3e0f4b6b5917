import pytest
import torch

from dfa.model import CosineClassifier, FeatureExtractor

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((criterion, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def make_model(seed=0, in_dim=3, feature_dim=8, n_classes=4, hidden=(6,), temperature=0.05,
               activation="tanh", dtype=torch.float64):
    torch.manual_seed(seed)
    ext = FeatureExtractor.mlp(in_dim, hidden, feature_dim, activation).to(dtype)
    clf = CosineClassifier(feature_dim, n_classes, temperature).to(dtype)
    return ext, clf


@pytest.fixture
def model64():
    return make_model()
