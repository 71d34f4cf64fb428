import numpy as np
import pytest

from fdqma import averaging, flqr
from fdqma.fpca import Grid, SparseCurve

SUBGRADIENT_LOG = {"fits": 0, "violations": []}


def _check_subgradient(fit, responses, scores):
    n = np.asarray(responses).size
    neg, zero, _ = flqr.subgradient_counts(fit, responses, scores)
    tau = fit.tau
    if not (neg <= n * tau + 1e-9 and n * tau <= neg + zero + 1e-9):
        SUBGRADIENT_LOG["violations"].append((n, tau, neg, zero))
    SUBGRADIENT_LOG["fits"] += 1


@pytest.fixture(autouse=True)
def _audit_quantile_fits(monkeypatch):
    """Every QR fit made anywhere in the suite is checked for subgradient optimality."""
    original = flqr.fit_qr

    def audited(responses, scores, tau, eigenfunctions=None):
        fit = original(responses, scores, tau, eigenfunctions)
        _check_subgradient(fit, responses, scores)
        return fit

    monkeypatch.setattr(flqr, "fit_qr", audited)
    monkeypatch.setattr(averaging, "fit_qr", audited)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def cosine_basis(t, count):
    j = np.arange(1, count + 1)
    return np.sqrt(2.0) * np.cos(np.pi * np.outer(t, j))


def sine_basis(t, count):
    j = np.arange(1, count + 1)
    return np.sqrt(2.0) * np.sin(np.pi * np.outer(t, j))


def dense_curves(scores, basis, grid: Grid, mean=None):
    """Noiseless curves observed at every grid point."""
    pts = grid.points
    phi = basis(pts, scores.shape[1])
    mu = np.zeros_like(pts) if mean is None else mean
    return [SparseCurve(i, pts.copy(), mu + phi @ s) for i, s in enumerate(scores)]


def pytest_terminal_summary(terminalreporter):
    log = SUBGRADIENT_LOG
    terminalreporter.write_line(
        f"quantile-regression subgradient audit: {log['fits']} fits, "
        f"{len(log['violations'])} violations")


def pytest_configure(config):
    config.addinivalue_line("markers", "suite_audit: runs after every other test")


def pytest_collection_modifyitems(items):
    items.sort(key=lambda item: item.get_closest_marker("suite_audit") is not None)
