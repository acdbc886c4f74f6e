import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def jacobi_singular_values(a, sweeps=100, tol=1e-15):
    """One-sided Jacobi SVD; returns singular values in decreasing order.

    Independent of numpy.linalg so it can serve as an oracle.
    """
    u = np.array(a, dtype=np.float64, copy=True)
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    for _ in range(sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = float(u[:, i] @ u[:, i])
                beta = float(u[:, j] @ u[:, j])
                gamma = float(u[:, i] @ u[:, j])
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ui = u[:, i].copy()
                u[:, i] = c * ui - s * u[:, j]
                u[:, j] = s * ui + c * u[:, j]
        if not rotated:
            break
    return np.sort(np.sqrt(np.sum(u * u, axis=0)))[::-1]


def naive_matvec(a, x):
    out = []
    for i in range(len(a)):
        acc = 0.0
        for j in range(len(x)):
            acc += a[i][j] * x[j]
        out.append(acc)
    return np.array(out)


def central_diff(f, arr, eps=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros(arr.shape)
    for i in range(arr.size):
        orig = arr.flat[i]
        arr.flat[i] = orig + eps
        fp = f()
        arr.flat[i] = orig - eps
        fm = f()
        arr.flat[i] = orig
        g.flat[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_err(analytic, numeric, floor=1e-4):
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
