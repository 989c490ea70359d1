import numpy as np
import pytest

from kronadapt.tensor import KronShape

# Criterion number -> (title, passed, detail); filled by tests/test_acceptance.py.
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}

# Factorizations used across the suite; two of them have non-square factors.
SHAPES = [
    KronShape(3, 2, 2, 3),
    KronShape(2, 4, 4, 3),
    KronShape(4, 5, 3, 2),
    KronShape(2, 2, 3, 3),
]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unit(M):
    return M / np.linalg.norm(M)


def orthonormal_set(rng, rows, cols, k):
    """``k`` matrices of shape rows x cols, orthonormal under the trace inner product."""
    Q, _ = np.linalg.qr(rng.standard_normal((rows * cols, k)))
    return [Q[:, i].reshape(rows, cols) for i in range(k)]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[num]
        line = f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


def _half_sq(adapter, X, T):
    R = adapter.forward(X) - T
    return 0.5 * float(np.sum(R * R))


def fd_relative_errors(adapter, X, T, h=1e-5):
    """Central-difference check of ``adapter.backward`` on 0.5*||forward(X) - T||^2.

    Returns ``{name: ||analytic - numeric|| / max(||analytic||, ||numeric||)}``
    for every trainable array plus ``"input"`` for the input gradient.
    """
    G = adapter.forward(X) - T
    grads, gin = adapter.backward(X, G)
    out = {}
    for name, P in adapter.parameters().items():
        num = np.empty_like(P)
        flat, nflat = P.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = _half_sq(adapter, X, T)
            flat[i] = old - h
            down = _half_sq(adapter, X, T)
            flat[i] = old
            nflat[i] = (up - down) / (2 * h)
        out[name] = _rel(grads[name], num)
    num = np.empty_like(X)
    for idx in np.ndindex(*X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        num[idx] = (_half_sq(adapter, Xp, T) - _half_sq(adapter, Xm, T)) / (2 * h)
    out["input"] = _rel(gin, num)
    return out


def _rel(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def perturbed(adapter, rng, size=0.3):
    """Move every trainable array off its initialization in place."""
    adapter.apply_delta({k: size * rng.standard_normal(v.shape)
                         for k, v in adapter.parameters().items()})
    return adapter
