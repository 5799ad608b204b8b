import math
import os

import numpy as np
import pytest

from acnorm.data import SyntheticTaskSpec, generate_task
from acnorm.model import ArchSpec


def naive_acnorm(x, gamma_t, beta_t, gamma_s, beta_s, t=1.0, eps=1e-5, mask="sparse", C_fixed=None):
    """Loop-by-loop reference of the collaborative layer in training mode.

    Shares no code with the package. ``mask`` is "sparse", "diag" or "none";
    ``C_fixed`` bypasses the signature/softmax stage entirely.
    """
    n, K = x.shape
    xh = np.empty_like(x, dtype=np.float64)
    for j in range(K):
        col = [float(v) for v in x[:, j]]
        mu = sum(col) / n
        var = sum((v - mu) ** 2 for v in col) / n
        for i in range(n):
            xh[i, j] = (col[i] - mu) / math.sqrt(var + eps)
    if C_fixed is None:
        zt = [beta_t[j] / math.sqrt(gamma_t[j] ** 2 + eps) for j in range(K)]
        zs = [beta_s[j] / math.sqrt(gamma_s[j] ** 2 + eps) for j in range(K)]
        C = np.zeros((K, K))
        for p in range(K):
            row = [math.exp(-abs(zt[p] - zs[q]) / t) for q in range(K)]
            tot = sum(row)
            row = [r / tot for r in row]
            for q in range(K):
                keep = {"sparse": row[q] >= row[p], "diag": p == q, "none": True}[mask]
                C[p, q] = row[q] if keep else 0.0
    else:
        C = C_fixed
    y = np.empty_like(xh)
    for p in range(K):
        gc = sum(C[p, q] * gamma_t[q] for q in range(K))
        bc = sum(C[p, q] * beta_t[q] for q in range(K))
        for i in range(n):
            y[i, p] = gamma_t[p] * xh[i, p] + beta_t[p] + gc * xh[i, p] + bc
    return y, C


def central_difference(f, arr, h=1e-5):
    """Gradient of the scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


@pytest.fixture
def tiny_arch():
    return ArchSpec(widths=[4, 8], head_hidden=8)


@pytest.fixture
def tiny_tasks():
    src = SyntheticTaskSpec(image_size=(16, 16), n_train=16, n_val=4, n_test=8, seed=11)
    tgt = SyntheticTaskSpec(image_size=(16, 16), n_train=16, n_val=4, n_test=8,
                            shape_family="vessels", texture_freq=5, seed=12)
    return generate_task(src), generate_task(tgt)


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("ACNORM_SEED", raising=False)
    yield


def pytest_report_header(config):
    return f"acnorm kernels: ACNORM_USE_NUMBA={os.environ.get('ACNORM_USE_NUMBA', '1')}"
