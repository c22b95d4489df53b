import threading

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv(x, kernel, bias):
    """Six nested loops, zero padding 1, stride 1."""
    n, c, h, w = x.shape
    o = kernel.shape[0]
    out = np.zeros((n, o, h, w), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for i in range(h):
                for j in range(w):
                    s = float(bias[oc])
                    for ic in range(c):
                        for di in range(3):
                            for dj in range(3):
                                ii, jj = i + di - 1, j + dj - 1
                                if 0 <= ii < h and 0 <= jj < w:
                                    s += float(x[b, ic, ii, jj]) * float(kernel[oc, ic, di, dj])
                    out[b, oc, i, j] = s
    return out


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` w.r.t. every element of float64 ``x`` (in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


class ScriptedStage:
    """Probability provider returning ``table[key(x)]`` and counting calls."""

    def __init__(self, input_dims, class_count, fn):
        self.input_dims = tuple(input_dims)
        self.class_count = class_count
        self.fn = fn
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, x):
        with self._lock:
            self.calls += 1
        return np.asarray(self.fn(np.asarray(x)), dtype=np.float64)


def peaked(k, cls, top, second=None, second_cls=None):
    """Probability vector with ``top`` on ``cls`` and the rest spread (optionally a chosen runner-up)."""
    p = np.zeros(k)
    p[cls] = top
    rest = 1 - top
    if second is not None:
        p[second_cls] = second
        rest -= second
        others = [c for c in range(k) if c not in (cls, second_cls)]
    else:
        others = [c for c in range(k) if c != cls]
    p[others] += rest / len(others)
    return p


def grad_close(analytic, numeric, tol):
    """Relative error below ``tol``; gradients that are analytically zero are compared absolutely."""
    if np.abs(numeric).max() < 1e-8:
        return np.abs(analytic).max() < 1e-8
    return rel_error(analytic, numeric) < tol


# -- acceptance report ------------------------------------------------------

ACCEPTANCE = []  # (number, title, passed, detail), filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
