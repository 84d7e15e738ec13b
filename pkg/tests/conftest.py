import numpy as np
import pytest

from flowedit import tensor as T


def numeric_grad(fn, x, eps=1e-3):
    """Central finite differences of scalar-valued fn at x, in float64.

    ``fn`` receives a plain ndarray and must return a python float; it is the
    independent oracle against which analytic gradients are checked.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(x)
        flat[i] = orig - eps
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-3, atol=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric)
    tol = atol + rtol * np.abs(numeric)
    worst = np.max(err - tol)
    assert np.all(err <= tol), (
        f"gradient mismatch: worst excess {worst:.3e}, "
        f"max analytic {np.abs(analytic).max():.3e}, "
        f"max numeric {np.abs(numeric).max():.3e}"
    )


def check_op_grad(build, x0, eps=1e-3, rtol=1e-3, atol=1e-6):
    """Gradient-check ``build`` (Tensor -> scalar Tensor) at x0 via the oracle."""
    xt = T.Tensor(np.array(x0, dtype=np.float64), requires_grad=True)
    loss = build(xt)
    loss.backward()

    def oracle(arr):
        with T.no_grad():
            return build(T.Tensor(arr)).item()

    num = numeric_grad(oracle, x0, eps=eps)
    assert_grad_close(xt.grad, num, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
