import numpy as np
import pytest

from vqkit import tensor as T


def finite_diff_grad(fn, arrays, which, step=1e-3):
    """Central-difference gradient of scalar fn w.r.t. arrays[which].

    fn takes float64 copies of the arrays and returns a python float;
    the probe perturbs one coordinate at a time.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(*base)
        flat[i] = orig - step
        lo = fn(*base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def check_grad(build_loss, arrays, tol=1e-3, step=1e-3):
    """Compare tape gradients against central differences for every input.

    build_loss maps a list of Tensors to a scalar Tensor; arrays are the
    leaf values.
    """
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(leaves)
    loss.backward()

    def eval_fn(*vals):
        frozen = [T.Tensor(v.astype(np.float32)) for v in vals]
        return float(build_loss(frozen).data)

    for which, leaf in enumerate(leaves):
        fd = finite_diff_grad(eval_fn, arrays, which, step=step)
        err = rel_err(leaf.grad, fd)
        assert err < tol, f"input {which}: rel err {err:.3e} >= {tol}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
