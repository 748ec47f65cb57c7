"""Central finite-difference gradient checking, the oracle for every analytic
gradient in the test suite. Independent of the tape: it only calls forward
functions on perturbed copies of the inputs."""

import numpy as np

from promptnerf import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar-valued f at x, elementwise."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def assert_grads_match(build_loss, params, rtol=1e-4, afloor=1e-2, h=1e-5):
    """Check analytic grads of ``build_loss()`` against central differences.

    ``build_loss`` must rebuild the graph from ``params`` (list of Tensors)
    on every call. ``afloor`` is the absolute floor applied near zero.
    """
    T.reset_grads(params)
    loss = build_loss()
    T.backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    for p, a in zip(params, analytic):
        assert a is not None, "parameter received no gradient"
        n = numeric_grad(lambda: build_loss().item(), p.data, h=h)
        denom = np.maximum(np.abs(n), afloor / rtol)
        rel = np.abs(a - n) / denom
        assert rel.max() < rtol, f"gradient mismatch: max rel err {rel.max():.3e}"
    T.reset_grads(params)
