"""Shared test helpers: finite-difference oracles and error metrics."""

import numpy as np

from hybridnmt import autodiff as ad


def finite_diff(loss_fn, tensors, step=1e-4):
    """Central finite differences of ``loss_fn()`` w.r.t. each tensor's data.

    ``loss_fn`` must return a plain float computed from the tensors' current
    contents; it is evaluated tape-free, keeping the oracle independent of the
    backward pass it checks.
    """
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * step)
        grads.append(g.reshape(t.data.shape))
    return grads


def rel_err(analytic, numeric):
    """Norm-relative disagreement between two gradient arrays."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check_grads(loss_builder, params, step=1e-4, tol=1e-3):
    """Tape-gradient vs finite differences for every tensor in ``params``.

    ``loss_builder`` returns a scalar Tensor when called under a tape.
    Returns the worst relative error seen.
    """
    for p in params:
        p.grad = None
    with ad.Tape() as tape:
        loss = loss_builder()
    ad.backward(tape, loss)

    def loss_value():
        return loss_builder().item()

    numeric = finite_diff(loss_value, params, step=step)
    worst = 0.0
    for p, num in zip(params, numeric):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        err = rel_err(analytic, num)
        assert err < tol, f"gradient mismatch: rel err {err:.3e} on shape {p.data.shape}"
        worst = max(worst, err)
    return worst
