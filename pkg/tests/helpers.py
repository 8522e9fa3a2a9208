"""Shared test utilities: central-difference gradient checking."""

import numpy as np


def finite_diff_check(make_loss, tensors, h=1e-5, rtol=1e-4, max_elems=64, rng=None):
    """Compare analytic grads of ``make_loss()`` against central differences.

    ``make_loss`` must rebuild the forward pass from the current tensor data
    on every call and return a scalar Tensor. Checks up to ``max_elems``
    coordinates per tensor (all of them when small). Returns the worst
    relative error seen.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss = make_loss()
    loss.backward()
    analytic = {id(t): (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for t in tensors}

    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_elems else rng.choice(n, size=max_elems, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = make_loss().item()
            flat[i] = orig - h
            dn = make_loss().item()
            flat[i] = orig
            numeric = (up - dn) / (2.0 * h)
            a = analytic[id(t)].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
            assert err < rtol, f"grad mismatch at {t.name or 'tensor'}[{i}]: analytic={a}, numeric={numeric}"
    return worst
