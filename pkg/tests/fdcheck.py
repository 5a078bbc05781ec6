"""Central finite-difference gradient oracle shared by the test suite.

Independent of the tape engine on purpose: it re-evaluates the forward
function at perturbed parameter values and never inspects the graph.
"""
import numpy as np


def finite_difference(fn, params, step=1e-5, num_checks=20, rng=None):
    """Compare fn's autodiff gradients against central differences.

    fn: callable(list of Tensor params) -> scalar Tensor, rebuilt per call.
    params: list of Tensor leaves with requires_grad=True.
    Checks `num_checks` randomly chosen coordinates per parameter (all of
    them when a parameter is smaller) and returns the worst relative error.
    """
    from cfmarl.autodiff import grad

    out = fn(params)
    grads = grad(out, params)
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.value.ravel()
        n = flat.size
        idxs = np.arange(n) if n <= num_checks else rng.choice(n, num_checks, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            up = fn(params).item()
            flat[i] = orig - step
            down = fn(params).item()
            flat[i] = orig
            fd = (up - down) / (2 * step)
            denom = max(abs(fd), abs(g.ravel()[i]), 1e-8)
            worst = max(worst, abs(fd - g.ravel()[i]) / denom)
    return worst
