"""Central finite-difference oracle used by the gradient tests (float64 only)."""

import numpy as np
import torch

STEP = 1e-5


def _coords(t, n, rng):
    total = t.numel()
    if total <= n:
        return np.arange(total)
    return rng.choice(total, n, replace=False)


def relative_error(analytic, numeric):
    a, b = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / scale)


def check(fn, tensors, seed=0, n_coords=40, reseed=None):
    """Relative error between autograd and central differences.

    The error is taken over the sampled coordinates of all ``tensors`` together,
    so parameters whose true gradient is zero (a bias feeding a batch norm)
    are compared against the overall gradient scale rather than roundoff.

    ``fn()`` must return a tensor; it is reduced with a fixed random projection
    so every output entry contributes. ``reseed`` is called before each
    evaluation, which pins dropout masks.
    """
    rng = np.random.default_rng(seed)

    def scalar():
        if reseed is not None:
            reseed()
        return fn()

    out = scalar()
    proj = torch.as_tensor(rng.normal(size=tuple(out.shape)), dtype=torch.float64) if out.dim() else None

    def reduce(o):
        return o if proj is None else (o * proj).sum()

    for t in tensors:
        t.grad = None
    reduce(scalar()).backward()
    analytic, numerics = [], []
    for t in tensors:
        g = t.grad.detach().reshape(-1).numpy().copy() if t.grad is not None else np.zeros(t.numel())
        flat = t.data.view(-1)
        idx = _coords(t, n_coords, rng)
        numeric = np.empty(len(idx))
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + STEP
                up = reduce(scalar()).item()
                flat[i] = orig - STEP
                down = reduce(scalar()).item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * STEP)
        analytic.append(g[idx])
        numerics.append(numeric)
    return relative_error(np.concatenate(analytic), np.concatenate(numerics))
