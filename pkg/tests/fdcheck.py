"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np


def fd_gradient(loss_fn, arrays, eps=1e-5, limit=None, rng=None):
    """Numeric gradient of loss_fn() w.r.t. each array, perturbed in place.

    Returns a list of arrays shaped like the inputs. When `limit` is set,
    only that many randomly chosen entries per array are probed and the
    rest stay NaN (callers compare only probed entries).
    """
    grads = []
    for arr in arrays:
        g = np.full(arr.shape, np.nan)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if limit is not None and flat.size > limit:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=limit,
                                                           replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn()
            flat[i] = orig - eps
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-8):
    """Worst relative disagreement over the probed (non-NaN) entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        mask = ~np.isnan(n)
        if not mask.any():
            continue
        av, nv = a[mask], n[mask]
        denom = np.maximum(np.maximum(np.abs(av), np.abs(nv)), floor)
        worst = max(worst, float(np.max(np.abs(av - nv) / denom)))
    return worst
