"""Central finite-difference gradient comparison in float64."""
import numpy as np
import torch


def fd_check(loss_fn, params, n_coords=12, eps=1e-6, seed=0):
    """Max relative error between autograd and central differences.

    ``loss_fn()`` must be deterministic and rebuild its graph on every call.
    A random subset of coordinates from every parameter is probed.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        g = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        for i in idx:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
            num = (up - down) / (2 * eps)
            ana = g.view(-1)[i].item()
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
            worst = max(worst, err)
    return worst
