"""Central finite differences shared by the gradient tests."""

import numpy as np
import torch


def fd_check(module, loss_fn, n_params=50, h=1e-5, seed=0, floor=1e-6):
    """Worst relative error between autograd and central differences over sampled parameters.

    ``floor`` keeps the ratio meaningful for gradients that are numerically zero.
    """
    module.zero_grad()
    loss_fn().backward()
    params = [p for p in module.parameters() if p.grad is not None]
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    while checked < n_params:
        p = params[rng.integers(len(params))]
        flat = p.data.view(-1)
        j = int(rng.integers(flat.numel()))
        old = flat[j].item()
        with torch.no_grad():
            flat[j] = old + h
            up = loss_fn().item()
            flat[j] = old - h
            down = loss_fn().item()
            flat[j] = old
        fd = (up - down) / (2 * h)
        an = p.grad.view(-1)[j].item()
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
        checked += 1
    return worst
