"""Central finite-difference gradient check over every parameter tensor."""

from __future__ import annotations

import numpy as np
import torch


def check_gradients(net, loss_fn, h=1e-5, max_entries=None, seed=0):
    """Return {tensor name: relative error}.

    Entries whose analytic gradient is zero up to roundoff (|g| <= 1e-12, e.g. a
    bias under a shift-invariant softmax) are excluded from the relative error;
    their finite difference must still vanish. ``max_entries``
    samples that many nonzero entries per tensor (all of them when None).
    """
    net.eval()
    net.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for name, p in net.named_parameters():
            g = p.grad.detach().numpy().ravel().copy()
            flat = p.data.view(-1)
            nz = np.flatnonzero(np.abs(g) > 1e-12)
            zero = np.flatnonzero(np.abs(g) <= 1e-12)
            if max_entries is not None and len(nz) > max_entries:
                nz = np.sort(rng.choice(nz, size=max_entries, replace=False))
            if max_entries is not None and len(zero) > 4:
                zero = rng.choice(zero, size=4, replace=False)

            def fd(i):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                return (up - down) / (2 * h)

            for i in zero:
                assert abs(fd(int(i))) < 1e-8, f"{name}[{i}]: zero analytic gradient but nonzero finite difference"
            if len(nz) == 0:
                continue
            num = np.array([fd(int(i)) for i in nz])
            ana = g[nz]
            errors[name] = float(np.linalg.norm(ana - num) / max(np.linalg.norm(ana), np.linalg.norm(num)))
    return errors
