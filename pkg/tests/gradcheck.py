"""Directional finite-difference gradient checks in float64."""

import torch

# below this a directional derivative is indistinguishable from roundoff
ZERO = 1e-9


def directional_check(module, loss_fn, eps: float = 1e-4, seed: int = 0) -> float:
    """Worst relative error between ``grad . v`` and a 4-point central difference.

    A separate random direction is drawn for every parameter tensor that
    receives a gradient.
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for name, p in params:
        d = torch.randn(p.shape, generator=gen, dtype=p.dtype)
        if p.grad is None:
            continue
        analytic = float((p.grad * d).sum())
        vals = []
        with torch.no_grad():
            for k in (2, 1, -1, -2):
                p.add_(k * eps * d)
                vals.append(float(loss_fn()))
                p.sub_(k * eps * d)
        numeric = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)
        scale = max(abs(analytic), abs(numeric))
        if scale > ZERO:
            worst = max(worst, abs(analytic - numeric) / scale)
    return worst
