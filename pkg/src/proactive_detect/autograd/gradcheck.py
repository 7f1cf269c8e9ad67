"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)  # parameter name -> max relative error

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def failed(self):
        return sorted(n for n, e in self.errors.items() if e > self.tolerance)

    @property
    def ok(self):
        return not self.failed


def relative_error(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric)
    # entries where both derivatives are tiny count as exact
    err = np.where(np.maximum(np.abs(analytic), np.abs(numeric)) < floor, 0.0, err / denom)
    return float(err.max()) if err.size else 0.0


def grad_check(loss_fn, named_params, tolerance=1e-4, h=1e-4):
    """Compare backprop gradients with central differences.

    ``loss_fn()`` must rebuild the forward pass and return a scalar Tensor.
    Parameters should hold float64 data; float32 is too coarse for h=1e-4.
    """
    for _, p in named_params:
        p.zero_grad()
    loss_fn().backward()
    analytic = {n: p.grad.copy() for n, p in named_params}
    report = GradCheckReport(tolerance)
    for name, p in named_params:
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_fn().item()
            flat[k] = orig - h
            down = loss_fn().item()
            flat[k] = orig
            numeric[k] = (up - down) / (2 * h)
        report.errors[name] = relative_error(analytic[name].reshape(-1), numeric)
    return report
