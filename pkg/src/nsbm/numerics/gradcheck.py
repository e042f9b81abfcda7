"""Reverse-mode evaluation helpers and the central-difference gradient check."""

from dataclasses import dataclass, field

import numpy as np


def evaluate_with_gradients(loss_fn, params):
    """Evaluate ``loss_fn()`` and back-propagate into ``params``.

    ``loss_fn`` builds the operation graph from the tensors in ``params`` (a
    name -> Tensor mapping) and returns a scalar Tensor. Returns the float loss
    and a name -> gradient-array dict (zeros for unreachable parameters).
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = {}
    for name, p in params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros(p.shape)
    return loss.item(), grads


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in self.errors.items()]
        verdict = "PASS" if self.passed else "FAIL"
        return f"gradcheck {verdict} (tol {self.tolerance:g})\n  " + "\n  ".join(lines)


def finite_difference_check(loss_fn, params, step=1e-6, tolerance=1e-5, max_entries=None, rng=None):
    """Compare analytic gradients with central differences.

    The error for a parameter is ``max|analytic - numeric|`` divided by the
    largest gradient magnitude of that parameter; when that magnitude is below
    1e-8 the absolute error is used instead. ``max_entries`` limits how many
    coordinates per parameter are probed (chosen with ``rng``).
    """
    _, analytic = evaluate_with_gradients(loss_fn, params)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric[k] = (up - down) / (2.0 * step)
        a = analytic[name].reshape(-1)[idx]
        diff = np.max(np.abs(a - numeric)) if idx.size else 0.0
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0))
        report.errors[name] = float(diff / scale) if scale >= 1e-8 else float(diff)
    return report
