"""Shared test utilities: finite-difference gradient checking."""

import numpy as np

from milliflow.autodiff import Tensor


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def jitter_params(tensors: dict[str, Tensor], rng, scale: float = 0.05):
    """Nudge parameters off their initial values before a finite-difference
    check.  Zero-initialized biases put ReLU kinks exactly at the evaluation
    point, where one-sided slopes and the subgradient legitimately disagree."""
    for t in tensors.values():
        t.data = t.data + rng.normal(scale=scale, size=t.shape)


def check_param_grads(
    loss_fn,
    tensors: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int = 6,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_fn` rebuilds the scalar loss from scratch; `tensors` maps names to
    the leaf tensors to check.  A few entries per tensor are probed.  Returns
    the worst relative error observed (asserting it stays below `tol`).
    """
    for t in tensors.values():
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    assert np.isfinite(loss.item())

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in tensors.items():
        assert t.grad is not None, f"no gradient reached {name}"
        flat = t.data.reshape(-1)
        n = flat.size
        idxs = rng.choice(n, size=min(max_entries, n), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = t.grad.reshape(-1)[i]
            err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
            worst = max(worst, err)
            assert err < tol, (
                f"{name}[{i}]: analytic={analytic:.8g} numeric={numeric:.8g} "
                f"rel={err:.3g}"
            )
    return worst
