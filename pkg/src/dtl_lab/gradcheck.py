"""Central-difference gradient checking against :func:`dtl_lab.tensor.backward`."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Param, Tensor, backward, no_graph


def finite_difference(fn: Callable[[], Tensor], param: Param, eps: float) -> np.ndarray:
    base = param.numpy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    try:
        for j in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[j] += eps
            param.assign(bumped.reshape(base.shape))
            with no_graph():
                plus = float(fn().numpy())
            bumped[j] = base.reshape(-1)[j] - eps
            param.assign(bumped.reshape(base.shape))
            with no_graph():
                minus = float(fn().numpy())
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise FloatingPointError(f"non-finite loss while perturbing {param.name}[{j}]")
            flat[j] = (plus - minus) / (2.0 * eps)
    finally:
        param.assign(base)
    return grad


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Param],
    eps: float = 1e-5,
    report: dict[str, float] | None = None,
) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` must rebuild the loss from scratch on every call and be
    deterministic.  Relative error uses ``max(|a|, |b|, 1e-8)`` as the
    denominator.  Pass ``report`` to collect the per-parameter maxima.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters; {p.name} is {p.dtype.name}")
    with Graph():
        loss = fn()
    if not np.isfinite(loss.numpy()):
        raise FloatingPointError("loss is not finite")
    grads = backward(loss)
    worst = 0.0
    for p in params:
        analytic = grads.get(p.name)
        if analytic is None:
            analytic = np.zeros(p.shape, dtype=p.dtype)
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError(f"non-finite analytic gradient for {p.name}")
        numeric = finite_difference(fn, p, eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        err = float(np.max(np.abs(analytic - numeric) / denom)) if p.size else 0.0
        if report is not None:
            report[p.name] = err
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# whole-strategy checks on a micro backbone


def micro_config():
    from .vit import ViTConfig

    return ViTConfig(N=2, d=8, heads=2, img=12, patch=4, mlp_ratio=2)


def randomize_trainable(model, seed: int = 0, scale: float = 0.3, side_scale: float = 0.005) -> None:
    """Move every trainable param off its initialization (zero-init factors
    would otherwise make some gradients structurally zero).

    Side-network output factors get a smaller kick so the side state stays in
    the active range of the sharp swish; deep in its flat tail the gradients
    shrink to ~1e-13 and only finite-difference roundoff is left to compare.
    """
    rng = np.random.default_rng([seed, 0x6C])
    for name, p in sorted(model.trainable_params().items()):
        s = side_scale if name.startswith("csn.") and not name.endswith(".a") else scale
        p.assign(p.numpy() + rng.normal(0.0, s, p.shape))


def check_spec(spec, seed: int = 0, batch: int = 2, n_classes: int = 3, eps: float = 1e-5, report=None) -> float:
    """Max relative gradient error of ``spec`` on the micro backbone (float64)."""
    from .adapters import attach
    from .vit import ViT

    vit = ViT.init(micro_config(), seed=seed, dtype=np.float64)
    model = attach(spec, vit, n_classes=n_classes, seed=seed)
    randomize_trainable(model, seed)
    rng = np.random.default_rng([seed, 0x6D])
    x = Tensor(rng.standard_normal((batch, 3, vit.config.img, vit.config.img)))
    y = rng.integers(0, n_classes, batch)
    params = [p for _, p in sorted(model.trainable_params().items())]
    return grad_check(lambda: model.loss(x, y), params, eps=eps, report=report)
