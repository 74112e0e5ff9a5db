"""Dense float math for a small trainable transformer.

Conventions: a matrix is a 2-D row-major numpy array. Training runs in
float32; every op also accepts float64 so gradient checks can run at
higher precision. Reductions that feed reported numbers (losses, norms)
accumulate in float64 regardless of storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IGNORE_MARK = -1


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a (n, k), b (k, m) -> (n, m)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """x (n, m) -> (n, m); rows are shifted by their max so huge logits cannot overflow."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """x (n, d), gamma (d,), beta (d,) -> (n, d), each row normalized to zero mean / unit variance."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gamma + beta


def log_softmax_rows_f64(x: np.ndarray) -> np.ndarray:
    """x (n, m) -> (n, m) log-probabilities, computed in float64 via log-sum-exp."""
    x64 = x.astype(np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def cross_entropy(
    logits: np.ndarray, targets: np.ndarray, ignore_mark: int = IGNORE_MARK
) -> tuple[float, np.ndarray, int]:
    """logits (n, v), targets (n,) -> (mean loss, dloss/dlogits (n, v), counted rows).

    Rows whose target equals ignore_mark contribute nothing to the loss and get
    zero gradient. With zero counted rows the loss is 0.0 and count flags it.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-D logits, got {logits.ndim}-D")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise ValueError(f"targets shape {targets.shape} does not match logits rows {logits.shape[0]}")
    keep = targets != ignore_mark
    count = int(keep.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        return 0.0, grad, 0
    kept_targets = targets[keep]
    if kept_targets.min() < 0 or kept_targets.max() >= logits.shape[1]:
        raise ValueError("target id out of vocabulary range")
    logp = log_softmax_rows_f64(logits[keep])
    loss = -logp[np.arange(count), kept_targets].sum() / count
    # d(mean nll)/dlogits = (softmax - onehot) / count on counted rows
    p = softmax_rows(logits[keep])
    p[np.arange(count), kept_targets] -= 1.0
    grad[keep] = p / count
    return float(loss), grad.astype(logits.dtype), count


@dataclass
class Parameter:
    """A trainable tensor paired with its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


@dataclass
class AdamState:
    """Per-parameter Adam moments plus hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Parameter, lr: float = 3e-4) -> "AdamState":
        return cls(m=np.zeros_like(param.value), v=np.zeros_like(param.value), lr=lr)


def adam_step(param: Parameter, state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    if state.m.shape != param.value.shape:
        raise ValueError(f"optimizer state shape {state.m.shape} != param shape {param.value.shape}")
    state.step += 1
    g = param.grad
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    mhat = state.m / (1.0 - state.beta1**state.step)
    vhat = state.v / (1.0 - state.beta2**state.step)
    param.value -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(param.value.dtype)


def grad_check(
    loss_fn,
    params: dict[str, Parameter],
    epsilon: float = 1e-3,
    n_coords: int = 120,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare params' stored analytic grads against central differences of loss_fn.

    loss_fn() re-evaluates the loss from the params' current values. Coordinates
    are sampled across all parameters; returns the max relative error. Callers
    wanting tight tolerances should hold params in float64 (float32 evaluation
    noise at epsilon 1e-3 swamps small gradient entries).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    names = sorted(params)
    sizes = np.array([params[n].value.size for n in names])
    if sizes.sum() == 0:
        raise ValueError("grad_check needs at least one parameter coordinate")
    flat_ids = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    base = loss_fn()
    if not np.isfinite(base):
        raise ValueError("non-finite loss at the unperturbed point")
    # snapshot center-point grads; the probe calls below overwrite p.grad
    analytic = {n: params[n].grad.copy() for n in names}
    worst = 0.0
    for fid in flat_ids:
        pi = int(np.searchsorted(bounds, fid, side="right"))
        offset = int(fid - (bounds[pi - 1] if pi else 0))
        p = params[names[pi]]
        idx = np.unravel_index(offset, p.value.shape)
        orig = p.value[idx]
        p.value[idx] = orig + epsilon
        up = loss_fn()
        p.value[idx] = orig - epsilon
        down = loss_fn()
        p.value[idx] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError("non-finite loss during finite-difference probe")
        fd = (up - down) / (2.0 * epsilon)
        an = float(analytic[names[pi]][idx])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        worst = max(worst, rel)
    return worst
