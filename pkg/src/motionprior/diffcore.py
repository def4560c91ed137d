"""Optimization plumbing: flat parameter vectors, gradient checks, optimizers.

A differentiable objective is any callable mapping a flat float64 numpy
vector to ``(value, gradient)``. Gradients may come from anywhere; in this
package they are produced by torch autograd through
:func:`torch_diff_function`, while the optimizers below are self-contained.
"""

from typing import Callable

import numpy as np
import torch

DiffFunction = Callable[[np.ndarray], tuple]

# Debug hook: when nonzero, torch-backed objectives add this to the first
# gradient component. Lets the CLI self-check prove it can catch a bad grad.
_GRADIENT_FAULT = 0.0


def set_gradient_fault(value: float) -> None:
    global _GRADIENT_FAULT
    _GRADIENT_FAULT = float(value)


class ParamVector:
    """A flat float64 vector with named, contiguous, non-overlapping segments."""

    def __init__(self, segments, data=None):
        # segments: ordered (name, size) pairs
        self.names = [name for name, _ in segments]
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate segment names")
        self.slices = {}
        offset = 0
        for name, size in segments:
            if size <= 0:
                raise ValueError(f"segment {name} must have positive size")
            self.slices[name] = slice(offset, offset + size)
            offset += size
        self.size = offset
        if data is None:
            self.data = np.zeros(offset, dtype=np.float64)
        else:
            data = np.asarray(data, dtype=np.float64).ravel()
            if data.size != offset:
                raise ValueError(f"data has {data.size} entries, segments need {offset}")
            self.data = data.copy()

    def get(self, name: str) -> np.ndarray:
        return self.data[self.slices[name]]

    def set(self, name: str, values) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        seg = self.slices[name]
        if values.size != seg.stop - seg.start:
            raise ValueError(f"size mismatch for segment {name}")
        self.data[seg] = values

    def copy(self) -> "ParamVector":
        out = ParamVector([(n, self.slices[n].stop - self.slices[n].start) for n in self.names])
        out.data[:] = self.data
        return out


def grad_check(f: DiffFunction, x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error of f's gradient against central differences.

    Per-coordinate error is |g_a - g_n| / max(1, |g_a|, |g_n|).
    """
    x = np.asarray(x, dtype=np.float64)
    _, grad = f(x)
    grad = np.asarray(grad, dtype=np.float64)
    worst = 0.0
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = eps
        f_plus, _ = f(x + step)
        f_minus, _ = f(x - step)
        numeric = (f_plus - f_minus) / (2.0 * eps)
        denom = max(1.0, abs(grad[i]), abs(numeric))
        worst = max(worst, abs(grad[i] - numeric) / denom)
    return worst


class LbfgsResult:
    def __init__(self, x, value, trace, evaluations, converged, no_progress):
        self.x = x
        self.value = value
        self.trace = trace  # objective value at start plus each accepted step
        self.evaluations = evaluations
        self.converged = converged  # gradient tolerance reached
        self.no_progress = no_progress  # line search gave up before max_iters

    def __repr__(self):
        return (
            f"LbfgsResult(value={self.value:.6g}, iters={len(self.trace) - 1}, "
            f"converged={self.converged})"
        )


def lbfgs_minimize(
    f: DiffFunction,
    x0: np.ndarray,
    max_iters: int,
    step: float = 1.0,
    history: int = 10,
    grad_tol: float = 1e-7,
    max_halvings: int = 20,
) -> LbfgsResult:
    """Two-loop recursion L-BFGS with a fixed unit step plus halving safeguard.

    Each iteration tries the full step along the two-loop direction and
    halves it (at most ``max_halvings`` times) until the objective strictly
    decreases; the trace of accepted values is therefore monotone and the
    returned iterate is the best seen. Stops early when the gradient
    infinity-norm drops below ``grad_tol`` or no halved step makes progress.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    x = np.asarray(x0, dtype=np.float64).copy()
    value, grad = f(x)
    grad = np.asarray(grad, dtype=np.float64).copy()
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise FloatingPointError("objective not finite at the starting point")
    evaluations = 1
    trace = [float(value)]
    s_hist: list = []
    y_hist: list = []
    converged = bool(np.max(np.abs(grad)) < grad_tol)
    no_progress = False

    for _ in range(max_iters):
        if converged:
            break
        direction = _two_loop_direction(grad, s_hist, y_hist)
        alpha = step
        accepted = False
        for _ in range(max_halvings + 1):
            x_try = x + alpha * direction
            v_try, g_try = f(x_try)
            evaluations += 1
            if np.isfinite(v_try) and v_try < value and np.all(np.isfinite(g_try)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            no_progress = True
            break
        s = x_try - x
        y = np.asarray(g_try, dtype=np.float64) - grad
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > history:
                s_hist.pop(0)
                y_hist.pop(0)
        else:
            # Non-positive curvature invalidates the quasi-Newton model;
            # restart from scaled steepest descent rather than going stale.
            s_hist.clear()
            y_hist.clear()
        x, value, grad = x_try, float(v_try), np.asarray(g_try, dtype=np.float64).copy()
        trace.append(value)
        converged = bool(np.max(np.abs(grad)) < grad_tol)

    return LbfgsResult(x, value, trace, evaluations, converged, no_progress)


def _two_loop_direction(grad, s_hist, y_hist):
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
        rho = 1.0 / (y @ s)
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def adamax_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One update of the infinity-norm Adam variant.

    m_t = b1 m + (1-b1) g;  u_t = max(b2 u, |g|);
    theta -= lr / (1 - b1^t) * m_t / (u_t + eps).
    Returns (new_params, state); pass state={} on the first call.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not state:
        state.update(m=np.zeros_like(params), u=np.zeros_like(params), t=0)
    state["t"] += 1
    state["m"] = betas[0] * state["m"] + (1.0 - betas[0]) * grads
    state["u"] = np.maximum(betas[1] * state["u"], np.abs(grads))
    bias = 1.0 - betas[0] ** state["t"]
    return params - (lr / bias) * state["m"] / (state["u"] + eps), state


def torch_diff_function(fn, size: int) -> DiffFunction:
    """Wrap a torch scalar function of a flat tensor as a DiffFunction."""

    def wrapped(x: np.ndarray):
        t = torch.as_tensor(np.asarray(x, dtype=np.float64)).clone().requires_grad_(True)
        value = fn(t)
        (grad,) = torch.autograd.grad(value, t, allow_unused=False)
        g = grad.detach().numpy().astype(np.float64).copy()
        if _GRADIENT_FAULT != 0.0:
            g[0] += _GRADIENT_FAULT
        return float(value.detach()), g

    wrapped.size = size
    return wrapped
