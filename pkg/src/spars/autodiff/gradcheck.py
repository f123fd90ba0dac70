"""Central finite differences for checking analytic gradients."""
from __future__ import annotations

import numpy as np


def numerical_gradient(fn, array, h=1e-3, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``array`` (perturbed in place).

    With ``indices`` (flat positions) only those entries are probed and a 1-d
    array is returned; otherwise the result has ``array``'s shape.
    """
    flat = array.reshape(-1)
    if not np.shares_memory(flat, array):
        raise ValueError("array must be contiguous so it can be perturbed in place")
    full = indices is None
    if full:
        indices = range(flat.size)
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(fn())
        flat[i] = orig - h
        f_minus = float(fn())
        flat[i] = orig
        out[k] = (f_plus - f_minus) / (2 * h)
    return out.reshape(array.shape) if full else out


def relative_error(analytic, numeric):
    """``||a - n|| / max(||a||, ||n||)`` over all entries (0 when both vanish)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def op_gradient_errors(op, arrays, h=1e-3, seed=0):
    """Relative error of each input's analytic gradient for ``sum(op(*inputs) * R)``.

    ``R`` is a fixed random weighting so every output element contributes.
    ``arrays`` are perturbed in place during the check and restored.
    """
    from .tensor import Tensor, backward, mul, tsum

    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    weights = rng.normal(size=out.shape).astype(out.dtype)
    backward(tsum(mul(out, Tensor(weights))))

    def fn():
        return float((op(*[Tensor(a) for a in arrays]).data * weights).sum())

    return [relative_error(t.grad, numerical_gradient(fn, a, h)) for t, a in zip(tensors, arrays)]


def kink_pattern(trace):
    """Which side of every kink a forward pass landed on.

    ``trace`` holds ``("relu", pre_activation)`` and ``("pool", pool_input)``
    entries; the pattern is the ReLU sign mask plus each 2x2x2 block's argmax.
    """
    out = []
    for kind, a in trace:
        if kind == "relu":
            out.append(a > 0)
        else:
            n, c, d, h, w = a.shape
            a = np.pad(a, ((0, 0), (0, 0), (0, d % 2), (0, h % 2), (0, w % 2)), mode="edge")
            D, H, W = a.shape[2:]
            blocks = a.reshape(n, c, D // 2, 2, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
            out.append(blocks.reshape(n, c, D // 2, H // 2, W // 2, 8).argmax(axis=-1))
    return out


def smooth_coordinate_gradients(loss_fn, params, h=1e-3, per_param=4, seed=0, max_tries=200):
    """Analytic vs central-difference gradients on kink-free coordinates.

    ``loss_fn(trace)`` must run the forward pass (appending to ``trace``) and
    return a scalar Tensor; ``params`` maps names to Tensors.  For each
    parameter, up to ``per_param`` randomly chosen coordinates are probed,
    skipping any whose kink pattern at ``theta +/- h`` differs from the one at
    ``theta``: a finite difference straddling a kink does not estimate the
    derivative.  Returns ``(analytic, numeric, skipped)``.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    base_trace = []
    loss_fn(base_trace).backward()
    base = kink_pattern(base_trace)

    def same_pattern():
        tr = []
        value = loss_fn(tr).item()
        return value, all(np.array_equal(a, b) for a, b in zip(base, kink_pattern(tr)))

    analytic, numeric, skipped = [], [], 0
    for p in params.values():
        flat = p.data.reshape(-1)
        accepted = 0
        for i in rng.permutation(flat.size)[:max_tries]:
            orig = flat[i]
            flat[i] = orig + h
            f_plus, ok_plus = same_pattern()
            flat[i] = orig - h
            f_minus, ok_minus = same_pattern()
            flat[i] = orig
            if not (ok_plus and ok_minus):
                skipped += 1
                continue
            analytic.append(p.grad.reshape(-1)[i])
            numeric.append((f_plus - f_minus) / (2 * h))
            accepted += 1
            if accepted == per_param:
                break
    return np.array(analytic), np.array(numeric), skipped
