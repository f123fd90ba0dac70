"""Trilinear resampling with half-pixel centres (no corner alignment)."""
import numpy as np

from ..errors import ParameterError


def _axis_weights(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _resize_axis(arr, axis, n_out):
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr
    i0, i1, frac = _axis_weights(n_in, n_out)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape).astype(arr.dtype)
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i1, axis=axis)
    return a0 + (a1 - a0) * frac


def trilinear_resize(volume, target_dims):
    """Resize the last three axes of ``volume`` to ``target_dims``.

    Accepts ``(D, H, W)`` or ``(C, D, H, W)`` (any leading axes).  Resizing to
    the current dims returns an unmodified copy.
    """
    arr = np.asarray(getattr(volume, "data", volume))
    target = tuple(int(t) for t in target_dims)
    if len(target) != 3 or min(target) < 1:
        raise ParameterError(f"target dims must be three positive integers, got {target_dims}")
    if arr.ndim < 3 or min(arr.shape[-3:]) < 1:
        raise ParameterError(f"cannot resize array of shape {arr.shape}")
    out = arr
    for k, n_out in enumerate(target):
        out = _resize_axis(out, arr.ndim - 3 + k, n_out)
    return np.array(out, copy=True) if out is arr else out
