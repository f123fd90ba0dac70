from collections import OrderedDict

import numpy as np

from ..errors import ParameterError, ShapeError
from .tensor import Tensor


class ParameterSet(OrderedDict):
    """Ordered ``name -> Tensor`` map with fixed shapes."""

    def __setitem__(self, name, value):
        if not isinstance(value, Tensor):
            raise ParameterError(f"parameter '{name}' must be a Tensor")
        if name in self and self[name].shape != value.shape:
            raise ShapeError(f"parameter '{name}' shape is fixed at {self[name].shape}, got {value.shape}")
        super().__setitem__(name, value)

    def add(self, name, array):
        if name in self:
            raise ParameterError(f"duplicate parameter name '{name}'")
        self[name] = Tensor(array, requires_grad=True, name=name)
        return self[name]

    def grads(self):
        return {k: p.grad for k, p in self.items()}

    def zero_grad(self):
        for p in self.values():
            p.grad = None

    def arrays(self):
        return OrderedDict((k, p.data) for k, p in self.items())

    def load_arrays(self, arrays):
        for k, p in self.items():
            if k not in arrays:
                raise ParameterError(f"missing parameter '{k}'")
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise ShapeError(f"parameter '{k}': expected {p.shape}, got {a.shape}")
            p.data = a.astype(p.data.dtype, copy=True)

    def astype(self, dtype):
        out = ParameterSet()
        for k, p in self.items():
            out.add(k, p.data.astype(dtype))
        return out
