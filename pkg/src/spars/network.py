"""Volumetric conv trunk shared by the presence classifier and the policy.

Four blocks of conv3d(3x3x3) -> batchnorm3d -> relu -> maxpool3d(2x2x2),
then five fully connected layers with ReLU between them.
"""
from __future__ import annotations

import copy
from collections import OrderedDict

import numpy as np

from .autodiff import (ParameterSet, Tensor, batchnorm3d, conv3d, flatten,
                       kaiming_uniform, linear, maxpool3d, pooled_dims, relu)
from .errors import ShapeError

DEFAULT_CHANNELS = (8, 16, 32, 64)
DEFAULT_FC = (256, 128, 64, 32)


class ConvNet:
    def __init__(self, input_dims, n_outputs, channels=DEFAULT_CHANNELS, fc_widths=DEFAULT_FC,
                 seed=0, dtype=np.float32, final_scale=1.0):
        self.input_dims = tuple(int(v) for v in input_dims)
        self.n_outputs = int(n_outputs)
        self.channels = tuple(channels)
        self.fc_widths = tuple(fc_widths)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params = ParameterSet()
        self.buffers = OrderedDict()
        c_in = 1
        for i, c in enumerate(self.channels):
            self.params.add(f"conv{i}.weight", kaiming_uniform(rng, (c, c_in, 3, 3, 3), c_in * 27, self.dtype))
            self.params.add(f"conv{i}.bias", np.zeros(c, self.dtype))
            self.params.add(f"bn{i}.gamma", np.ones(c, self.dtype))
            self.params.add(f"bn{i}.beta", np.zeros(c, self.dtype))
            self.buffers[f"bn{i}.running_mean"] = np.zeros(c, self.dtype)
            self.buffers[f"bn{i}.running_var"] = np.ones(c, self.dtype)
            c_in = c
        spatial = pooled_dims(self.input_dims, len(self.channels))
        width = c_in * int(np.prod(spatial))
        widths = self.fc_widths + (self.n_outputs,)
        for j, w in enumerate(widths):
            weight = kaiming_uniform(rng, (w, width), width, self.dtype)
            if j == len(widths) - 1:
                weight *= final_scale
            self.params.add(f"fc{j}.weight", weight)
            self.params.add(f"fc{j}.bias", np.zeros(w, self.dtype))
            width = w

    @property
    def n_fc(self):
        return len(self.fc_widths) + 1

    def forward(self, x, train=False, trace=None) -> Tensor:
        """Map ``(N, D, H, W)`` or ``(N, 1, D, H, W)`` volumes to ``(N, n_outputs)`` logits.

        If ``trace`` is a list, the inputs of every ReLU and max-pool are
        appended to it (used to locate kinks when checking gradients).
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 4:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        if x.shape[1:] != (1,) + self.input_dims:
            raise ShapeError(f"network expects input (N, 1, {self.input_dims}), got {x.shape}")
        p = self.params
        h = x
        for i in range(len(self.channels)):
            h = conv3d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=1, padding=1)
            h = batchnorm3d(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                            self.buffers[f"bn{i}.running_mean"], self.buffers[f"bn{i}.running_var"],
                            train=train)
            if trace is not None:
                trace.append(("relu", h.data))
            h = relu(h)
            if trace is not None:
                trace.append(("pool", h.data))
            h = maxpool3d(h)
        h = flatten(h)
        for j in range(self.n_fc):
            h = linear(h, p[f"fc{j}.weight"], p[f"fc{j}.bias"])
            if j < self.n_fc - 1:
                if trace is not None:
                    trace.append(("relu", h.data))
                h = relu(h)
        return h

    __call__ = forward

    # -- persistence ---------------------------------------------------
    def state_arrays(self):
        out = OrderedDict((k, t.data) for k, t in self.params.items())
        out.update(self.buffers)
        return out

    def load_state_arrays(self, arrays):
        self.params.load_arrays(arrays)
        for k, buf in self.buffers.items():
            if k not in arrays:
                raise ShapeError(f"missing buffer '{k}'")
            a = np.asarray(arrays[k])
            if a.shape != buf.shape:
                raise ShapeError(f"buffer '{k}': expected {buf.shape}, got {a.shape}")
            self.buffers[k] = a.astype(self.dtype, copy=True)

    def copy(self, dtype=None):
        dup = copy.deepcopy(self)
        if dtype is not None:
            dup.dtype = np.dtype(dtype)
            dup.params = self.params.astype(dtype)
            dup.buffers = OrderedDict((k, v.astype(dtype)) for k, v in self.buffers.items())
        return dup
