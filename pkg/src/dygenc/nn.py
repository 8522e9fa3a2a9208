"""Small shared building blocks for the model components."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def linear(x, w, b=None):
    out = ad.matmul(x, w)
    if b is not None:
        out = ad.add(out, b)
    return out


class Module:
    """Base for parameterized components: subclasses register tensors by name."""

    def __init__(self):
        self._params = {}

    def register(self, name, tensor):
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def register_module(self, prefix, module):
        for name, t in module.params().items():
            self._params[f"{prefix}.{name}"] = t
        return module

    def params(self):
        return dict(self._params)

    def load_arrays(self, arrays, prefix=""):
        """Copy values into registered tensors (shapes must match)."""
        for name, t in self._params.items():
            key = f"{prefix}{name}"
            if key in arrays:
                arr = np.asarray(arrays[key], dtype=t.data.dtype)
                if arr.shape != t.data.shape:
                    raise ValueError(f"shape mismatch for {key}: {arr.shape} vs {t.data.shape}")
                t.data = arr.copy()

    def export_arrays(self, prefix=""):
        return {f"{prefix}{name}": t.data.copy() for name, t in self._params.items()}
