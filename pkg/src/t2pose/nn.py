"""Parameter containers and a few layers built on :mod:`t2pose.tensor`."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class Module:
    """Base class; parameters are discovered by walking attributes."""

    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_params(self):
        return sum(p.data.size for p in self.parameters())


def param(array, dtype=tn.DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, scale=None):
        scale = 1 / np.sqrt(d_in) if scale is None else scale
        self.weight = param(rng.normal(0.0, scale, size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Two-layer perceptron with a GELU in between."""

    def __init__(self, d_in, d_hidden, d_out, rng):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tn.gelu(self.fc1(x)))
