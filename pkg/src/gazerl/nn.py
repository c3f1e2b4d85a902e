"""Layers, initializers, and optimization utilities on top of the tape.

Modules here are thin parameter containers: they own DTensor leaves and
apply the matching tensor primitive in __call__.  Parameter traversal is
name-based so optimizers and checkpoints stay order-stable.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTensor, conv2d, linear


def orthogonal_init(rng, shape, gain=1.0, dtype=np.float32):
    """Orthogonal weight init via QR of a Gaussian matrix.

    The leading dimension is treated as rows; remaining dims are
    flattened, matching the usual conv/linear convention.
    """
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    flat = rng.standard_normal((rows, cols))
    if rows < cols:
        flat = flat.T
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))  # make the factorization unique
    if rows < cols:
        q = q.T
    return (gain * q).reshape(shape).astype(dtype)


class Module:
    """Base container: children and parameters discovered by attribute walk."""

    def parameters(self):
        """Yield (name, DTensor) pairs in a deterministic order."""
        out = []
        for key in sorted(vars(self)):
            val = vars(self)[key]
            if isinstance(val, DTensor) and val.requires_grad:
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend((f"{key}.{n}", p) for n, p in val.parameters())
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend((f"{key}.{i}.{n}", p) for n, p in item.parameters())
        return out

    def param_tensors(self):
        return [p for _, p in self.parameters()]

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.parameters()}

    def load_state_dict(self, state):
        for name, p in self.parameters():
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None, gain=np.sqrt(2.0),
                 zero_init=False, dtype=np.float32):
        if zero_init:
            w = np.zeros((out_features, in_features), dtype=dtype)
        else:
            w = orthogonal_init(rng, (out_features, in_features), gain=gain, dtype=dtype)
        self.weight = DTensor(w, requires_grad=True, dtype=dtype)
        self.bias = DTensor(np.zeros(out_features, dtype=dtype), requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, rng=None,
                 gain=np.sqrt(2.0), zero_init=False, dtype=np.float32):
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero_init:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = orthogonal_init(rng, shape, gain=gain, dtype=dtype)
        self.weight = DTensor(w, requires_grad=True, dtype=dtype)
        self.bias = DTensor(np.zeros(out_channels, dtype=dtype), requires_grad=True, dtype=dtype)
        self.stride = stride

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride)


def global_grad_norm(params):
    """L2 norm over the concatenation of all parameter gradients."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_grad_norm(params, max_norm):
    """Scale all gradients in place so the global norm is <= max_norm.

    Returns the pre-clip norm (useful for logging).
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class Adam:
    """Adam with bias correction; state is keyed by parameter position."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
