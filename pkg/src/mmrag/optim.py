"""Named parameters, AdamW with decoupled weight decay, a splittable
counter-based RNG, and a central-difference gradient checker.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ContractError
from .tensor import Tensor, no_grad


class Parameter:
    """A named, trainable array. Frozen parameters receive no gradient and
    no optimizer updates, but values still flow through them."""

    def __init__(self, name: str, data, frozen: bool = False):
        self.name = name
        self.frozen = bool(frozen)
        self.tensor = Tensor(np.asarray(data, dtype=np.float64),
                             requires_grad=not self.frozen)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def set_frozen(self, flag: bool) -> None:
        self.frozen = bool(flag)
        self.tensor.requires_grad = not self.frozen
        if self.frozen:
            self.tensor.grad = None

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, frozen={self.frozen})"


class AdamWState:
    """Optimizer state: step counter plus per-parameter moment arrays."""

    def __init__(self, lr: float, beta1: float, beta2: float,
                 weight_decay: float, eps: float):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps


class AdamW:
    """AdamW: bias-corrected moments, decay applied to the parameter itself
    (never to the gradient). Gradients are left untouched by ``step``."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.99, weight_decay: float = 0.01,
                 eps: float = 1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names in optimizer")
        self.state = AdamWState(lr, beta1, beta2, weight_decay, eps)

    def zero_grad(self) -> None:
        """Reset unfrozen gradients to zero buffers so a step is valid even
        for parameters a particular batch never touched."""
        for p in self.params:
            if p.frozen:
                p.zero_grad()
            else:
                p.tensor.grad = np.zeros_like(p.data)

    def step(self, lr: float | None = None) -> None:
        s = self.state
        s.step += 1
        lr_t = s.lr if lr is None else lr
        b1c = 1.0 - s.beta1 ** s.step
        b2c = 1.0 - s.beta2 ** s.step
        for p in self.params:
            if p.frozen:
                continue
            if p.tensor.grad is None:
                raise ContractError(f"parameter {p.name} has no gradient")
            g = p.tensor.grad
            m = s.m.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                s.m[p.name] = m
                s.v[p.name] = np.zeros_like(p.data)
            v = s.v[p.name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            w = p.tensor.data
            if s.weight_decay:
                w -= lr_t * s.weight_decay * w
            w -= lr_t * (m / b1c) / (np.sqrt(v / b2c) + s.eps)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup: int) -> float:
    """Linear warmup into a cosine decay to zero."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * progress))


class Rng:
    """Deterministic splittable stream backed by the counter-based Philox
    generator; equal seeds give bit-identical draws across runs."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def split(self, name: str) -> "Rng":
        """Derive an independent child stream keyed by ``name``."""
        digest = hashlib.sha256(f"{self.seed}:{name}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def gradient_check(f, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of scalar ``f()`` against central
    differences, coordinate by coordinate over every unfrozen parameter.

    Returns the max relative error with denominator max(|a|, |n|, 1e-8).
    ``f`` must be deterministic.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"eps {eps} outside [1e-7, 1e-3]")
    params = [p for p in params if not p.frozen]
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {p.name: (np.zeros_like(p.data) if p.tensor.grad is None
                         else p.tensor.grad.copy())
                for p in params}
    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            a_flat = analytic[p.name].reshape(-1)
            for i in range(flat.shape[0]):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(f().data)
                flat[i] = orig - eps
                f_minus = float(f().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
                worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst
