"""Parameter utilities: init, low-rank adapters, AdamW, lr schedules."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, affine, matmul, transpose


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def freeze(params: dict) -> None:
    for p in params.values():
        p.requires_grad = False
        p.zero_grad()


class LowRankAdapter:
    """Frozen base weight plus a trainable low-rank update.

    Effective weight is ``base + (alpha / r) * up @ down`` with base (m, n),
    down (r, n), up (m, r); ``up`` starts at zero so the adapter is exactly
    the identity update until trained. ``apply`` computes
    ``x @ effective.T + bias``; the base product reuses the stored (n, m)
    layout so a zero adapter reproduces the plain affine bit for bit.
    """

    def __init__(self, base_w: Tensor, bias: Tensor | None, rank: int, alpha: float,
                 rng: np.random.Generator):
        # base_w arrives in the network's (in, out) layout.
        n, m = base_w.shape
        if not 1 <= rank <= min(m, n):
            raise ValueError(f"adapter: rank {rank} not in [1, {min(m, n)}]")
        self._w_right = Tensor(base_w.data.copy())  # (n, m), frozen
        self.bias = Tensor(bias.data.copy()) if bias is not None else None
        self.rank = rank
        self.alpha = float(alpha)
        bound = 1.0 / np.sqrt(n)
        self.down = Tensor(rng.uniform(-bound, bound, size=(rank, n)), requires_grad=True)
        self.up = Tensor(np.zeros((m, rank)), requires_grad=True)

    @property
    def base(self) -> np.ndarray:
        """Base weight in the documented (m, n) orientation."""
        return self._w_right.data.T

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def effective_weight(self) -> np.ndarray:
        return self.base + self.scale * (self.up.data @ self.down.data)

    def apply(self, x: Tensor) -> Tensor:
        if self.bias is not None:
            y = affine(x, self._w_right, self.bias)
        else:
            y = matmul(x, self._w_right)
        low = matmul(matmul(x, transpose(self.down, (1, 0))), transpose(self.up, (1, 0)))
        return y + self.scale * low

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.down": self.down, f"{prefix}.up": self.up}


class AdamW:
    """AdamW with decoupled weight decay and global-norm clipping.

    Clipping is applied to the raw gradients before they enter the moment
    estimates. ``step`` returns the pre-clip global gradient norm. A NaN in
    any gradient aborts with the offending parameter's name.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 clip_norm: float | None = None):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> float:
        lr = self.lr if lr is None else float(lr)
        grads = {}
        sq = 0.0
        for name, p in self.params.items():
            g = p.grad
            if np.isnan(g).any():
                raise FloatingPointError(f"NaN gradient in parameter {name!r}")
            grads[name] = g
            sq += float((g * g).sum())
        norm = np.sqrt(sq)
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
            grads = {k: g * scale for k, g in grads.items()}

        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers and step counter as checkpointable tensors."""
        out = {"opt.step": np.array([float(self.step_count)])}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, table: dict[str, np.ndarray]) -> None:
        self.step_count = int(table["opt.step"][0])
        for name in self.params:
            self.m[name] = np.array(table[f"opt.m.{name}"], copy=True)
            self.v[name] = np.array(table[f"opt.v.{name}"], copy=True)


def cosine_warmup_lr(base_lr: float, step: int, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    frac = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))
