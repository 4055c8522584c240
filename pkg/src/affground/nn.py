"""Parameter containers and the attention/MLP blocks shared by the
encoder stacks and the query-adaption head."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Scaled uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return (rng.random(shape) * 2.0 - 1.0) * bound


class Module:
    """Minimal parameter registry: any Tensor attribute with
    requires_grad is a parameter; Modules and lists of Modules recurse.
    Iteration follows attribute insertion order, so construction order
    fixes parameter order."""

    def named_parameters(self, prefix: str = ""):
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={missing}, unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        if zero_init:
            self.weight = _param(np.zeros((d_in, d_out)))
        else:
            self.weight = _param(uniform_init(rng, (d_in, d_out), d_in))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Two-layer feed-forward with GELU."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, d_out: int | None = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, d_out if d_out is not None else dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention; queries of width d_q attend over a
    key/value sequence of width d_kv. ``zero_out`` zeroes the output
    projection so the surrounding residual block starts as an identity."""

    def __init__(self, d_q: int, d_kv: int, heads: int, rng: np.random.Generator,
                 zero_out: bool = False):
        if d_q % heads != 0:
            raise ConfigError(f"attention width {d_q} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_q // heads
        self.wq = Linear(d_q, d_q, rng)
        self.wk = Linear(d_kv, d_q, rng)
        self.wv = Linear(d_kv, d_q, rng)
        self.wo = Linear(d_q, d_q, rng, zero_init=zero_out)

    def _split(self, x: Tensor, b: int, n: int) -> Tensor:
        x = T.reshape(x, (b, n, self.heads, self.d_head))
        x = T.transpose(x, (0, 2, 1, 3))
        return T.reshape(x, (b * self.heads, n, self.d_head))

    def __call__(self, q_in: Tensor, kv: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """key_mask: optional (B, Nk) booleans; False keys (e.g. padding)
        are excluded from the attention weights."""
        b, nq, _ = q_in.shape
        nk = kv.shape[1]
        q = self._split(self.wq(q_in), b, nq)
        k = self._split(self.wk(kv), b, nk)
        v = self._split(self.wv(kv), b, nk)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.d_head))
        if key_mask is not None:
            bias = np.where(np.asarray(key_mask, bool), 0.0, -1e9)  # (B, Nk)
            bias = np.broadcast_to(bias[:, None, None, :], (b, self.heads, nq, nk))
            scores = T.add(scores, Tensor(bias.reshape(b * self.heads, nq, nk).copy()))
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)
        ctx = T.reshape(ctx, (b, self.heads, nq, self.d_head))
        ctx = T.transpose(ctx, (0, 2, 1, 3))
        ctx = T.reshape(ctx, (b, nq, self.heads * self.d_head))
        return self.wo(ctx)


class TransformerBlock(Module):
    """Pre-norm self-attention + MLP block with residuals."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)

    def __call__(self, x: Tensor, branch_scale=None, key_mask=None) -> Tensor:
        """branch_scale: optional callable returning a stochastic-depth
        multiplier (0.0 drops the branch, 1/(1-p) rescales a kept one)."""
        s1 = 1.0 if branch_scale is None else branch_scale()
        if s1 != 0.0:
            n = self.ln1(x)
            h = self.attn(n, n, key_mask)
            x = T.add(x, T.mul(h, s1) if s1 != 1.0 else h)
        s2 = 1.0 if branch_scale is None else branch_scale()
        if s2 != 0.0:
            h = self.mlp(self.ln2(x))
            x = T.add(x, T.mul(h, s2) if s2 != 1.0 else h)
        return x


def drop_path_scale(rng: np.random.Generator | None, p: float):
    """Returns a branch_scale callable for stochastic depth, or None when
    disabled (eval mode, p == 0, or no rng supplied)."""
    if rng is None or p <= 0.0:
        return None

    def scale() -> float:
        return 0.0 if rng.random() < p else 1.0 / (1.0 - p)

    return scale
