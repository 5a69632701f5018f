"""Neural building blocks: linear layers, MLP heads, and a transformer encoder.

All blocks are plain containers of :class:`~cogfuse.autodiff.Tensor`
parameters with functional ``__call__`` methods.  Weights are drawn
Glorot-uniform from a caller-supplied generator so that a given
(architecture, seed) pair always reproduces the same bits; biases and
layer-norm offsets start at zero, layer-norm gains at one.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigurationError, DimensionError


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    """Affine map x @ w + b."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = Tensor(glorot_uniform(rng, d_in, d_out), grad_enabled=True)
        self.b = Tensor(np.zeros(d_out), grad_enabled=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class MlpHead:
    """Feed-forward head with GELU hidden layers and a linear output layer.

    ``widths`` lists every layer width including input and output, e.g.
    ``[32, 64, 16, 2]``.  The forward pass returns both the output and the
    activation of the last hidden layer (the input itself when there are no
    hidden layers); downstream fusion consumes that penultimate feature.
    """

    def __init__(self, widths: list[int], rng: np.random.Generator):
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigurationError(f"mlp head needs at least [d_in, d_out] positive widths, got {widths}")
        self.widths = list(widths)
        self.layers = [Linear(widths[i], widths[i + 1], rng) for i in range(len(widths) - 1)]

    @property
    def penultimate_width(self) -> int:
        return self.widths[-2]

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.widths[0]:
            raise DimensionError(f"mlp head expects width {self.widths[0]}, got {x.shape}")
        h = x
        for layer in self.layers[:-1]:
            h = ad.gelu(layer(h))
        return self.layers[-1](h), h

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_params(f"{prefix}.{i}"))
        return out


class MultiHeadAttention:
    """Bidirectional scaled dot-product attention over a token sequence.

    No masking and no dropout; every token attends to every token of its
    own sequence.  Scores are scaled by 1/sqrt(d/H).
    """

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads != 0:
            raise ConfigurationError(f"head count {n_heads} must divide width {d}")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def __call__(self, x: Tensor, return_weights: bool = False):
        if x.shape[-1] != self.d:
            raise DimensionError(f"attention expects width {self.d}, got {x.shape}")
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        inv = 1.0 / math.sqrt(self.d_head)
        ctx, weights = [], []
        for h in range(self.n_heads):
            lo, hi = h * self.d_head, (h + 1) * self.d_head
            qh, kh, vh = (ad.take_last(t, lo, hi) for t in (q, k, v))
            attn = ad.softmax(ad.matmul(qh, ad.swap_last(kh)) * inv)
            ctx.append(ad.matmul(attn, vh))
            if return_weights:
                weights.append(attn)
        out = self.wo(ad.concat_last(ctx))
        return (out, weights) if return_weights else out

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("wq", "wk", "wv", "wo"):
            out.update(getattr(self, name).named_params(f"{prefix}.{name}"))
        return out


class EncoderLayer:
    """Post-norm residual block: layer_norm(x + attn(x)), then layer_norm(y + ffn(y))."""

    def __init__(self, d: int, n_heads: int, ffn_mult: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.gamma1 = Tensor(np.ones(d), grad_enabled=True)
        self.beta1 = Tensor(np.zeros(d), grad_enabled=True)
        self.ff1 = Linear(d, ffn_mult * d, rng)
        self.ff2 = Linear(ffn_mult * d, d, rng)
        self.gamma2 = Tensor(np.ones(d), grad_enabled=True)
        self.beta2 = Tensor(np.zeros(d), grad_enabled=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.layer_norm(x + self.attn(x), self.gamma1, self.beta1)
        return ad.layer_norm(h + self.ff2(ad.gelu(self.ff1(h))), self.gamma2, self.beta2)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.named_params(f"{prefix}.attn")
        out[f"{prefix}.ln1.gamma"] = self.gamma1
        out[f"{prefix}.ln1.beta"] = self.beta1
        out.update(self.ff1.named_params(f"{prefix}.ff1"))
        out.update(self.ff2.named_params(f"{prefix}.ff2"))
        out[f"{prefix}.ln2.gamma"] = self.gamma2
        out[f"{prefix}.ln2.beta"] = self.beta2
        return out


class TransformerEncoderStack:
    """Stack of identical encoder layers applied in sequence."""

    def __init__(self, d: int, n_heads: int, n_layers: int, ffn_mult: int, rng: np.random.Generator):
        if n_layers < 1:
            raise ConfigurationError(f"encoder needs at least one layer, got {n_layers}")
        self.d = d
        self.layers = [EncoderLayer(d, n_heads, ffn_mult, rng) for _ in range(n_layers)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_params(f"{prefix}.{i}"))
        return out


# ---------------------------------------------------------------------------
# parameter (de)serialization
# ---------------------------------------------------------------------------


def params_to_payload(params: dict[str, Tensor]) -> dict[str, dict]:
    """JSON-ready mapping of parameter name -> shape + flat float64 values."""
    return {
        name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
        for name, t in params.items()
    }


def load_params_payload(params: dict[str, Tensor], payload: dict[str, dict]) -> None:
    """Write serialized values back into an existing parameter set, in place."""
    missing = set(params) ^ set(payload)
    if missing:
        raise DimensionError(f"parameter names do not match checkpoint: {sorted(missing)}")
    for name, t in params.items():
        entry = payload[name]
        shape = tuple(entry["shape"])
        if shape != t.data.shape:
            raise DimensionError(f"checkpoint shape {shape} != model shape {t.data.shape} for {name}")
        t.data = np.asarray(entry["data"], dtype=np.float64).reshape(shape)


def clone_param_data(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Snapshot of parameter values (copies)."""
    return {name: t.data.copy() for name, t in params.items()}


def restore_param_data(params: dict[str, Tensor], snapshot: dict[str, np.ndarray]) -> None:
    for name, t in params.items():
        t.data = snapshot[name].copy()
