"""Additive modifications (delta-H producers) under one shared interface.

The multi-head family splits the bottleneck's down and/or up projection
into head matrices and concatenates the per-head results.  Baselines
(bottleneck adapter, LoRA, bias-only tuning) live behind the same
interface so the harness can swap them freely.

No projection here carries a bias; parameter counts stay exact:
  down / up / down_up : 2*d*r
  down_up_pair        : d*r + r*d/n_heads
"""

from __future__ import annotations

import enum

import numpy as np

from .tensor import DimensionError, concat, gelu, matmul, parameter


class ConfigError(ValueError):
    """Raised for invalid module configuration at construction time."""


class Variant(enum.Enum):
    DOWN = "down"
    UP = "up"
    DOWN_UP = "down_up"
    DOWN_UP_PAIR = "down_up_pair"


class MultiHeadModification:
    """Bottleneck with head-partitioned projections: X' -> delta-H in (N, d)."""

    def __init__(self, variant, d, r, n_heads, in_dim=None, dtype=np.float32):
        if not isinstance(variant, Variant):
            variant = Variant(variant)
        self.variant = variant
        self.d = int(d)
        self.r = int(r)
        self.n_heads = int(n_heads)
        self.in_dim = int(in_dim) if in_dim is not None else int(d)
        if variant in (Variant.DOWN, Variant.DOWN_UP, Variant.DOWN_UP_PAIR) and self.r % self.n_heads:
            raise ConfigError(f"n_heads={n_heads} must divide r={r} for variant {variant.value}")
        if variant in (Variant.UP, Variant.DOWN_UP, Variant.DOWN_UP_PAIR) and self.d % self.n_heads:
            raise ConfigError(f"n_heads={n_heads} must divide d={d} for variant {variant.value}")
        self.params = {}
        nh, rh, dh = self.n_heads, self.r // self.n_heads, self.d // self.n_heads
        zeros = lambda shape: parameter(np.zeros(shape, dtype=dtype))
        if variant is Variant.DOWN:
            for i in range(nh):
                self.params[f"down_{i}"] = zeros((self.in_dim, rh))
            self.params["up"] = zeros((self.r, self.d))
        elif variant is Variant.UP:
            self.params["down"] = zeros((self.in_dim, self.r))
            for i in range(nh):
                self.params[f"up_{i}"] = zeros((self.r, dh))
        elif variant is Variant.DOWN_UP:
            for i in range(nh):
                self.params[f"down_{i}"] = zeros((self.in_dim, rh))
            for i in range(nh):
                self.params[f"up_{i}"] = zeros((self.r, dh))
        else:  # DOWN_UP_PAIR
            for i in range(nh):
                self.params[f"down_{i}"] = zeros((self.in_dim, rh))
                self.params[f"up_{i}"] = zeros((rh, dh))

    def param_count(self):
        if self.variant is Variant.DOWN_UP_PAIR:
            return self.in_dim * self.r + (self.r * self.d) // self.n_heads
        return self.in_dim * self.r + self.r * self.d

    @staticmethod
    def count_for(variant, d, r, n_heads, in_dim=None):
        in_dim = in_dim if in_dim is not None else d
        if not isinstance(variant, Variant):
            variant = Variant(variant)
        if variant is Variant.DOWN_UP_PAIR:
            return in_dim * r + (r * d) // n_heads
        return in_dim * r + r * d

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"input width {x.shape[-1]} != module in_dim {self.in_dim}")
        v = self.variant
        if v is Variant.DOWN:
            return delta_down(self, x)
        if v is Variant.UP:
            return delta_up(self, x)
        if v is Variant.DOWN_UP:
            return delta_down_up(self, x)
        return delta_down_up_pair(self, x)

    __call__ = forward


def _heads(mod, prefix):
    return [mod.params[f"{prefix}_{i}"] for i in range(mod.n_heads)]


def delta_down(m, x):
    """gelu(Concat_i(X' @ W_down_i)) @ W_up."""
    hidden = gelu(concat([matmul(x, w) for w in _heads(m, "down")], axis=-1))
    return matmul(hidden, m.params["up"])


def delta_up(m, x):
    """Concat_i(gelu(X' @ W_down) @ W_up_i)."""
    hidden = gelu(matmul(x, m.params["down"]))
    return concat([matmul(hidden, w) for w in _heads(m, "up")], axis=-1)


def delta_down_up(m, x):
    """Head-partitioned down projection, then head-partitioned up projection."""
    hidden = gelu(concat([matmul(x, w) for w in _heads(m, "down")], axis=-1))
    return concat([matmul(hidden, w) for w in _heads(m, "up")], axis=-1)


def delta_down_up_pair(m, x):
    """Per-head independent bottleneck producing a d/n_heads slice each."""
    outs = []
    for i in range(m.n_heads):
        hidden = gelu(matmul(x, m.params[f"down_{i}"]))
        outs.append(matmul(hidden, m.params[f"up_{i}"]))
    return concat(outs, axis=-1)


class BaselineKind(enum.Enum):
    ADAPTER = "adapter"
    LORA = "lora"
    BITFIT = "bitfit"


class BaselineModification:
    """A baseline delta-H producer: bottleneck adapter or LoRA factors.

    The adapter omits its internal residual; the residual lives in the
    shared controlled-update path.  Bias-only tuning carries no weights
    here (it unfreezes backbone biases instead).
    """

    def __init__(self, kind, d, r=None, dtype=np.float32):
        if not isinstance(kind, BaselineKind):
            kind = BaselineKind(kind)
        self.kind = kind
        self.d = int(d)
        self.r = int(r) if r else None
        self.params = {}
        if kind is BaselineKind.ADAPTER:
            self.params["down"] = parameter(np.zeros((self.d, self.r), dtype=dtype))
            self.params["up"] = parameter(np.zeros((self.r, self.d), dtype=dtype))
        elif kind is BaselineKind.LORA:
            self.params["lora_a"] = parameter(np.zeros((self.d, self.r), dtype=dtype))
            self.params["lora_b"] = parameter(np.zeros((self.r, self.d), dtype=dtype))

    def param_count(self):
        if self.kind is BaselineKind.BITFIT:
            return 0
        return 2 * self.d * self.r

    def forward(self, x):
        if self.kind is not BaselineKind.ADAPTER:
            raise ConfigError(f"{self.kind.value} is not a delta-H producer")
        return delta_adapter(self, x)

    __call__ = forward


def delta_adapter(b, x):
    """gelu(X' @ W_down) @ W_up, no residual, no bias."""
    return matmul(gelu(matmul(x, b.params["down"])), b.params["up"])


def lora_forward(b, x, w_frozen):
    """X @ W_frozen + X @ A @ B; exact frozen path when either factor is zero."""
    if b.kind is not BaselineKind.LORA:
        raise ConfigError(f"{b.kind.value} is not a low-rank attachment")
    if x.shape[-1] != w_frozen.shape[-2]:
        raise DimensionError(f"lora: {x.shape} @ {w_frozen.shape}")
    frozen = matmul(x, w_frozen)
    low_rank = matmul(matmul(x, b.params["lora_a"]), b.params["lora_b"])
    return frozen + low_rank
