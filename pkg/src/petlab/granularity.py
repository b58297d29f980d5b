"""Granularity-controlled gate matrices and the controlled update rule.

Four generator levels produce a gate G of shape (N, d) from different
trainable parameter budgets:

  large    : s * sigmoid(gelu(X @ W_down) @ W_up)        -- 2*d*r params
  middle_x : s * sigmoid((X + H) @ w) copied across d     -- d params
  middle_y : s * (sigmoid(z) + 1) copied across N         -- d params
  small    : s * mean_N(sigmoid([X ; H] @ w)) everywhere  -- 2*d params
  identity : all-ones (no params; the lightweight decoder case)

The controlled update is ``G * (H + delta)``; with G identically one it
reduces bit-exactly to the plain additive update ``H + delta``.

Note: the middle_y extension is implemented as 1_{Nx1} @ g_middle_y; the
source derivation prints the middle_x symbol at that step, which is
inconsistent with its own surrounding definitions.
"""

from __future__ import annotations

import enum

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    broadcast_cols,
    broadcast_rows,
    concat_lastdim,
    gelu,
    matmul,
    mul,
    parameter,
    sigmoid,
    tsum,
)


class GranularityLevel(enum.Enum):
    LARGE = "large"
    MIDDLE_X = "middle_x"
    MIDDLE_Y = "middle_y"
    SMALL = "small"
    IDENTITY = "identity"


class GranularityController:
    """Holds the per-level trainable weights and the scaling factor s.

    ``in_dim`` is the width of the generator input X; it equals ``d``
    except for the decomposed visual projector, whose gate reads raw
    visual features.
    """

    def __init__(self, level, d, r=None, s=1.0, in_dim=None, dtype=np.float32):
        if not isinstance(level, GranularityLevel):
            level = GranularityLevel(level)
        if s <= 0:
            raise ContractError(f"scaling factor must be positive, got {s}")
        if level is GranularityLevel.LARGE and not r:
            raise ContractError("large level requires a projected hidden dimension r")
        self.level = level
        self.d = int(d)
        self.r = int(r) if r else None
        self.s = float(s)
        self.in_dim = int(in_dim) if in_dim is not None else int(d)
        self.dtype = dtype
        self.params = {}
        if level is GranularityLevel.LARGE:
            self.params["gate_down"] = parameter(np.zeros((self.in_dim, self.r), dtype=dtype))
            self.params["gate_up"] = parameter(np.zeros((self.r, self.d), dtype=dtype))
        elif level is GranularityLevel.MIDDLE_X:
            self.params["gate_down"] = parameter(np.zeros((self.in_dim, 1), dtype=dtype))
        elif level is GranularityLevel.MIDDLE_Y:
            self.params["gate_vec"] = parameter(np.zeros((1, self.d), dtype=dtype))
        elif level is GranularityLevel.SMALL:
            self.params["gate_down"] = parameter(np.zeros((2 * self.in_dim, 1), dtype=dtype))

    def param_count(self):
        """Closed-form trainable parameter count (no biases anywhere)."""
        if self.level is GranularityLevel.LARGE:
            return self.in_dim * self.r + self.r * self.d
        if self.level is GranularityLevel.MIDDLE_X:
            return self.in_dim
        if self.level is GranularityLevel.MIDDLE_Y:
            return self.d
        if self.level is GranularityLevel.SMALL:
            return 2 * self.in_dim
        return 0

    @staticmethod
    def count_for(level, d, r=None, in_dim=None):
        """Parameter count without instantiating any weights."""
        in_dim = in_dim if in_dim is not None else d
        if not isinstance(level, GranularityLevel):
            level = GranularityLevel(level)
        if level is GranularityLevel.LARGE:
            return in_dim * r + r * d
        if level is GranularityLevel.MIDDLE_X:
            return in_dim
        if level is GranularityLevel.MIDDLE_Y:
            return d
        if level is GranularityLevel.SMALL:
            return 2 * in_dim
        return 0

    def generate(self, x=None, h=None, n_rows=None, mask=None):
        """Produce the (N, d) gate for this controller's level."""
        lv = self.level
        if lv is GranularityLevel.LARGE:
            return gen_g_large(self, x)
        if lv is GranularityLevel.MIDDLE_X:
            return gen_g_middle_x(self, x, h)
        if lv is GranularityLevel.MIDDLE_Y:
            if n_rows is None:
                n_rows = x.shape[-2] if x is not None else h.shape[-2]
            return gen_g_middle_y(self, n_rows)
        if lv is GranularityLevel.SMALL:
            return gen_g_small(self, x, h, mask=mask)
        # identity: constant ones, no tape participation needed
        if n_rows is None:
            n_rows = (x if x is not None else h).shape[-2]
        ref = x if x is not None else h
        shape = ref.shape[:-2] + (n_rows, self.d)
        return Tensor(np.ones(shape, dtype=ref.dtype))


def gen_g_large(ctl, x):
    """G = s * sigmoid(gelu(X @ W_down) @ W_up); entries in (0, s)."""
    if ctl.level is not GranularityLevel.LARGE:
        raise ContractError(f"controller level is {ctl.level}, expected large")
    if x.shape[-1] != ctl.in_dim:
        raise DimensionError(f"input width {x.shape[-1]} != controller in_dim {ctl.in_dim}")
    hidden = gelu(matmul(x, ctl.params["gate_down"]))
    return mul(sigmoid(matmul(hidden, ctl.params["gate_up"])), ctl.s)


def gen_g_middle_x(ctl, x, h):
    """G tilde = s * sigmoid((X + H) @ w) in R^{Nx1}, copied across d."""
    if ctl.level is not GranularityLevel.MIDDLE_X:
        raise ContractError(f"controller level is {ctl.level}, expected middle_x")
    if x.shape != h.shape:
        raise DimensionError(f"X and H shapes differ: {x.shape} vs {h.shape}")
    g_col = mul(sigmoid(matmul(add(x, h), ctl.params["gate_down"])), ctl.s)
    return broadcast_cols(g_col, ctl.d)


def gen_g_middle_y(ctl, n_rows):
    """G tilde = s * (sigmoid(z) + 1) in R^{1xd}, copied across N rows."""
    if ctl.level is not GranularityLevel.MIDDLE_Y:
        raise ContractError(f"controller level is {ctl.level}, expected middle_y")
    if n_rows < 1:
        raise ContractError(f"need at least one row, got {n_rows}")
    z = ctl.params["gate_vec"]
    ones = Tensor(np.ones((1, ctl.d), dtype=z.dtype))
    g_row = mul(add(sigmoid(z), ones), ctl.s)
    return broadcast_rows(g_row, n_rows)


def gen_g_small(ctl, x, h, mask=None):
    """Scalar gate: s * mean over rows of sigmoid([X ; H] @ w), broadcast.

    With a 0/1 row mask, padded rows are excluded from the pooling mean.
    """
    if ctl.level is not GranularityLevel.SMALL:
        raise ContractError(f"controller level is {ctl.level}, expected small")
    if x.shape != h.shape:
        raise DimensionError(f"X and H shapes differ: {x.shape} vs {h.shape}")
    col = sigmoid(matmul(concat_lastdim(x, h), ctl.params["gate_down"]))  # (..., N, 1)
    n = x.shape[-2]
    if mask is not None:
        m = np.asarray(mask, dtype=x.dtype).reshape(x.shape[:-2] + (n, 1))
        denom = m.sum(axis=-2, keepdims=True)
        if np.any(denom == 0):
            raise ContractError("all rows masked: empty pooling window")
        pooled = mul(tsum(mul(col, Tensor(m)), axis=-2, keepdims=True), Tensor(1.0 / denom))
    else:
        pooled = mul(tsum(col, axis=-2, keepdims=True), 1.0 / n)
    scalar = mul(pooled, ctl.s)  # (..., 1, 1)
    return broadcast_cols(broadcast_rows(scalar, n), ctl.d)


def apply_update(h, delta, g):
    """The controlled update G * (H + delta).

    With G = 1 everywhere this is bit-identical to H + delta.
    """
    if h.shape != delta.shape or h.shape != g.shape:
        raise DimensionError(
            f"apply_update shapes differ: H {h.shape}, delta {delta.shape}, G {g.shape}"
        )
    return mul(g, add(h, delta))


def apply_update_add(h, delta, g_large):
    """Additive ablation variant: H + (delta + G_large)."""
    if h.shape != delta.shape or h.shape != g_large.shape:
        raise DimensionError(
            f"apply_update_add shapes differ: H {h.shape}, delta {delta.shape}, G {g_large.shape}"
        )
    return add(h, add(delta, g_large))


def dump_g(path, g):
    """Write a gate matrix as CSV: row = sequence position, column = hidden dim."""
    data = g.numpy() if isinstance(g, Tensor) else np.asarray(g)
    if data.ndim != 2:
        raise ContractError(f"expected a 2-d gate matrix, got shape {data.shape}")
    np.savetxt(path, data, delimiter=",")
