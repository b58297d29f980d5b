"""Synthetic multimodal tasks over a symbol grid.

Each example pairs a small grid of "visual" feature vectors with a
prompted token sequence and a target sequence.  Every task prepends its
literal prompt token, so one model can be trained on all tasks jointly:

  lookup:  "lookup: r c"        -> symbol at grid cell (r, c)
  match:   "match: <sym>"       -> "true" / "false" (symbol present in grid?)
  copy:    "copy: t1 ... tk"    -> "t1 ... tk" (text-only echo)
  caption: "caption:"           -> all grid symbols in raster order

Grid cell features are derived deterministically from the symbol id with
a fixed seed, independent of the experiment seed, so the visual "world"
is stable across runs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Rng

N_SYMBOLS = 20
MAX_COORD = 8
_FEATURE_SEED = 271828


def build_vocab():
    """Token string -> id. Ids 0..2 are pad/bos/eos."""
    tokens = ["<pad>", "<bos>", "<eos>"]
    tokens += ["lookup:", "match:", "copy:", "caption:"]
    tokens += [str(i) for i in range(MAX_COORD)]
    tokens += [f"sym{i}" for i in range(N_SYMBOLS)]
    tokens += ["true", "false"]
    return {tok: i for i, tok in enumerate(tokens)}


VOCAB = build_vocab()
ID_TO_TOKEN = {i: t for t, i in VOCAB.items()}


def encode(tokens):
    return [VOCAB[t] for t in tokens]


def symbol_features(visual_dim):
    """Deterministic per-symbol feature vectors, shared by all experiments."""
    rng = Rng(_FEATURE_SEED)
    return rng.uniform((N_SYMBOLS, visual_dim), dtype=np.float64)


@dataclass
class TaskSpec:
    name: str
    prompt: str
    generator: object  # callable(rng, grid_side) -> (grid, input_tokens, target_tokens)


def _sample_grid(rng, side):
    return rng.integers(0, N_SYMBOLS, size=(side, side))


def _gen_lookup(rng, side):
    grid = _sample_grid(rng, side)
    r = int(rng.integers(0, side))
    c = int(rng.integers(0, side))
    return grid, ["lookup:", str(r), str(c)], [f"sym{grid[r, c]}"]


def _gen_match(rng, side):
    grid = _sample_grid(rng, side)
    present = set(int(s) for s in grid.ravel())
    if rng.integers(0, 2) == 1:
        sym = int(rng.choice(sorted(present)))
        answer = "true"
    else:
        absent = sorted(set(range(N_SYMBOLS)) - present)
        if absent:
            sym = int(rng.choice(absent))
            answer = "false"
        else:  # degenerate grid containing every symbol
            sym = int(rng.choice(sorted(present)))
            answer = "true"
    return grid, ["match:", f"sym{sym}"], [answer]


def _gen_copy(rng, side):
    grid = _sample_grid(rng, side)
    k = int(rng.integers(2, 6))
    span = [f"sym{int(rng.integers(0, N_SYMBOLS))}" for _ in range(k)]
    return grid, ["copy:"] + span, list(span)


def _gen_caption(rng, side):
    grid = _sample_grid(rng, side)
    return grid, ["caption:"], [f"sym{int(s)}" for s in grid.ravel()]


_GENERATORS = {
    "lookup": _gen_lookup,
    "match": _gen_match,
    "copy": _gen_copy,
    "caption": _gen_caption,
}


def task_spec(name):
    if name not in _GENERATORS:
        raise ContractError(f"unknown task {name!r}; choose from {sorted(_GENERATORS)}")
    return TaskSpec(name=name, prompt=f"{name}:", generator=_GENERATORS[name])


@dataclass
class Example:
    grid: np.ndarray  # (side, side) symbol ids
    input_ids: list
    target_ids: list


def sample_example(spec, rng, n_visual_tokens):
    side = int(round(np.sqrt(n_visual_tokens)))
    if side * side != n_visual_tokens:
        raise ContractError(f"n_visual_tokens={n_visual_tokens} is not a perfect square")
    grid, inp, tgt = spec.generator(rng, side)
    return Example(grid=grid, input_ids=encode(inp), target_ids=encode(tgt))


def grid_features(grid, feature_table):
    """Map a (side, side) symbol grid to (n_v, visual_dim) features."""
    return feature_table[grid.ravel()]


def heldout_set(spec, seed, size, n_visual_tokens):
    """A fixed evaluation set, disjoint from the training stream by key."""
    rng = Rng(seed).child(zlib.crc32(spec.name.encode())).child(1)
    return [sample_example(spec, rng, n_visual_tokens) for _ in range(size)]


def train_stream_rng(spec, seed):
    return Rng(seed).child(zlib.crc32(spec.name.encode())).child(0)
