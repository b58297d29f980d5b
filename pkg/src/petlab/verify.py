"""Independent verification suite: finite-difference gradient checks,
scalar-loop recomputation oracles, algebraic witnesses, and
freeze/determinism audits.

The oracles here deliberately share no code with the implementations they
check: gate and bottleneck formulas are recomputed with plain Python
loops over ``math`` calls, and the vanilla-transformer reference is a
separate numpy-only forward pass.  Slow is fine; independent is the
point.
"""

from __future__ import annotations

import io
import math
import os
import tempfile
from dataclasses import dataclass, replace

import numpy as np

from . import granularity as gran
from . import harness
from . import modifications as mods
from . import tasks as tasksmod
from .backbone import (
    BackboneConfig,
    InsertionSite,
    Model,
    PetAttachment,
    SiteKind,
    load_checkpoint,
    save_checkpoint,
)
from .config import ExperimentConfig
from .optimizer import AdamW
from .tensor import Rng, Tensor, add, matmul, mul, tsum

GRAD_TOL = 1e-4
GRAD_STEP = 1e-5
ORACLE_TOL = 1e-12


@dataclass
class GradCheckReport:
    op_name: str
    param_name: str
    max_rel_err: float
    step: float = GRAD_STEP
    precision: str = "float64"
    detail: str = ""

    @property
    def passed(self):
        return math.isfinite(self.max_rel_err) and self.max_rel_err < GRAD_TOL


def _rel(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def grad_check(op_name, build_loss, params, h=GRAD_STEP, max_elems=64, rng=None):
    """Central-difference check of every tensor in ``params``.

    ``build_loss`` rebuilds the tape from the params' current data and
    returns a scalar Tensor.  At most ``max_elems`` coordinates are
    sampled per tensor for large shapes.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.data.dtype != np.float64:
            raise gran.ContractError("gradient checks require float64 parameters")
    loss = build_loss()
    for p in params:
        p.grad = None
    loss.backward()
    reports = []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        size = p.data.size
        idxs = np.arange(size)
        if size > max_elems:
            idxs = rng.choice(size, size=max_elems, replace=False)
        worst = 0.0
        detail = ""
        for i in idxs:
            orig = p.data.flat[i]
            p.data.flat[i] = orig + h
            f_plus = float(build_loss().data)
            p.data.flat[i] = orig - h
            f_minus = float(build_loss().data)
            p.data.flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                reports.append(GradCheckReport(op_name, p.name or "?", math.inf,
                                               detail=f"non-finite at flat index {i}"))
                break
            err = _rel(numeric, float(analytic.flat[i]))
            if err > worst:
                worst = err
                detail = f"flat index {i}: numeric {numeric:.6g} vs analytic {analytic.flat[i]:.6g}"
        else:
            reports.append(GradCheckReport(op_name, p.name or "?", worst, detail=detail))
    return reports


# -- scalar-loop oracles (pure python, no shared code) -------------------------------


def _sig(v):
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def _gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def _matvec(rows, w):
    return [sum(r[k] * w[k] for k in range(len(w))) for r in rows]


def oracle_g_large(x, w_down, w_up, s):
    """Row/column loops over s*sigmoid(gelu(x@w_down)@w_up)."""
    n, din = len(x), len(x[0])
    r, d = len(w_up), len(w_up[0])
    out = []
    for i in range(n):
        hid = [_gelu(sum(x[i][k] * w_down[k][j] for k in range(din))) for j in range(r)]
        out.append([s * _sig(sum(hid[j] * w_up[j][c] for j in range(r))) for c in range(d)])
    return out


def oracle_g_middle_x(x, h, w, s, d):
    vals = [s * _sig(sum((x[i][k] + h[i][k]) * w[k] for k in range(len(w)))) for i in range(len(x))]
    return [[v] * d for v in vals]


def oracle_g_middle_y(z, s, n_rows):
    row = [s * (_sig(v) + 1.0) for v in z]
    return [list(row) for _ in range(n_rows)]


def oracle_g_small(x, h, w, s, d, mask=None):
    n = len(x)
    vals = [_sig(sum(x[i][k] * w[k] for k in range(len(x[i])))
                 + sum(h[i][k] * w[len(x[i]) + k] for k in range(len(h[i]))))
            for i in range(n)]
    if mask is None:
        pooled = sum(vals) / n
    else:
        kept = [v for v, m in zip(vals, mask) if m]
        pooled = sum(kept) / len(kept)
    return [[s * pooled] * d for _ in range(n)]


def oracle_delta(variant, x, params, d, r, n_heads):
    """Scalar-loop recomputation of each multi-head bottleneck variant."""
    n, din = len(x), len(x[0])
    rh, dh = r // n_heads, d // n_heads

    def mm(a, b):
        return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))]
                for i in range(len(a))]

    def cat(mats):
        return [sum((m[i] for m in mats), []) for i in range(len(mats[0]))]

    def geluM(m):
        return [[_gelu(v) for v in row] for row in m]

    if variant == "down":
        hid = geluM(cat([mm(x, params[f"down_{i}"]) for i in range(n_heads)]))
        return mm(hid, params["up"])
    if variant == "up":
        hid = geluM(mm(x, params["down"]))
        return cat([mm(hid, params[f"up_{i}"]) for i in range(n_heads)])
    if variant == "down_up":
        hid = geluM(cat([mm(x, params[f"down_{i}"]) for i in range(n_heads)]))
        return cat([mm(hid, params[f"up_{i}"]) for i in range(n_heads)])
    outs = []
    for i in range(n_heads):
        hid = geluM(mm(x, params[f"down_{i}"]))
        outs.append(mm(hid, params[f"up_{i}"]))
    return cat(outs)


# -- independent reference transformer -----------------------------------------------


def _ref_ln(x, w, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _ref_gelu(x):
    from scipy.special import erf

    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _ref_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _ref_attn(P, name, xq, xkv, n_heads, mask):
    d = xq.shape[-1]
    dh = d // n_heads
    q = xq @ P[f"{name}.q.w"] + P[f"{name}.q.b"]
    k = xkv @ P[f"{name}.k.w"] + P[f"{name}.k.b"]
    v = xkv @ P[f"{name}.v.w"] + P[f"{name}.v.b"]

    def split(t):
        b, n, _ = t.shape
        return t.reshape(b, n, n_heads, dh).transpose(0, 2, 1, 3)

    scores = split(q) @ split(k).transpose(0, 1, 3, 2) / np.sqrt(dh)
    if mask is not None:
        scores = scores + mask
    ctx = _ref_softmax(scores) @ split(v)
    b, _, nq, _ = ctx.shape
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, nq, d)
    return merged @ P[f"{name}.o.w"] + P[f"{name}.o.b"]


def reference_forward(model, feats, text_ids, text_pad_mask, dec_ids, dec_pad_mask):
    """A from-scratch numpy forward over the model's weights (no attachments)."""
    P = {k: p.data for k, p in model.named_params().items()}
    cfg = model.cfg
    NEG = -1e9
    tok = P["embed"][text_ids]
    if feats is not None:
        vis = feats @ P["projector.w"] + P["projector.b"]
        x = np.concatenate([vis, tok], axis=-2)
        rows = np.concatenate(
            [np.ones(text_pad_mask.shape[:-1] + (feats.shape[-2],)), text_pad_mask], axis=-1
        )
    else:
        x, rows = tok, text_pad_mask
    x = x + P["pos_enc"][: x.shape[-2]]
    x = _ref_ln(x, P["ln_emb_enc.w"], P["ln_emb_enc.b"])
    enc_mask = ((1.0 - rows) * NEG)[:, None, None, :]
    for i in range(cfg.n_enc_layers):
        nm = f"enc.{i}"
        x = _ref_ln(x + _ref_attn(P, f"{nm}.attn", x, x, cfg.n_attn_heads, enc_mask),
                    P[f"{nm}.ln1.w"], P[f"{nm}.ln1.b"])
        ff = _ref_gelu(x @ P[f"{nm}.fc1.w"] + P[f"{nm}.fc1.b"]) @ P[f"{nm}.fc2.w"] + P[f"{nm}.fc2.b"]
        x = _ref_ln(x + ff, P[f"{nm}.ln2.w"], P[f"{nm}.ln2.b"])
    enc_out = x

    t = dec_ids.shape[-1]
    y = P["embed"][dec_ids] + P["pos_dec"][:t]
    y = _ref_ln(y, P["ln_emb_dec.w"], P["ln_emb_dec.b"])
    causal = np.triu(np.full((t, t), NEG), k=1)
    self_mask = causal[None, None, :, :] + ((1.0 - dec_pad_mask) * NEG)[:, None, None, :]
    cross_mask = ((1.0 - rows) * NEG)[:, None, None, :]
    for i in range(cfg.n_dec_layers):
        nm = f"dec.{i}"
        y = _ref_ln(y + _ref_attn(P, f"{nm}.self_attn", y, y, cfg.n_attn_heads, self_mask),
                    P[f"{nm}.ln1.w"], P[f"{nm}.ln1.b"])
        y = _ref_ln(y + _ref_attn(P, f"{nm}.cross_attn", y, enc_out, cfg.n_attn_heads, cross_mask),
                    P[f"{nm}.ln2.w"], P[f"{nm}.ln2.b"])
        ff = _ref_gelu(y @ P[f"{nm}.fc1.w"] + P[f"{nm}.fc1.b"]) @ P[f"{nm}.fc2.w"] + P[f"{nm}.fc2.b"]
        y = _ref_ln(y + ff, P[f"{nm}.ln3.w"], P[f"{nm}.ln3.b"])
    return y @ P["embed"].T


# -- case registry --------------------------------------------------------------------

CASES = []


def case(name):
    def wrap(fn):
        CASES.append((name, fn))
        return fn

    return wrap


def _rand_controller(level, d, r, s, rng, in_dim=None):
    ctl = gran.GranularityController(level, d, r=r, s=s, in_dim=in_dim, dtype=np.float64)
    for p in ctl.params.values():
        p.data[...] = rng.normal(p.data.shape, std=0.5, dtype=np.float64)
    return ctl


# -- tensor core ----------------------------------------------------------------------


@case("tensor.gradcheck_core_ops")
def _tensor_gradcheck():
    rng = Rng(11)
    worst = 0.0
    from . import tensor as T

    a = Tensor(rng.normal((4, 5), dtype=np.float64), requires_grad=True, name="a")
    b = Tensor(rng.normal((5, 3), dtype=np.float64), requires_grad=True, name="b")
    c = Tensor(rng.normal((4, 3), dtype=np.float64), requires_grad=True, name="c")
    builders = {
        "matmul+sigmoid": lambda: tsum(T.sigmoid(matmul(a, b))),
        "gelu+mul": lambda: tsum(mul(T.gelu(c), c)),
        "softmax": lambda: tsum(mul(T.softmax(c, axis=-1), Tensor(np.arange(3.0)))),
        "log_softmax": lambda: tsum(mul(T.log_softmax(c, axis=-1), Tensor(np.arange(3.0)))),
        "exp+log": lambda: tsum(T.tlog(add(T.texp(mul(c, 0.1)), 1.0))),
        "power": lambda: tsum(T.power(add(mul(c, c), 1.0), -0.5)),
        "mean+concat": lambda: tsum(T.tmean(T.concat([a, a], axis=-2), axis=-1)),
        "reshape+transpose": lambda: tsum(mul(T.reshape(T.transpose(a), (4, 5)), a)),
        "broadcast_rows": lambda: tsum(mul(T.broadcast_rows(T.reshape(b, (1, 15)), 3), 2.0)),
        "take_rows": lambda: tsum(T.take_rows(a, np.array([0, 2, 2, 1]))),
    }
    for name, fn in builders.items():
        for rep in grad_check(name, fn, [a, b, c]):
            if not rep.passed:
                return False, f"{name}/{rep.param_name} rel err {rep.max_rel_err:.3g}"
            worst = max(worst, rep.max_rel_err)
    return True, f"10 ops, max rel err {worst:.3g}"


@case("tensor.broadcast_identities")
def _tensor_broadcast():
    from .tensor import broadcast_cols, broadcast_rows

    rng = Rng(12)
    for _ in range(100):
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        v = rng.normal((1, d), dtype=np.float64)
        u = rng.normal((n, 1), dtype=np.float64)
        R = broadcast_rows(Tensor(v), n).data
        C = broadcast_cols(Tensor(u), d).data
        for i in range(n):
            for j in range(d):
                if R[i, j] != v[0, j] or C[i, j] != u[i, 0]:
                    return False, f"mismatch at ({i},{j})"
    return True, "100 cases"


@case("tensor.rng_determinism")
def _tensor_rng():
    a = Rng(99).child(3).normal((64,), dtype=np.float64)
    b = Rng(99).child(3).normal((64,), dtype=np.float64)
    if not np.array_equal(a, b):
        return False, "streams differ for identical seeds"
    return True, "bit-identical streams"


# -- granularity ----------------------------------------------------------------------


@case("granularity.scalar_oracles")
def _gran_oracles():
    rng = Rng(21)
    worst = 0.0
    for k in range(100):
        n = int(rng.integers(2, 7))
        d = int(rng.integers(2, 7))
        r = int(rng.integers(1, 5))
        s = float(rng.uniform((), 0.2, 3.0))
        x = rng.normal((n, d), dtype=np.float64)
        h = rng.normal((n, d), dtype=np.float64)
        mask = None
        if k % 3 == 0 and n > 2:
            mask = np.ones(n)
            mask[-1] = 0.0

        ctl = _rand_controller("large", d, r, s, rng)
        g = gran.gen_g_large(ctl, Tensor(x)).data
        ref = oracle_g_large(x.tolist(), ctl.params["gate_down"].data.tolist(),
                             ctl.params["gate_up"].data.tolist(), s)
        worst = max(worst, np.abs(g - np.array(ref)).max())
        if not ((g > 0).all() and (g < s).all()):
            return False, f"large range violated at case {k}"

        ctl = _rand_controller("middle_x", d, r, s, rng)
        g = gran.gen_g_middle_x(ctl, Tensor(x), Tensor(h)).data
        ref = oracle_g_middle_x(x.tolist(), h.tolist(),
                                ctl.params["gate_down"].data[:, 0].tolist(), s, d)
        worst = max(worst, np.abs(g - np.array(ref)).max())
        if not (g == g[:, :1]).all():
            return False, f"middle_x not constant across columns at case {k}"
        if not ((g > 0).all() and (g < s).all()):
            return False, f"middle_x range violated at case {k}"

        ctl = _rand_controller("middle_y", d, r, s, rng)
        g = gran.gen_g_middle_y(ctl, n).data
        ref = oracle_g_middle_y(ctl.params["gate_vec"].data[0].tolist(), s, n)
        worst = max(worst, np.abs(g - np.array(ref)).max())
        if not (g == g[:1, :]).all():
            return False, f"middle_y not constant across rows at case {k}"
        if not ((g > s).all() and (g < 2 * s).all()):
            return False, f"middle_y range violated at case {k}"

        ctl = _rand_controller("small", d, r, s, rng)
        g = gran.gen_g_small(ctl, Tensor(x), Tensor(h), mask=mask).data
        ref = oracle_g_small(x.tolist(), h.tolist(),
                             ctl.params["gate_down"].data[:, 0].tolist(), s, d,
                             mask=None if mask is None else mask.tolist())
        worst = max(worst, np.abs(g - np.array(ref)).max())
        if not (g == g.flat[0]).all():
            return False, f"small not constant at case {k}"
        if not ((g > 0).all() and (g < s).all()):
            return False, f"small range violated at case {k}"
    ok = worst < ORACLE_TOL
    return ok, f"100 cases, max abs err {worst:.3g}"


@case("granularity.identity_reduction")
def _gran_identity():
    rng = Rng(22)
    h = Tensor(rng.normal((5, 8), dtype=np.float64))
    delta = Tensor(rng.normal((5, 8), dtype=np.float64))
    ones = Tensor(np.ones((5, 8)))
    gated = gran.apply_update(h, delta, ones).data
    plain = add(h, delta).data
    if not np.array_equal(gated, plain):
        return False, "G=1 path is not bit-identical to H+delta"
    return True, "bit-identical"


@case("granularity.param_counts")
def _gran_counts():
    for d, r in ((8, 4), (768, 96)):
        expect = {"large": 2 * d * r, "middle_x": d, "middle_y": d, "small": 2 * d, "identity": 0}
        for level, want in expect.items():
            got = gran.GranularityController.count_for(level, d, r=r)
            if got != want:
                return False, f"{level} (d={d}, r={r}): got {got}, want {want}"
            ctl = gran.GranularityController(level, d, r=r)
            live = sum(p.data.size for p in ctl.params.values())
            if live != want or ctl.param_count() != want:
                return False, f"{level} instantiated count {live} != {want}"
    return True, "closed forms hold at (8,4) and (768,96)"


@case("granularity.gradcheck_generators")
def _gran_grad():
    rng = Rng(23)
    n, d, r = 4, 6, 3
    x = Tensor(rng.normal((n, d), dtype=np.float64), requires_grad=True)
    h = Tensor(rng.normal((n, d), dtype=np.float64), requires_grad=True)
    probe = Tensor(rng.normal((n, d), dtype=np.float64))
    worst = 0.0
    for level in ("large", "middle_x", "middle_y", "small"):
        ctl = _rand_controller(level, d, r, 1.3, rng)
        params = list(ctl.params.values()) + [x, h]

        def build(ctl=ctl):
            g = ctl.generate(x=x, h=h, n_rows=n)
            return tsum(mul(gran.apply_update(h, mul(x, 0.5), g), probe))

        for rep in grad_check(f"gen_{level}", build, params):
            if not rep.passed:
                return False, f"{level}: rel err {rep.max_rel_err:.3g} ({rep.detail})"
            worst = max(worst, rep.max_rel_err)
    return True, f"4 generators, max rel err {worst:.3g}"


# -- modifications --------------------------------------------------------------------


def _rand_mod(variant, d, r, n_heads, rng, in_dim=None):
    m = mods.MultiHeadModification(variant, d, r, n_heads, in_dim=in_dim, dtype=np.float64)
    for p in m.params.values():
        p.data[...] = rng.normal(p.data.shape, std=0.5, dtype=np.float64)
    return m


@case("modifications.scalar_oracles")
def _mods_oracles():
    rng = Rng(31)
    worst = 0.0
    for k in range(40):
        d, r, nh = 8, 4, int(rng.choice([1, 2, 4]))
        n = int(rng.integers(2, 6))
        x = rng.normal((n, d), dtype=np.float64)
        for variant in ("down", "up", "down_up", "down_up_pair"):
            m = _rand_mod(variant, d, r, nh, rng)
            got = m(Tensor(x)).data
            if got.shape != (n, d):
                return False, f"{variant} shape {got.shape} != ({n},{d})"
            ref = oracle_delta(variant, x.tolist(),
                               {k2: p.data.tolist() for k2, p in m.params.items()}, d, r, nh)
            worst = max(worst, np.abs(got - np.array(ref)).max())
    ok = worst < ORACLE_TOL
    return ok, f"160 cases, max abs err {worst:.3g}"


@case("modifications.single_head_equivalence")
def _mods_equiv():
    rng = Rng(32)
    d, r, nh, n = 8, 4, 4, 5
    x = Tensor(rng.normal((n, d), dtype=np.float64))
    worst = 0.0
    for variant in ("down", "up", "down_up"):
        m = _rand_mod(variant, d, r, nh, rng)
        ref = mods.MultiHeadModification(variant if variant == "down_up" else variant, d, r, 1,
                                         dtype=np.float64)
        # build the equivalent single-head weights by concatenating head blocks
        if variant in ("down", "down_up"):
            down = np.concatenate([m.params[f"down_{i}"].data for i in range(nh)], axis=1)
        else:
            down = m.params["down"].data
        if variant in ("up", "down_up"):
            up = np.concatenate([m.params[f"up_{i}"].data for i in range(nh)], axis=1)
        else:
            up = m.params["up"].data
        single = mods.MultiHeadModification("down_up", d, r, 1, dtype=np.float64)
        single.params["down_0"].data[...] = down
        single.params["up_0"].data[...] = up
        diff = np.abs(m(x).data - single(x).data).max()
        worst = max(worst, diff)
        if diff > ORACLE_TOL:
            return False, f"{variant}: single-head gap {diff:.3g}"

    # the pair variant keeps only the diagonal up blocks of the shared
    # single-head weights, so it must NOT reproduce that single head
    down_full = rng.normal((d, r), dtype=np.float64) * 0.5
    up_full = rng.normal((r, d), dtype=np.float64) * 0.5
    single = mods.MultiHeadModification("down_up", d, r, 1, dtype=np.float64)
    single.params["down_0"].data[...] = down_full
    single.params["up_0"].data[...] = up_full
    pair = mods.MultiHeadModification("down_up_pair", d, r, nh, dtype=np.float64)
    rh, dh = r // nh, d // nh
    for i in range(nh):
        pair.params[f"down_{i}"].data[...] = down_full[:, i * rh:(i + 1) * rh]
        pair.params[f"up_{i}"].data[...] = up_full[i * rh:(i + 1) * rh, i * dh:(i + 1) * dh]
    witness = np.abs(pair(x).data - single(x).data).max()
    if witness <= ORACLE_TOL:
        return False, "pair variant collapsed to the shared single-head form"
    return True, f"3 equal (max {worst:.3g}); pair witness gap {witness:.3g}"


@case("modifications.param_counts")
def _mods_counts():
    for d, r, nh in ((8, 4, 1), (8, 4, 2), (8, 4, 4), (768, 96, 4), (768, 96, 8)):
        for variant in ("down", "up", "down_up"):
            want = 2 * d * r
            m = mods.MultiHeadModification(variant, d, r, nh)
            if m.param_count() != want or sum(p.data.size for p in m.params.values()) != want:
                return False, f"{variant} (d={d},r={r},nh={nh})"
        want = d * r + (r * d) // nh
        m = mods.MultiHeadModification("down_up_pair", d, r, nh)
        if m.param_count() != want or sum(p.data.size for p in m.params.values()) != want:
            return False, f"pair (d={d},r={r},nh={nh})"
    counts = [mods.MultiHeadModification.count_for("down_up_pair", 8, 4, nh) for nh in (1, 2, 4)]
    if not (counts[0] > counts[1] > counts[2]):
        return False, f"pair counts not decreasing with heads: {counts}"
    return True, "formulas exact; pair count decreases with heads"


@case("modifications.gradcheck_variants")
def _mods_grad():
    rng = Rng(33)
    d, r, nh, n = 6, 4, 2, 3
    x = Tensor(rng.normal((n, d), dtype=np.float64), requires_grad=True)
    probe = Tensor(rng.normal((n, d), dtype=np.float64))
    worst = 0.0
    for variant in ("down", "up", "down_up", "down_up_pair"):
        m = _rand_mod(variant, d, r, nh, rng)

        def build(m=m):
            return tsum(mul(m(x), probe))

        for rep in grad_check(f"delta_{variant}", build, list(m.params.values()) + [x]):
            if not rep.passed:
                return False, f"{variant}: rel err {rep.max_rel_err:.3g}"
            worst = max(worst, rep.max_rel_err)
    b = mods.BaselineModification("adapter", d, r, dtype=np.float64)
    for p in b.params.values():
        p.data[...] = rng.normal(p.data.shape, std=0.5, dtype=np.float64)
    for rep in grad_check("adapter", lambda: tsum(mul(b(x), probe)), list(b.params.values())):
        if not rep.passed:
            return False, f"adapter: rel err {rep.max_rel_err:.3g}"
        worst = max(worst, rep.max_rel_err)
    lo = mods.BaselineModification("lora", d, r, dtype=np.float64)
    wf = Tensor(rng.normal((d, d), dtype=np.float64))
    for p in lo.params.values():
        p.data[...] = rng.normal(p.data.shape, std=0.5, dtype=np.float64)
    for rep in grad_check("lora", lambda: tsum(mul(mods.lora_forward(lo, x, wf), probe)),
                          list(lo.params.values())):
        if not rep.passed:
            return False, f"lora: rel err {rep.max_rel_err:.3g}"
        worst = max(worst, rep.max_rel_err)
    return True, f"6 producers, max rel err {worst:.3g}"


# -- backbone -------------------------------------------------------------------------


def _tiny_cfg(**kw):
    base = dict(method="gated_large", r=4, n_heads=2, n_heads_dec=1, steps=5, batch=2,
                eval_size=4, tasks="lookup", dtype="float64")
    base.update(kw)
    cfg = ExperimentConfig(**base)
    cfg.backbone = BackboneConfig(d=8, n_enc_layers=1, n_dec_layers=1, n_attn_heads=2,
                                  d_ffn=16, vocab_size=40, max_len=24, visual_dim=6,
                                  n_visual_tokens=4)
    return cfg


def _tiny_batch(model, rng):
    bb = model.cfg
    feats = Tensor(rng.normal((2, bb.n_visual_tokens, bb.visual_dim), dtype=np.float64))
    text = rng.integers(3, bb.vocab_size, size=(2, 5))
    tmask = np.ones((2, 5))
    tmask[1, -1] = 0.0
    dec_in = rng.integers(3, bb.vocab_size, size=(2, 4))
    dec_in[:, 0] = 1
    dec_out = rng.integers(3, bb.vocab_size, size=(2, 4))
    dmask = np.ones((2, 4))
    dmask[0, -1] = 0.0
    return feats, text, tmask, dec_in, dec_out, dmask


@case("backbone.vanilla_equivalence")
def _bb_vanilla():
    cfg = _tiny_cfg(method="frozen")
    model = harness.build_model(cfg)
    rng = Rng(41)
    feats, text, tmask, dec_in, _, dmask = _tiny_batch(model, rng)
    got = model.forward_batch(feats, text, tmask, dec_in, dmask).data
    ref = reference_forward(model, feats.data, text, tmask, dec_in, dmask)
    gap = np.abs(got - ref).max()
    return gap < 1e-10, f"max abs gap {gap:.3g}"


@case("backbone.identity_attachment")
def _bb_identity():
    bare = harness.build_model(_tiny_cfg(method="frozen"))
    attached = harness.build_model(_tiny_cfg(method="ungated", init="zero_up"))
    rng = Rng(42)
    feats, text, tmask, dec_in, _, dmask = _tiny_batch(bare, rng)
    a = bare.forward_batch(feats, text, tmask, dec_in, dmask).data
    b = attached.forward_batch(feats, text, tmask, dec_in, dmask).data
    if not np.array_equal(a, b):
        return False, f"logit gap {np.abs(a - b).max():.3g}"
    return True, "logit-for-logit identical"


@case("backbone.residual_site_contract")
def _bb_sites():
    cfg = _tiny_cfg(method="gated_large", plan="conventional", init="gaussian")
    model = harness.build_model(cfg)
    rng = Rng(43)
    feats, text, tmask, dec_in, _, dmask = _tiny_batch(model, rng)
    capture = {}
    model.forward_batch(feats, text, tmask, dec_in, dmask, capture=capture)
    if len(capture) != 5:
        return False, f"expected 5 instrumented sites, saw {len(capture)}"
    worst = 0.0
    for key, rec in capture.items():
        out = rec["G"].data * (rec["H"].data + rec["delta"].data)
        worst = max(worst, np.abs(out - rec["out"].data).max())
        att = model.attachments[InsertionSite.parse(key)]
        x = rec["X"].data
        for bi in range(x.shape[0]):
            ref = oracle_g_large(x[bi].tolist(),
                                 att.controller.params["gate_down"].data.tolist(),
                                 att.controller.params["gate_up"].data.tolist(),
                                 att.controller.s)
            worst = max(worst, np.abs(rec["G"].data[bi] - np.array(ref)).max())
    return worst < ORACLE_TOL, f"5 sites, max abs err {worst:.3g}"


@case("backbone.gradcheck_full_model")
def _bb_grad():
    cfg = _tiny_cfg(method="gated_large")
    model = harness.build_model(cfg)
    rng = Rng(44)
    feats, text, tmask, dec_in, dec_out, dmask = _tiny_batch(model, rng)
    from .backbone import cross_entropy

    def build():
        logits = model.forward_batch(feats, text, tmask, dec_in, dmask)
        return cross_entropy(logits, dec_out, dmask)

    params = model.trainable_params()
    worst = 0.0
    for rep in grad_check("full_model", build, params, max_elems=4):
        if not rep.passed:
            return False, f"{rep.param_name}: rel err {rep.max_rel_err:.3g}"
        worst = max(worst, rep.max_rel_err)
    return True, f"{len(params)} tensors, max rel err {worst:.3g}"


@case("backbone.gradcheck_projector_modes")
def _bb_proj_grad():
    rng = Rng(45)
    worst = 0.0
    for mode, gated in (("trainable", False), ("decomposed", False), ("decomposed", True)):
        cfg = _tiny_cfg(method="gated_large", visual_mode=mode, visual_gate=gated)
        model = harness.build_model(cfg)
        feats = Tensor(rng.normal((2, 4, 6), dtype=np.float64))
        probe = Tensor(rng.normal((2, 4, 8), dtype=np.float64))
        from .backbone import project_visual

        def build(model=model, feats=feats, probe=probe):
            return tsum(mul(project_visual(model.projector, feats), probe))

        params = [p for n, p in model.named_params().items() if n.startswith("projector")]
        for rep in grad_check(f"projector_{mode}_{gated}", build, params, max_elems=8):
            if not rep.passed:
                return False, f"{mode}/gated={gated}: rel err {rep.max_rel_err:.3g}"
            worst = max(worst, rep.max_rel_err)
    return True, f"3 modes, max rel err {worst:.3g}"


@case("backbone.freeze_invariance")
def _bb_freeze():
    cfg = _tiny_cfg(method="gated_large", steps=50)
    model = harness.build_model(cfg)
    frozen0 = {n: p.data.copy() for n, p in model.named_params().items() if not p.requires_grad}
    if not frozen0:
        return False, "no frozen tensors under the default policy"
    rng = Rng(46)
    opt = AdamW(model.trainable_params(), lr=1e-2)
    from .backbone import cross_entropy

    for _ in range(50):
        feats, text, tmask, dec_in, dec_out, dmask = _tiny_batch(model, rng)
        loss = cross_entropy(model.forward_batch(feats, text, tmask, dec_in, dmask), dec_out, dmask)
        opt.zero_grad()
        loss.backward()
        opt.step()
    for n, p in model.named_params().items():
        if not p.requires_grad and not np.array_equal(p.data, frozen0[n]):
            return False, f"frozen tensor {n} drifted"
    moved = any(
        not np.array_equal(p.data, np.zeros_like(p.data)) for p in model.trainable_params()
    )
    if not moved:
        return False, "no trainable tensor moved in 50 steps"
    return True, f"{len(frozen0)} frozen tensors bit-identical after 50 steps"


@case("backbone.checkpoint_roundtrip")
def _bb_ckpt():
    cfg = _tiny_cfg(method="gated_large")
    model = harness.build_model(cfg)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        save_checkpoint(model, path)
        clone = harness.build_model(cfg, init=False)
        load_checkpoint(clone, path)
    for n, p in model.named_params().items():
        q = clone.named_params()[n]
        if not np.array_equal(p.data, q.data) or p.requires_grad != q.requires_grad:
            return False, f"tensor {n} not restored bit-exactly"
    return True, f"{len(model.named_params())} tensors restored bit-exactly"


# -- harness --------------------------------------------------------------------------


@case("harness.count_equality")
def _harness_counts():
    checked = 0
    for method in ("gated_large", "gated_middle_x", "gated_middle_y", "gated_small",
                   "gated_add", "ungated", "adapter", "adapter_gated_large", "lora",
                   "bitfit", "full", "frozen"):
        for plan in ("lightweight", "conventional"):
            cfg = replace(ExperimentConfig(), method=method, plan=plan)
            trainable, total, _ = harness.count_params(cfg)
            got_tr, got_tot = harness.build_model(cfg, init=False).param_count()
            if (trainable, total) != (got_tr, got_tot):
                return False, f"{method}/{plan}: analytic ({trainable},{total}) vs ({got_tr},{got_tot})"
            checked += 1
    return True, f"{checked} method x plan cells exact"


@case("harness.percentage_targets")
def _harness_pct():
    bart = BackboneConfig(d=768, n_enc_layers=6, n_dec_layers=6, n_attn_heads=12,
                          d_ffn=3072, vocab_size=50265, max_len=1026,
                          visual_dim=2048, n_visual_tokens=36)
    base = ExperimentConfig(backbone=bart, r=96, n_heads=4, n_heads_dec=1, s=1.0)
    pcts = {}
    for method in ("gated_large", "gated_middle_x", "gated_middle_y", "gated_small"):
        pcts[method] = harness.count_params(replace(base, method=method))[2]
    if abs(pcts["gated_large"] - 4.16) > 0.35:
        return False, f"large {pcts['gated_large']:.3f} outside 4.16 +/- 0.35"
    for m in ("gated_middle_x", "gated_middle_y", "gated_small"):
        if abs(pcts[m] - 2.98) > 0.35:
            return False, f"{m} {pcts[m]:.3f} outside 2.98 +/- 0.35"
    if not (pcts["gated_large"] > pcts["gated_middle_x"] == pcts["gated_middle_y"]):
        return False, "monotonicity violated"
    if abs(pcts["gated_small"] - pcts["gated_middle_x"]) > 0.05:
        return False, "small and middle budgets diverge beyond the O(d) gap"
    return True, ("large %.3f, middle %.3f/%.3f, small %.3f" %
                  (pcts["gated_large"], pcts["gated_middle_x"], pcts["gated_middle_y"],
                   pcts["gated_small"]))


@case("harness.run_determinism")
def _harness_determ():
    cfg = _tiny_cfg(method="gated_large", steps=20, seed=7)
    a = harness.run_experiment(cfg)
    b = harness.run_experiment(cfg)
    if a.loss_trace != b.loss_trace:
        return False, "loss traces differ for identical seeds"
    if (a.task_metrics, a.task_losses, a.trainable, a.total) != (
            b.task_metrics, b.task_losses, b.trainable, b.total):
        return False, "RunResult fields differ for identical seeds"
    return True, "two runs bit-identical (wall time aside)"


@case("harness.emit_stability")
def _harness_emit():
    cfg = _tiny_cfg(steps=3)
    res = [harness.run_experiment(cfg)]
    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = os.path.join(tmp, "a.csv"), os.path.join(tmp, "b.csv")
        harness.emit_results(res, p1, p1 + ".json", configs=[cfg])
        harness.emit_results(res, p2, p2 + ".json", configs=[cfg])
        if open(p1, "rb").read() != open(p2, "rb").read():
            return False, "CSV emission is not byte-stable"
        if open(p1 + ".json", "rb").read() != open(p2 + ".json", "rb").read():
            return False, "JSON emission is not byte-stable"
        harness.emit_results([], os.path.join(tmp, "empty.csv"))
        lines = open(os.path.join(tmp, "empty.csv")).read().strip().splitlines()
        if len(lines) != 1:
            return False, "empty result list should emit a header-only CSV"
    return True, "byte-identical re-emission; header-only empty CSV"


@case("harness.grid_rows")
def _harness_grid():
    base = ExperimentConfig()
    want = {"level": 5, "sites": 9, "heads": 4, "ln": 4, "r": 3, "init": 2, "s": 5,
            "visual_mode": 4, "task_mode": 2}
    for axis, n in want.items():
        cells = harness.grid_cells(base, axis)
        if len(cells) != n:
            return False, f"{axis}: {len(cells)} rows, want {n}"
        if len({cfg.seed for _, cfg in cells}) != 1:
            return False, f"{axis}: seeds not shared across cells"
    counts = [harness.count_params(cfg)[0] for _, cfg in harness.grid_cells(base, "level")]
    if not (counts[-1] == max(counts) and counts[-1] > counts[1]):
        return False, f"level-axis counts not ordered: {counts}"
    return True, "all 9 axes enumerate; level counts ordered"


@case("harness.task_module_sharing")
def _harness_sharing():
    cfg = _tiny_cfg(method="gated_large", tasks="lookup,match", task_mode="multi", steps=2)
    model = harness.build_model(cfg)
    pet = [p for n, p in model.named_params().items() if n.startswith("pet.")]
    ids_a = {id(p) for p in pet}
    ids_b = {id(p) for p in [p for n, p in model.named_params().items() if n.startswith("pet.")]}
    if ids_a != ids_b:
        return False, "multi-task modules are not one shared copy"
    other = harness.build_model(cfg)
    disjoint = {id(p) for n, p in other.named_params().items() if n.startswith("pet.")}
    if ids_a & disjoint:
        return False, "separate builds share parameter storage"
    return True, "shared in multi-task, disjoint across builds"


# -- negative controls ----------------------------------------------------------------


@case("negative.corrupted_gradient_caught")
def _neg_grad():
    rng = Rng(61)
    a = Tensor(rng.normal((3, 3), dtype=np.float64), requires_grad=True, name="a")

    def build():
        out = tsum(mul(a, a))
        inner = out._backward

        def corrupted(g):
            return inner(g * 2.0)  # seeded fault: off-by-2 scale at the root

        out._backward = corrupted
        return out

    reports = grad_check("corrupted", build, [a])
    if any(r.passed for r in reports):
        return False, "corrupted gradient slipped past the checker"
    return True, f"fault detected (rel err {reports[0].max_rel_err:.3g})"


@case("negative.freeze_fault_caught")
def _neg_freeze():
    cfg = _tiny_cfg(method="gated_large", steps=5)
    model = harness.build_model(cfg)
    frozen0 = {n: p.data.copy() for n, p in model.named_params().items() if not p.requires_grad}
    victim = next(n for n in frozen0 if n.startswith("enc."))
    model.named_params()[victim].data += 1e-3  # seeded fault: frozen weight drift
    drifted = [n for n, p in model.named_params().items()
               if not p.requires_grad and not np.array_equal(p.data, frozen0[n])]
    if drifted != [victim]:
        return False, f"audit flagged {drifted}, expected [{victim}]"
    return True, "seeded frozen-weight drift detected"


# -- runner ---------------------------------------------------------------------------


def run_suite(pattern=None, out=None):
    """Run all (or name-matched) cases; returns the number of failures."""
    out = out or io.StringIO()
    selected = [(n, f) for n, f in CASES if not pattern or pattern in n]
    failures = 0
    for name, fn in selected:
        try:
            ok, metric = fn()
        except Exception as e:
            ok, metric = False, f"exception: {e!r}"
        if not ok:
            failures += 1
        print(f"{name:42s} {'PASS' if ok else 'FAIL'}  {metric}", file=out)
    print(f"{len(selected)} cases, {failures} failures", file=out)
    return failures
