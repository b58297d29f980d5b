"""Toy encoder-decoder transformer with named gate/modification insertion sites.

Post-norm blocks, learned absolute positions, tied input/output embeddings.
The encoder consumes projected visual tokens concatenated with text
embeddings; the decoder cross-attends to the encoder output.

At every attached site the sublayer output H is replaced by
``G * (H + delta)`` before the residual add and LayerNorm, so the
controlled update modifies the sublayer branch only and the residual
highway is untouched.  The decoder value-matrix site gates the value
projection output per encoder-memory token (pre-attention-mix), with the
modification input wired to the final encoder output.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import granularity as gran
from . import modifications as mods
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    concat,
    gelu,
    log_softmax,
    matmul,
    mul,
    parameter,
    power,
    reshape,
    softmax,
    take_rows,
    tmean,
    transpose,
    tsum,
)

PAD, BOS, EOS = 0, 1, 2

LN_EPS = 1e-5
MASK_NEG = -1e9


@dataclass
class BackboneConfig:
    d: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_attn_heads: int = 4
    d_ffn: int = 256
    vocab_size: int = 64
    max_len: int = 64
    visual_dim: int = 32
    n_visual_tokens: int = 9

    def __post_init__(self):
        if self.d % self.n_attn_heads:
            raise mods.ConfigError(f"d={self.d} not divisible by n_attn_heads={self.n_attn_heads}")


class SiteKind(enum.Enum):
    ENC_SELF = "enc_self"
    ENC_FF = "enc_ff"
    DEC_SELF = "dec_self"
    DEC_CROSS = "dec_cross"
    DEC_CROSS_K = "dec_cross_k"
    DEC_CROSS_V = "dec_cross_v"
    DEC_FF = "dec_ff"


_ENCODER_KINDS = {SiteKind.ENC_SELF, SiteKind.ENC_FF}
_MEMORY_KINDS = {SiteKind.DEC_CROSS_K, SiteKind.DEC_CROSS_V}


@dataclass(frozen=True)
class InsertionSite:
    kind: SiteKind
    layer: int

    def __str__(self):
        return f"{self.kind.value}.{self.layer}"

    @staticmethod
    def parse(text):
        kind, _, layer = text.rpartition(".")
        return InsertionSite(SiteKind(kind), int(layer))


class Wiring(enum.Enum):
    MODULE_OUTPUT = "module_output"
    MODULE_INPUT = "module_input"
    ENCODER_FINAL = "encoder_final"


@dataclass
class PetAttachment:
    site: InsertionSite
    controller: gran.GranularityController
    modification: object  # MultiHeadModification or BaselineModification or None
    input_wiring: Wiring = Wiring.MODULE_OUTPUT
    update_rule: str = "gated"  # "gated" (G * (H + dH)) or "add" (H + dH + G)


@dataclass
class FreezePolicy:
    backbone_frozen: bool = True
    encoder_ln_trainable: bool = True
    decoder_ln_trainable: bool = False
    visual_projector_mode: str = "trainable"  # trainable|frozen|absent|noise|decomposed
    trainable_biases: bool = False  # bias-only tuning


class Linear:
    def __init__(self, model, name, din, dout, bias=True):
        self.w = model._add(f"{name}.w", (din, dout))
        self.b = model._add(f"{name}.b", (dout,)) if bias else None
        self.lora = None

    def __call__(self, x):
        if self.lora is not None:
            y = mods.lora_forward(self.lora, x, self.w)
        else:
            y = matmul(x, self.w)
        return add(y, self.b) if self.b is not None else y


class LayerNorm:
    def __init__(self, model, name, d):
        self.w = model._add(f"{name}.w", (d,))
        self.b = model._add(f"{name}.b", (d,))

    def __call__(self, x):
        mu = tmean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = tmean(mul(xc, xc), axis=-1, keepdims=True)
        inv = power(add(var, LN_EPS), -0.5)
        return add(mul(mul(xc, inv), self.w), self.b)


class Attention:
    def __init__(self, model, name, d, n_heads):
        self.d, self.n_heads, self.dh = d, n_heads, d // n_heads
        self.q = Linear(model, f"{name}.q", d, d)
        self.k = Linear(model, f"{name}.k", d, d)
        self.v = Linear(model, f"{name}.v", d, d)
        self.o = Linear(model, f"{name}.o", d, d)

    def _split(self, x):
        b, n, _ = x.shape
        return transpose(reshape(x, (b, n, self.n_heads, self.dh)), (0, 2, 1, 3))

    def __call__(self, xq, xkv, mask=None, k_hook=None, v_hook=None):
        q, k, v = self.q(xq), self.k(xkv), self.v(xkv)
        if k_hook is not None:
            k = k_hook(k)
        if v_hook is not None:
            v = v_hook(v)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scores = mul(matmul(qh, transpose(kh)), 1.0 / np.sqrt(self.dh))
        if mask is not None:
            scores = add(scores, Tensor(mask))
        ctx = matmul(softmax(scores), vh)
        b, _, nq, _ = ctx.shape
        merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, nq, self.d))
        return self.o(merged)


class EncoderLayer:
    def __init__(self, model, name, cfg):
        self.attn = Attention(model, f"{name}.attn", cfg.d, cfg.n_attn_heads)
        self.ln1 = LayerNorm(model, f"{name}.ln1", cfg.d)
        self.fc1 = Linear(model, f"{name}.fc1", cfg.d, cfg.d_ffn)
        self.fc2 = Linear(model, f"{name}.fc2", cfg.d_ffn, cfg.d)
        self.ln2 = LayerNorm(model, f"{name}.ln2", cfg.d)


class DecoderLayer:
    def __init__(self, model, name, cfg):
        self.self_attn = Attention(model, f"{name}.self_attn", cfg.d, cfg.n_attn_heads)
        self.ln1 = LayerNorm(model, f"{name}.ln1", cfg.d)
        self.cross_attn = Attention(model, f"{name}.cross_attn", cfg.d, cfg.n_attn_heads)
        self.ln2 = LayerNorm(model, f"{name}.ln2", cfg.d)
        self.fc1 = Linear(model, f"{name}.fc1", cfg.d, cfg.d_ffn)
        self.fc2 = Linear(model, f"{name}.fc2", cfg.d_ffn, cfg.d)
        self.ln3 = LayerNorm(model, f"{name}.ln3", cfg.d)


class VisualProjector:
    """Trainable linear map from raw visual features into the model width."""

    def __init__(self, model, cfg):
        self.linear = Linear(model, "projector", cfg.visual_dim, cfg.d)

    def __call__(self, feats):
        return self.linear(feats)


class DecomposedProjector:
    """Projector decomposition: multi-head delta without residual, optional gate."""

    def __init__(self, model, cfg, r, n_heads, gated, dtype):
        self.mod = mods.MultiHeadModification(
            mods.Variant.DOWN, d=cfg.d, r=r, n_heads=n_heads, in_dim=cfg.visual_dim, dtype=dtype
        )
        for pname, p in self.mod.params.items():
            model._register(f"projector.mod.{pname}", p)
        self.gate = None
        if gated:
            self.gate = gran.GranularityController(
                gran.GranularityLevel.LARGE, d=cfg.d, r=r, s=1.0, in_dim=cfg.visual_dim, dtype=dtype
            )
            for pname, p in self.gate.params.items():
                model._register(f"projector.gate.{pname}", p)

    def __call__(self, feats, gate_override=None):
        delta = self.mod(feats)
        g = gate_override
        if g is None and self.gate is not None:
            g = self.gate.generate(x=feats)
        if g is None:
            return delta
        return mul(g, delta)


def project_visual(projector, feats):
    """Apply a visual projector (either mode) to raw features."""
    if feats.shape[-1] != projector_in_dim(projector):
        raise DimensionError(
            f"visual feature width {feats.shape[-1]} != projector input {projector_in_dim(projector)}"
        )
    return projector(feats)


def projector_in_dim(projector):
    if isinstance(projector, VisualProjector):
        return projector.linear.w.shape[0]
    return projector.mod.in_dim


class Model:
    """The backbone plus whatever attachments and freeze policy were applied.

    All parameters are created as zeros; call ``init_backbone`` /
    ``init_weights`` to fill them.  This keeps count-only instantiation
    cheap for large accounting shapes.
    """

    def __init__(self, cfg, visual_mode="trainable", dtype=np.float32,
                 decomposed_r=16, decomposed_heads=4, decomposed_gated=False):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        self.visual_mode = visual_mode
        self._params = {}
        self.attachments = {}
        self._lora = []

        d = cfg.d
        self.embed = self._add("embed", (cfg.vocab_size, d))
        self.pos_enc = self._add("pos_enc", (cfg.max_len, d))
        self.pos_dec = self._add("pos_dec", (cfg.max_len, d))
        self.ln_emb_enc = LayerNorm(self, "ln_emb_enc", d)
        self.ln_emb_dec = LayerNorm(self, "ln_emb_dec", d)
        self.enc_layers = [EncoderLayer(self, f"enc.{i}", cfg) for i in range(cfg.n_enc_layers)]
        self.dec_layers = [DecoderLayer(self, f"dec.{i}", cfg) for i in range(cfg.n_dec_layers)]
        if visual_mode == "absent":
            self.projector = None
        elif visual_mode == "decomposed":
            self.projector = DecomposedProjector(
                self, cfg, decomposed_r, decomposed_heads, decomposed_gated, self.dtype
            )
        else:
            self.projector = VisualProjector(self, cfg)

    # -- parameter registry ----------------------------------------------------

    def _add(self, name, shape):
        p = parameter(np.zeros(shape, dtype=self.dtype), name=name)
        self._params[name] = p
        return p

    def _register(self, name, p):
        p.name = name
        self._params[name] = p
        return p

    def named_params(self):
        return dict(self._params)

    def trainable_params(self):
        return [p for p in self._params.values() if p.requires_grad]

    def param_count(self):
        total = sum(p.data.size for p in self._params.values())
        trainable = sum(p.data.size for p in self._params.values() if p.requires_grad)
        return trainable, total

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    # -- attachments -----------------------------------------------------------

    def attach(self, plan):
        """Bind attachments; then reapply the freeze policy if one is active."""
        for att in plan:
            site = att.site
            if site in self.attachments:
                raise mods.ConfigError(f"duplicate attachment at site {site}")
            n_layers = (
                self.cfg.n_enc_layers if site.kind in _ENCODER_KINDS else self.cfg.n_dec_layers
            )
            if not 0 <= site.layer < n_layers:
                raise mods.ConfigError(f"site {site} outside configured layer range")
            self.attachments[site] = att
            prefix = f"pet.{site.kind.value}.{site.layer}"
            if att.modification is not None:
                for pname, p in att.modification.params.items():
                    self._register(f"{prefix}.mod.{pname}", p)
            for pname, p in att.controller.params.items():
                self._register(f"{prefix}.gate.{pname}", p)
        return self

    def attach_lora(self, r, rng=None):
        """Add low-rank factors to every attention query and value projection."""
        targets = []
        for i, layer in enumerate(self.enc_layers):
            targets += [(f"enc.{i}.attn", layer.attn)]
        for i, layer in enumerate(self.dec_layers):
            targets += [(f"dec.{i}.self_attn", layer.self_attn), (f"dec.{i}.cross_attn", layer.cross_attn)]
        for name, attn in targets:
            for proj_name, proj in (("q", attn.q), ("v", attn.v)):
                b = mods.BaselineModification(mods.BaselineKind.LORA, self.cfg.d, r, dtype=self.dtype)
                proj.lora = b
                for pname, p in b.params.items():
                    self._register(f"pet.lora.{name}.{proj_name}.{pname}", p)
                self._lora.append(b)
        return self

    # -- initialization --------------------------------------------------------

    def init_backbone(self, rng, std=0.02):
        """Gaussian weights, zero biases, unit LayerNorm scales."""
        for name, p in self._params.items():
            if name.startswith("pet."):
                continue
            last = name.rsplit(".", 1)[-1]
            if ".ln" in name or name.startswith("ln_emb"):
                p.data = np.ones(p.shape, self.dtype) if last == "w" else np.zeros(p.shape, self.dtype)
            elif last == "b":
                p.data = np.zeros(p.shape, self.dtype)
            else:
                p.data = rng.normal(p.shape, std, self.dtype)
        return self

    def init_weights(self, policy, rng, std=0.02):
        """Initialize attachment weights: 'gaussian' or 'zero_up'.

        Under zero_up every up projection (including gate up projections and
        low-rank B factors) starts at zero.  The middle_y vector starts at
        zero under both policies.
        """
        if policy not in ("gaussian", "zero_up"):
            raise mods.ConfigError(f"unknown init policy {policy!r}")
        for name, p in self._params.items():
            if not name.startswith("pet.") and ".mod." not in name and ".gate." not in name:
                continue
            last = name.rsplit(".", 1)[-1]
            if last == "gate_vec":
                p.data = np.zeros(p.shape, self.dtype)
            elif policy == "zero_up" and (
                last in ("up", "gate_up", "lora_b") or last.startswith("up_")
            ):
                p.data = np.zeros(p.shape, self.dtype)
            else:
                p.data = rng.normal(p.shape, std, self.dtype)
        return self

    def apply_freeze(self, policy):
        self.freeze_policy = policy
        for name, p in self._params.items():
            if name.startswith("pet."):
                p.requires_grad = True
            elif name.startswith("projector"):
                p.requires_grad = policy.visual_projector_mode in ("trainable", "noise", "decomposed")
            elif not policy.backbone_frozen:
                p.requires_grad = True
            else:
                trainable = False
                if ".ln" in name or name.startswith("ln_emb"):
                    enc_side = name.startswith("enc.") or name == "ln_emb_enc.w" or name == "ln_emb_enc.b"
                    trainable = policy.encoder_ln_trainable if enc_side else policy.decoder_ln_trainable
                is_ln = ".ln" in name or name.startswith("ln_emb")
                if policy.trainable_biases and name.endswith(".b") and not is_ln:
                    trainable = True
                p.requires_grad = trainable
        return self

    # -- forward ---------------------------------------------------------------

    def _apply_site(self, site, x_in, h, capture=None, rows_mask=None, enc_out=None):
        att = self.attachments.get(site)
        if att is None:
            return h
        if att.input_wiring is Wiring.MODULE_OUTPUT:
            x_prime = h
        elif att.input_wiring is Wiring.MODULE_INPUT:
            x_prime = x_in
        else:
            x_prime = enc_out
        if att.modification is not None:
            delta = att.modification(x_prime)
        else:
            delta = Tensor(np.zeros(h.shape, h.dtype))
        g = att.controller.generate(x=x_in, h=h, n_rows=h.shape[-2], mask=rows_mask)
        if g.shape != h.shape:
            g = mul(g, Tensor(np.ones(h.shape[:-2] + (1, 1), h.dtype)))
        if att.update_rule == "add":
            out = gran.apply_update_add(h, delta, g)
        else:
            out = gran.apply_update(h, delta, g)
        if capture is not None:
            capture[str(site)] = {"X": x_in, "H": h, "delta": delta, "G": g, "out": out}
        return out

    def _positions(self, table, length):
        if length > self.cfg.max_len:
            raise ContractError(f"sequence length {length} exceeds max_len {self.cfg.max_len}")
        return take_rows(table, np.arange(length))

    def encode(self, feats, text_ids, text_pad_mask, capture=None):
        """feats: (B, n_v, visual_dim) or None; text_ids: (B, Lt) int array."""
        tok = take_rows(self.embed, text_ids)
        if feats is not None:
            if self.projector is None:
                raise ContractError("model built without a visual projector")
            vis = project_visual(self.projector, feats)
            x = concat([vis, tok], axis=-2)
            n_v = feats.shape[-2]
            rows_mask = np.concatenate(
                [np.ones(text_pad_mask.shape[:-1] + (n_v,), text_pad_mask.dtype), text_pad_mask],
                axis=-1,
            )
        else:
            x = tok
            rows_mask = text_pad_mask
        length = x.shape[-2]
        x = add(x, self._positions(self.pos_enc, length))
        x = self.ln_emb_enc(x)
        attn_mask = ((1.0 - rows_mask) * MASK_NEG)[:, None, None, :]
        for i, layer in enumerate(self.enc_layers):
            h = layer.attn(x, x, attn_mask)
            h = self._apply_site(InsertionSite(SiteKind.ENC_SELF, i), x, h, capture, rows_mask)
            x = layer.ln1(add(x, h))
            h2 = layer.fc2(gelu(layer.fc1(x)))
            h2 = self._apply_site(InsertionSite(SiteKind.ENC_FF, i), x, h2, capture, rows_mask)
            x = layer.ln2(add(x, h2))
        return x, rows_mask

    def decode(self, enc_out, enc_rows_mask, dec_ids, dec_pad_mask, capture=None):
        tok = take_rows(self.embed, dec_ids)
        t = tok.shape[-2]
        x = self.ln_emb_dec(add(tok, self._positions(self.pos_dec, t)))
        causal = np.triu(np.full((t, t), MASK_NEG, dtype=x.dtype), k=1)
        self_mask = causal[None, None, :, :] + ((1.0 - dec_pad_mask) * MASK_NEG)[:, None, None, :]
        cross_mask = ((1.0 - enc_rows_mask) * MASK_NEG)[:, None, None, :]
        for i, layer in enumerate(self.dec_layers):
            h = layer.self_attn(x, x, self_mask)
            h = self._apply_site(InsertionSite(SiteKind.DEC_SELF, i), x, h, capture, dec_pad_mask)
            x = layer.ln1(add(x, h))
            k_hook = lambda k, i=i: self._apply_site(
                InsertionSite(SiteKind.DEC_CROSS_K, i), enc_out, k, capture, enc_rows_mask, enc_out
            )
            v_hook = lambda v, i=i: self._apply_site(
                InsertionSite(SiteKind.DEC_CROSS_V, i), enc_out, v, capture, enc_rows_mask, enc_out
            )
            h = layer.cross_attn(x, enc_out, cross_mask, k_hook=k_hook, v_hook=v_hook)
            h = self._apply_site(InsertionSite(SiteKind.DEC_CROSS, i), x, h, capture, dec_pad_mask)
            x = layer.ln2(add(x, h))
            h2 = layer.fc2(gelu(layer.fc1(x)))
            h2 = self._apply_site(InsertionSite(SiteKind.DEC_FF, i), x, h2, capture, dec_pad_mask)
            x = layer.ln3(add(x, h2))
        return matmul(x, transpose(self.embed))

    def forward_batch(self, feats, text_ids, text_pad_mask, dec_in, dec_pad_mask, capture=None):
        enc_out, enc_rows_mask = self.encode(feats, text_ids, text_pad_mask, capture)
        return self.decode(enc_out, enc_rows_mask, dec_in, dec_pad_mask, capture)

    def forward(self, visual_feats, text_ids, target_ids, capture=None):
        """Single-example convenience: returns (logits, scalar loss).

        ``target_ids`` is the raw target sequence (no specials); teacher
        forcing feeds [BOS] + target and predicts target + [EOS].
        """
        text = np.asarray(text_ids)[None, :]
        tmask = np.ones(text.shape, self.dtype)
        dec_in = np.asarray([BOS] + list(target_ids))[None, :]
        dec_out = np.asarray(list(target_ids) + [EOS])[None, :]
        dmask = np.ones(dec_in.shape, self.dtype)
        feats = None
        if visual_feats is not None:
            f = visual_feats.data if isinstance(visual_feats, Tensor) else np.asarray(visual_feats)
            feats = Tensor(f[None, ...].astype(self.dtype))
        logits = self.forward_batch(feats, text, tmask, dec_in, dmask, capture)
        loss = cross_entropy(logits, dec_out, dmask)
        return logits, loss

    def greedy_decode(self, feats, text_ids, text_pad_mask, max_steps=24):
        """Batched greedy decoding; returns a list of token-id lists."""
        enc_out, enc_rows_mask = self.encode(feats, text_ids, text_pad_mask)
        b = text_ids.shape[0]
        seq = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_steps):
            dmask = np.ones(seq.shape, self.dtype)
            logits = self.decode(enc_out, enc_rows_mask, seq, dmask)
            nxt = logits.data[:, -1, :].argmax(axis=-1)
            nxt = np.where(done, PAD, nxt)
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
        outs = []
        for row in seq[:, 1:]:
            toks = []
            for t in row:
                if t in (EOS, PAD):
                    break
                toks.append(int(t))
            outs.append(toks)
        return outs


def cross_entropy(logits, target_ids, target_mask):
    """Token-level cross entropy, averaged over unmasked positions."""
    lp = log_softmax(logits, axis=-1)
    v = logits.shape[-1]
    onehot = np.eye(v, dtype=logits.dtype)[np.asarray(target_ids)]
    nll = mul(tsum(mul(lp, Tensor(onehot)), axis=-1), -1.0)
    m = np.asarray(target_mask, dtype=logits.dtype)
    return mul(tsum(mul(nll, Tensor(m))), 1.0 / m.sum())


# -- checkpointing ---------------------------------------------------------------

_MAGIC = b"PBCK"


def save_checkpoint(model, path):
    """Little-endian binary tensor archive with a JSON manifest.

    Layout: magic, u64 header length, JSON header, concatenated raw blobs.
    Each entry records name, shape, dtype, frozen flag, offset and size.
    Round trips are bit-exact.
    """
    entries, blobs, offset = [], [], 0
    for name, p in model._params.items():
        le = p.data.astype(p.data.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(p.shape),
                "dtype": str(p.data.dtype),
                "frozen": not p.requires_grad,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"entries": entries}).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(model, path):
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ContractError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        blob = f.read()
    params = model._params
    for e in header["entries"]:
        if e["name"] not in params:
            raise ContractError(f"checkpoint tensor {e['name']} missing from model")
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<"))
        p = params[e["name"]]
        p.data = arr.reshape(e["shape"]).astype(p.data.dtype, copy=True)
        p.requires_grad = not e["frozen"]
    return model
