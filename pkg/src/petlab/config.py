"""Experiment configuration and its flat dotted-key text format.

The config file is plain ``key = value`` lines (``#`` comments allowed),
with dotted sections for the backbone shape and freeze policy.  Unknown
keys are hard errors.  ``to_text``/``from_text`` round-trip losslessly.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace

from .backbone import BackboneConfig, FreezePolicy

METHODS = (
    "gated_large",
    "gated_middle_x",
    "gated_middle_y",
    "gated_small",
    "gated_add",
    "ungated",
    "adapter",
    "adapter_gated_large",
    "adapter_gated_middle_x",
    "adapter_gated_middle_y",
    "adapter_gated_small",
    "lora",
    "bitfit",
    "full",
    "frozen",
)

PLANS = ("lightweight", "conventional", "custom")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    method: str = "gated_large"
    plan: str = "lightweight"
    custom_sites: str = ""
    variant: str = "down"
    r: int = 16
    n_heads: int = 4
    n_heads_dec: int = 1
    s: float = 1.0
    s_dec: float = 1.0
    init: str = "gaussian"
    backbone_frozen: bool = True
    encoder_ln_trainable: bool = True
    decoder_ln_trainable: bool = False
    visual_mode: str = "trainable"
    visual_gate: bool = False
    tasks: str = "lookup,match,copy,caption"
    task_mode: str = "multi"
    seed: int = 0
    steps: int = 2000
    batch: int = 16
    lr: float = 1e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    eval_size: int = 50
    dtype: str = "float32"

    def task_list(self):
        return [t for t in self.tasks.split(",") if t]

    def freeze_policy(self):
        policy = FreezePolicy(
            backbone_frozen=self.backbone_frozen,
            encoder_ln_trainable=self.encoder_ln_trainable,
            decoder_ln_trainable=self.decoder_ln_trainable,
            visual_projector_mode=self.visual_mode,
        )
        if self.method == "bitfit":
            policy.trainable_biases = True
        if self.method == "full":
            policy.backbone_frozen = False
        if self.method == "frozen":
            policy.encoder_ln_trainable = False
            policy.decoder_ln_trainable = False
            if policy.visual_projector_mode == "trainable":
                policy.visual_projector_mode = "frozen"
        return policy

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.plan not in PLANS:
            raise ConfigError(f"unknown plan {self.plan!r}")
        if self.task_mode not in ("multi", "single"):
            raise ConfigError(f"task_mode must be multi or single, got {self.task_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.init not in ("gaussian", "zero_up"):
            raise ConfigError(f"init must be gaussian or zero_up, got {self.init!r}")
        if self.visual_mode not in ("absent", "noise", "frozen", "trainable", "decomposed"):
            raise ConfigError(f"unknown visual_mode {self.visual_mode!r}")
        if self.variant not in ("down", "up", "down_up", "down_up_pair"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.s <= 0 or self.s_dec <= 0:
            raise ConfigError("scaling factors must be positive")
        if not self.task_list():
            raise ConfigError("tasks must be non-empty")
        return self


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _flat_fields():
    """(flat key, section, field name, type) for every config entry."""
    rows = []
    for f in BackboneConfig.__dataclass_fields__.values():
        rows.append((f"backbone.{f.name}", "backbone", f.name, f.type))
    for f in ExperimentConfig.__dataclass_fields__.values():
        if f.name == "backbone":
            continue
        section = None
        key = f.name
        if f.name in ("backbone_frozen", "encoder_ln_trainable", "decoder_ln_trainable"):
            key = f"freeze.{f.name}"
        rows.append((key, section, f.name, f.type))
    return rows


_FIELDS = {key: (section, name, typ) for key, section, name, typ in _flat_fields()}


def _parse_value(typ, raw, key):
    typ = typ if isinstance(typ, str) else typ.__name__
    raw = raw.strip()
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "bool":
            return _BOOL[raw.lower()]
        return raw
    except (ValueError, KeyError) as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


def from_text(text):
    """Parse config text; unknown keys raise."""
    bb_kwargs, kwargs = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name, typ = _FIELDS[key]
        value = _parse_value(typ, raw, key)
        (bb_kwargs if section == "backbone" else kwargs)[name] = value
    cfg = ExperimentConfig(backbone=BackboneConfig(**bb_kwargs), **kwargs)
    return cfg.validate()


def to_text(cfg):
    """Canonical serialization: one key per line, stable order."""
    lines = []
    for key, (section, name, _typ) in _FIELDS.items():
        value = getattr(cfg.backbone, name) if section == "backbone" else getattr(cfg, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def load(path):
    with open(path) as f:
        return from_text(f.read())


def save(cfg, path):
    with open(path, "w") as f:
        f.write(to_text(cfg))


def apply_overrides(cfg, overrides):
    """Apply CLI ``key=value`` overrides on top of a parsed config."""
    bb = dict(asdict(cfg.backbone))
    flat = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown override key {key!r}")
        section, name, typ = _FIELDS[key]
        value = _parse_value(typ, raw, key)
        if section == "backbone":
            bb[name] = value
        else:
            flat[name] = value
    cfg = replace(cfg, backbone=BackboneConfig(**bb), **flat)
    return cfg.validate()


def config_hash(cfg):
    return hashlib.sha256(to_text(cfg).encode()).hexdigest()[:12]
