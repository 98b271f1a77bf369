"""Run configuration. JSON in, JSON out; unknown keys are rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .encoder import ConfigError

DEFAULT_RELATIONS = ["none", "co_mentioned", "in_front_of", "refers_to"]
PAIR_KINDS = ("ee", "eo", "oe", "oo")


@dataclass
class FeatureFlags:
    position: bool = True
    caption: bool = True
    depth: bool = True


@dataclass
class ExpertFlags:
    t2v: bool = True
    v2t: bool = True
    t: bool = True
    v: bool = True


@dataclass
class SyntheticConfig:
    variant: str = "default"  # "default" | "low_level"
    n_entities: int = 2
    n_objects: int = 2
    n_filler: int = 8
    image_size: int = 16
    n_names: int = 6
    n_fillers_vocab: int = 12


@dataclass
class RunConfig:
    d: int = 64
    L: int = 4
    max_tokens: int = 128
    max_objects: int = 12
    relations: list = field(default_factory=lambda: list(DEFAULT_RELATIONS))
    vocab_size: int = 64
    patch_size: int = 4
    hidden: int = 0  # classifier hidden width; 0 means 2*d
    lam: float = 0.1
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iter: int = 200
    log_domain_below: float = 0.05
    lr: float = 1e-5
    batch_size: int = 32
    dropout: float = 0.5
    weight_decay: float = 0.01
    router_lr_scale: float = 1.0  # multiplier on lr for P_route
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    steps: int = 2000
    eval_fraction: float = 0.2
    init_scale: float = 1.0
    disable_mot: bool = False
    mot_variant: str = "optimal_transport"
    disable_mmoe: bool = False
    features: FeatureFlags = field(default_factory=FeatureFlags)
    experts: ExpertFlags = field(default_factory=ExpertFlags)
    span_repr: str = "mean"
    allow_self_pairs: bool = False
    pair_kinds: list = field(default_factory=lambda: list(PAIR_KINDS))
    text_positional: bool = True
    text_encoder_init: str = "random"  # "random" | "mixing"
    freeze_text_encoder: bool = False
    code_dims: int = 4
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        self.validate()

    @property
    def hidden_width(self) -> int:
        return self.hidden or 2 * self.d

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def n_experts(self) -> int:
        return 2 * self.L + 2

    def validate(self) -> None:
        positive = ["d", "L", "max_tokens", "max_objects", "vocab_size", "patch_size", "lam",
                    "sinkhorn_tol", "sinkhorn_max_iter", "batch_size", "steps", "adam_eps"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.L < 2:
            raise ConfigError(f"L must be at least 2, got {self.L}")
        if self.lr < 0 or self.weight_decay < 0 or self.router_lr_scale < 0:
            raise ConfigError("lr, weight_decay and router_lr_scale must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if len(self.relations) < 2 or self.relations[0] != "none":
            raise ConfigError("relations must list 'none' first plus at least one relation")
        if len(set(self.relations)) != len(self.relations):
            raise ConfigError("duplicate relation names")
        if self.mot_variant not in ("optimal_transport", "cross_attention"):
            raise ConfigError(f"unknown mot_variant {self.mot_variant!r}")
        if self.span_repr not in ("mean", "marker"):
            raise ConfigError(f"unknown span_repr {self.span_repr!r}")
        if self.text_encoder_init not in ("random", "mixing"):
            raise ConfigError(f"unknown text_encoder_init {self.text_encoder_init!r}")
        if not set(self.pair_kinds) <= set(PAIR_KINDS) or not self.pair_kinds:
            raise ConfigError(f"pair_kinds must be a non-empty subset of {PAIR_KINDS}")
        e = self.experts
        if not (e.v2t or e.t) or not (e.t2v or e.v):
            raise ConfigError("expert flags leave one side of the mixture with no experts")
        if self.synthetic.variant not in ("default", "low_level"):
            raise ConfigError(f"unknown synthetic variant {self.synthetic.variant!r}")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def replace(self, **changes) -> "RunConfig":
        data = self.to_dict()
        for key, value in changes.items():
            if "." in key:
                outer, inner = key.split(".", 1)
                data[outer][inner] = value
            else:
                data[key] = value
        return RunConfig.from_dict(data)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = {"features": FeatureFlags, "experts": ExpertFlags, "synthetic": SyntheticConfig}.get(name)
        if cls is RunConfig and sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
