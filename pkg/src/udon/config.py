"""Flat ``key = value`` experiment configuration.

Resolution order, later wins: dataclass defaults, config file, ``UDON_<KEY>``
environment variables, explicit overrides (CLI flags). Synthetic domains are
described by ``domain.<i>.<field>`` keys and the feature layout by
``layout.<field>`` keys.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .autograd import ContractError
from .datagen import DEFAULT_SPLIT_FRACTIONS, DomainSpec, Layout
from .losses import REL_NORMS, LossFlags
from .model import PROJECTOR_KINDS, ModelConfig
from .sampler import LOSS_SOURCES, SAMPLER_KINDS

DISTILL_LOGITS = ("cosine", "scaled")
MODES = ("udon", "baseline_cls_only", "offline_distill_8", "offline_distill_1")
ENV_PREFIX = "UDON_"


class ConfigError(ContractError):
    pass


def default_domains() -> list[DomainSpec]:
    """Three balanced 20-class domains and one long-tail 100-class domain."""
    return [
        DomainSpec(0, 20, 0.0, 400, "cue_discriminative", 0.25),
        DomainSpec(1, 20, 0.0, 400, "cue_noise", 0.25),
        DomainSpec(2, 20, 0.0, 400, "cue_discriminative", 0.25),
        DomainSpec(3, 100, 1.2, 3000, "cue_noise", 0.25),
    ]


def default_layout() -> Layout:
    # a wide class subspace so 100 long-tail classes stay linearly separable
    return Layout(class_dims=32)


@dataclass
class ExperimentConfig:
    run_id: str = "udon"
    mode: str = "udon"
    # data
    data_path: str = ""
    data_seed: int = 0
    feature_dim: int = 64
    split_fractions: list[float] = field(default_factory=lambda: list(DEFAULT_SPLIT_FRACTIONS))
    domains: list[DomainSpec] = field(default_factory=default_domains)
    layout: Layout = field(default_factory=default_layout)
    # model
    backbone_hidden_dims: list[int] = field(default_factory=lambda: [256, 256])
    backbone_out_dim: int = 256
    student_dim: int = 64
    teacher_dim: int = 256
    projector_kind: str = "linear"
    classifier_temperature: float = 0.05
    mlp_baseline_heads: bool = False
    # sampler
    sampler: str = "dynamic"
    refresh_period: int = 17
    loss_source: str = "teacher_cls"
    sampler_weights: list[float] = field(default_factory=list)
    min_prob: float = 0.0
    class_balanced: bool = False
    # losses
    no_logit_distill: bool = False
    no_any_distill: bool = False
    no_student_ce: bool = False
    rel_norm: str = "mean"
    distill_logits: str = "cosine"
    temperature: float = 0.1
    # optimisation
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 2000
    teacher_steps: int = 0
    eval_every: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    def validate(self) -> None:
        checks = [
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (self.sampler in SAMPLER_KINDS, f"sampler must be one of {SAMPLER_KINDS}"),
            (self.loss_source in LOSS_SOURCES, f"loss_source must be one of {LOSS_SOURCES}"),
            (self.rel_norm in REL_NORMS, f"rel_norm must be one of {REL_NORMS}"),
            (self.distill_logits in DISTILL_LOGITS,
             f"distill_logits must be one of {DISTILL_LOGITS}"),
            (self.projector_kind in PROJECTOR_KINDS,
             f"projector_kind must be one of {PROJECTOR_KINDS}"),
            (self.optimizer == "adam", "only the adam optimizer is available"),
            (self.lr_schedule == "constant", "only the constant lr schedule is available"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.temperature > 0, "temperature must be positive"),
            (self.steps >= 1, "steps must be >= 1"),
            (self.refresh_period >= 1, "refresh_period must be >= 1"),
            (not self.no_any_distill or self.no_logit_distill,
             "no_any_distill requires no_logit_distill"),
            (self.mode != "baseline_cls_only" or self.loss_source == "student_cls"
             or self.sampler != "dynamic",
             "baseline_cls_only has no teachers; use loss_source=student_cls"),
            (not (self.mode == "baseline_cls_only" and self.no_student_ce),
             "baseline_cls_only with no_student_ce has no loss terms"),
            (self.sampler != "static_weights" or len(self.sampler_weights) == len(self.domains),
             "static_weights needs one weight per domain"),
            (len(self.seeds) >= 1, "at least one seed is required"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def loss_flags(self) -> LossFlags:
        return LossFlags(self.no_logit_distill, self.no_any_distill, self.no_student_ce)

    def model_config(self, classes_per_domain: list[int] | None = None,
                     input_dim: int | None = None) -> ModelConfig:
        classes = classes_per_domain or [d.num_classes for d in self.domains]
        return ModelConfig(
            input_dim=input_dim or self.feature_dim,
            backbone_hidden_dims=list(self.backbone_hidden_dims),
            backbone_out_dim=self.backbone_out_dim,
            student_dim=self.student_dim,
            teacher_dim=self.teacher_dim,
            num_domains=len(classes),
            classes_per_domain=list(classes),
            projector_kind=self.projector_kind,
            classifier_temperature=self.classifier_temperature,
            with_teachers=self.mode == "udon",
            mlp_baseline_heads=self.mlp_baseline_heads,
        )

    def to_text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in to_flat(self).items()) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# flat key/value conversion

_SCALAR_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)
                  if f.name not in ("domains", "layout")}
_DOMAIN_FIELDS = {f.name: f for f in dataclasses.fields(DomainSpec) if f.name != "domain_id"}
_LAYOUT_FIELDS = {f.name: f for f in dataclasses.fields(Layout)}


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_flat(cfg: ExperimentConfig) -> dict[str, str]:
    out = {}
    for name in _SCALAR_FIELDS:
        out[name] = _fmt(getattr(cfg, name))
    for name in _LAYOUT_FIELDS:
        out[f"layout.{name}"] = _fmt(getattr(cfg.layout, name))
    out["num_domains"] = str(len(cfg.domains))
    for d in cfg.domains:
        for name in _DOMAIN_FIELDS:
            out[f"domain.{d.domain_id}.{name}"] = _fmt(getattr(d, name))
    return out


def _coerce(raw: str, tp, key: str):
    raw = raw.strip()
    try:
        origin = typing.get_origin(tp)
        if origin in (list, tuple):
            (inner,) = typing.get_args(tp)[:1]
            return [_coerce(x, inner, key) for x in raw.split(",") if x.strip()]
        if origin in (typing.Union, types.UnionType):
            inner = [a for a in typing.get_args(tp) if a is not type(None)][0]
            return _coerce(raw, inner, key)
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    known = set(to_flat(ExperimentConfig())) | {"num_domains"}
    lower = {k.lower(): k for k in known}
    out = {}
    for k, v in environ.items():
        if not k.upper().startswith(ENV_PREFIX):
            continue
        key = k[len(ENV_PREFIX):]
        if key in known:
            out[key] = v
        elif key.lower() in lower:
            out[lower[key.lower()]] = v
        elif key.lower().replace("__", ".") in lower:
            out[lower[key.lower().replace("__", ".")]] = v
    return out


def from_flat(values: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = dataclasses.replace(base) if base is not None else ExperimentConfig()
    domains = {d.domain_id: dict(vars(d)) for d in cfg.domains}
    layout = dict(vars(cfg.layout))
    n_domains = None
    hints = typing.get_type_hints(ExperimentConfig)
    dom_hints = typing.get_type_hints(DomainSpec)
    lay_hints = typing.get_type_hints(Layout)
    for key, raw in values.items():
        if key == "num_domains":
            n_domains = _coerce(raw, int, key)
        elif key.startswith("domain."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in _DOMAIN_FIELDS:
                raise ConfigError(f"unknown domain key {key!r}")
            i = _coerce(parts[1], int, key)
            entry = domains.setdefault(i, {"domain_id": i})
            entry[parts[2]] = _coerce(raw, dom_hints[parts[2]], key)
        elif key.startswith("layout."):
            name = key.split(".", 1)[1]
            if name not in _LAYOUT_FIELDS:
                raise ConfigError(f"unknown layout key {key!r}")
            layout[name] = _coerce(raw, lay_hints[name], key)
        elif key in _SCALAR_FIELDS:
            setattr(cfg, key, _coerce(raw, hints[key], key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if n_domains is not None:
        domains = {i: d for i, d in domains.items() if i < n_domains}
        missing = [i for i in range(n_domains) if i not in domains]
        if missing:
            raise ConfigError(f"num_domains={n_domains} but domain {missing[0]} is not described")
    try:
        cfg.domains = [DomainSpec(**domains[i]) for i in sorted(domains)]
        cfg.layout = Layout(**layout)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg.split_fractions = list(cfg.split_fractions)
    return cfg


def load_config(path=None, overrides: dict[str, str] | None = None,
                environ=None) -> ExperimentConfig:
    values: dict[str, str] = {}
    if path is not None:
        values.update(parse_text(Path(path).read_text(), str(path)))
    values.update(env_overrides(environ))
    values.update(overrides or {})
    cfg = from_flat(values)
    cfg.validate()
    return cfg


def default_config_path() -> Path:
    return Path(__file__).with_name("configs") / "default.cfg"


def parse_grid(text: str, source: str = "<grid>") -> tuple[dict[str, str], list[str],
                                                             dict[str, dict[str, str]]]:
    """Split an ablation grid file into base overrides, named cells and custom cells.

    ``cells = a, b`` lists built-in cells; ``cell.<name>.<key> = value`` lines
    define (or extend) a custom cell; every other line overrides the base config.
    """
    base: dict[str, str] = {}
    named: list[str] = []
    custom: dict[str, dict[str, str]] = {}
    for key, value in parse_text(text, source).items():
        if key == "cells":
            named = [c.strip() for c in value.split(",") if c.strip()]
        elif key.startswith("cell."):
            parts = key.split(".", 2)
            if len(parts) != 3 or not parts[1] or not parts[2]:
                raise ConfigError(f"{source}: expected cell.<name>.<key>, got {key!r}")
            custom.setdefault(parts[1], {})[parts[2]] = value
        else:
            base[key] = value
    return base, named, custom
