"""Shared backbone with a universal student head and per-domain teacher heads."""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ContractError, DimensionError, Tensor

PROJECTOR_KINDS = ("linear", "mlp_one_hidden")
MLP_BASELINE_HIDDEN = (256, 256, 512)

CKPT_MAGIC = b"UDONCKPT"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int = 64
    backbone_hidden_dims: list[int] = field(default_factory=lambda: [256, 256])
    backbone_out_dim: int = 256
    student_dim: int = 64
    teacher_dim: int = 256
    num_domains: int = 4
    classes_per_domain: list[int] = field(default_factory=lambda: [20, 20, 20, 100])
    projector_kind: str = "linear"
    classifier_temperature: float = 0.05
    with_teachers: bool = True
    with_student: bool = True
    mlp_baseline_heads: bool = False

    def validate(self) -> None:
        if not (self.with_student or self.with_teachers):
            raise ContractError("model needs a student head, teacher heads, or both")
        if self.student_dim > self.backbone_out_dim or self.teacher_dim > self.backbone_out_dim:
            raise ContractError("student_dim and teacher_dim must not exceed backbone_out_dim")
        if len(self.classes_per_domain) != self.num_domains:
            raise ContractError("classes_per_domain must have num_domains entries")
        if any(c < 2 for c in self.classes_per_domain):
            raise ContractError("every domain needs at least 2 classes")
        if self.projector_kind not in PROJECTOR_KINDS:
            raise ContractError(f"projector_kind must be one of {PROJECTOR_KINDS}")
        if self.classifier_temperature <= 0:
            raise ContractError("classifier_temperature must be positive")


def _linear_count(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def _projector_count(kind: str, n_in: int, n_out: int) -> int:
    if kind == "linear":
        return _linear_count(n_in, n_out)
    return _linear_count(n_in, n_out) + _linear_count(n_out, n_out)


def backbone_param_count(cfg: ModelConfig) -> int:
    dims = [cfg.input_dim, *cfg.backbone_hidden_dims, cfg.backbone_out_dim]
    return sum(_linear_count(a, b) for a, b in zip(dims[:-1], dims[1:]))


def student_head_param_count(cfg: ModelConfig) -> int:
    if not cfg.with_student:
        return 0
    n = _projector_count(cfg.projector_kind, cfg.backbone_out_dim, cfg.student_dim)
    cls_in = cfg.student_dim
    if cfg.mlp_baseline_heads:
        dims = [cfg.student_dim, *MLP_BASELINE_HIDDEN]
        per_domain = sum(_linear_count(a, b) for a, b in zip(dims[:-1], dims[1:]))
        n += per_domain * cfg.num_domains
        cls_in = MLP_BASELINE_HIDDEN[-1]
    return n + cls_in * sum(cfg.classes_per_domain)


def teacher_heads_param_count(cfg: ModelConfig) -> int:
    if not cfg.with_teachers:
        return 0
    proj = _projector_count(cfg.projector_kind, cfg.backbone_out_dim, cfg.teacher_dim)
    return proj * cfg.num_domains + cfg.teacher_dim * sum(cfg.classes_per_domain)


def expected_param_count(cfg: ModelConfig) -> int:
    return (backbone_param_count(cfg) + student_head_param_count(cfg)
            + teacher_heads_param_count(cfg))


class ModelParams:
    """Named trainable tensors, kept in a fixed insertion order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]

    def count(self) -> int:
        return sum(t.values.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: ag.parameter(t.values.copy(), n)
                                         for n, t in self.tensors.items()})

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self.tensors.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, t in self.tensors.items():
            h.update(n.encode())
            h.update(t.values.tobytes())
        return h.hexdigest()


def _glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-a, a, size=(n_in, n_out))


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; classifier rows are (C, dim)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    t: dict[str, Tensor] = {}

    def linear(name, n_in, n_out):
        t[f"{name}.w"] = ag.parameter(_glorot(rng, n_in, n_out), f"{name}.w")
        t[f"{name}.b"] = ag.parameter(np.zeros((1, n_out)), f"{name}.b")

    def projector(name, n_in, n_out):
        linear(f"{name}.0", n_in, n_out)
        if cfg.projector_kind == "mlp_one_hidden":
            linear(f"{name}.1", n_out, n_out)

    def classifier(name, n_classes, dim):
        t[name] = ag.parameter(_glorot(rng, dim, n_classes).T.copy(), name)

    dims = [cfg.input_dim, *cfg.backbone_hidden_dims, cfg.backbone_out_dim]
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        linear(f"backbone.{k}", a, b)
    for i, c in enumerate(cfg.classes_per_domain if cfg.with_student else []):
        if i == 0:
            projector("student.proj", cfg.backbone_out_dim, cfg.student_dim)
        cls_in = cfg.student_dim
        if cfg.mlp_baseline_heads:
            mdims = [cfg.student_dim, *MLP_BASELINE_HIDDEN]
            for k, (a, b) in enumerate(zip(mdims[:-1], mdims[1:])):
                linear(f"student.mlp.{i}.{k}", a, b)
            cls_in = MLP_BASELINE_HIDDEN[-1]
        classifier(f"student.cls.{i}", c, cls_in)
    if cfg.with_teachers:
        for i, c in enumerate(cfg.classes_per_domain):
            projector(f"teacher.{i}.proj", cfg.backbone_out_dim, cfg.teacher_dim)
            classifier(f"teacher.{i}.cls", c, cfg.teacher_dim)

    params = ModelParams(cfg, t)
    if params.count() != expected_param_count(cfg):
        raise AssertionError(f"parameter count {params.count()} != "
                             f"closed form {expected_param_count(cfg)}")
    return params


def _affine(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _project(params: ModelParams, name: str, x: Tensor) -> Tensor:
    h = _affine(params, f"{name}.0", x)
    if params.config.projector_kind == "mlp_one_hidden":
        h = _affine(params, f"{name}.1", ag.gelu(ag.layernorm_rows(h)))
    return ag.row_l2_normalize(h)


def as_input(features) -> Tensor:
    return features if isinstance(features, Tensor) else ag.constant(features)


def backbone_forward(params: ModelParams, features) -> Tensor:
    x = as_input(features)
    cfg = params.config
    if x.shape[1] != cfg.input_dim:
        raise DimensionError(f"backbone expects {cfg.input_dim} features, got {x.shape[1]}")
    n_layers = len(cfg.backbone_hidden_dims) + 1
    for k in range(n_layers):
        x = _affine(params, f"backbone.{k}", x)
        if k < n_layers - 1:
            x = ag.gelu(x)
    return ag.row_l2_normalize(x)


def student_embed(params: ModelParams, e_b: Tensor) -> Tensor:
    if not params.config.with_student:
        raise ContractError("model has no student head")
    if e_b.shape[1] != params.config.backbone_out_dim:
        raise DimensionError(f"student head expects {params.config.backbone_out_dim}-D input")
    return _project(params, "student.proj", e_b)


def teacher_embed(params: ModelParams, domain: int, e_b: Tensor) -> Tensor:
    cfg = params.config
    if not cfg.with_teachers:
        raise ContractError("model has no teacher heads")
    if not 0 <= domain < cfg.num_domains:
        raise ContractError(f"domain {domain} out of range [0, {cfg.num_domains})")
    if e_b.shape[1] != cfg.backbone_out_dim:
        raise DimensionError(f"teacher head expects {cfg.backbone_out_dim}-D input")
    return _project(params, f"teacher.{domain}.proj", e_b)


def cosine_logits(embedding: Tensor, weight: Tensor, temperature: float) -> Tensor:
    """<e_b, w_c / |w_c|> / temperature for every row b and class c."""
    if embedding.shape[1] != weight.shape[1]:
        raise DimensionError(f"embedding dim {embedding.shape[1]} != classifier dim "
                             f"{weight.shape[1]}")
    w = ag.row_l2_normalize(weight)
    return ag.scalar_scale(ag.matmul(embedding, ag.transpose(w)), 1.0 / temperature)


def logits(params: ModelParams, head: str, domain: int, embedding: Tensor) -> Tensor:
    cfg = params.config
    if not 0 <= domain < cfg.num_domains:
        raise ContractError(f"domain {domain} out of range [0, {cfg.num_domains})")
    if head == "student":
        x = embedding
        if cfg.mlp_baseline_heads:
            n = len(MLP_BASELINE_HIDDEN)
            for k in range(n):
                x = _affine(params, f"student.mlp.{domain}.{k}", x)
                if k < n - 1:
                    x = ag.gelu(x)
            x = ag.row_l2_normalize(x)
        weight = params[f"student.cls.{domain}"]
    elif head == "teacher":
        if not cfg.with_teachers:
            raise ContractError("model has no teacher heads")
        x, weight = embedding, params[f"teacher.{domain}.cls"]
    else:
        raise ContractError(f"head must be 'student' or 'teacher', got {head!r}")
    return cosine_logits(x, weight, cfg.classifier_temperature)


def embed_features(params: ModelParams, features: np.ndarray, head: str = "student",
                   domain: int | None = None, chunk: int = 4096) -> np.ndarray:
    """Inference-only embeddings as a plain array."""
    frozen = ModelParams(params.config, {n: ag.constant(t.values)
                                         for n, t in params.tensors.items()})
    out = []
    for start in range(0, len(features), chunk):
        e_b = backbone_forward(frozen, np.asarray(features[start:start + chunk], np.float64))
        if head == "student":
            out.append(student_embed(frozen, e_b).values)
        elif head == "teacher":
            out.append(teacher_embed(frozen, domain, e_b).values)
        elif head == "backbone":
            out.append(e_b.values)
        else:
            raise ContractError(f"unknown head {head!r}")
    if not out:
        dim = {"student": params.config.student_dim, "teacher": params.config.teacher_dim,
               "backbone": params.config.backbone_out_dim}[head]
        return np.zeros((0, dim))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# checkpoints


def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines)


def config_from_text(text: str) -> ModelConfig:
    raw = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    ints = lambda s: [int(x) for x in s.split(",") if x]  # noqa: E731
    return ModelConfig(
        input_dim=int(raw["input_dim"]),
        backbone_hidden_dims=ints(raw["backbone_hidden_dims"]),
        backbone_out_dim=int(raw["backbone_out_dim"]),
        student_dim=int(raw["student_dim"]),
        teacher_dim=int(raw["teacher_dim"]),
        num_domains=int(raw["num_domains"]),
        classes_per_domain=ints(raw["classes_per_domain"]),
        projector_kind=raw["projector_kind"],
        classifier_temperature=float(raw["classifier_temperature"]),
        with_teachers=raw["with_teachers"] == "True",
        with_student=raw["with_student"] == "True",
        mlp_baseline_heads=raw["mlp_baseline_heads"] == "True",
    )


def dumps_checkpoint(params: ModelParams, extra: str = "") -> bytes:
    """Serialize parameters; ``extra`` is free-form key=value text echoed verbatim."""
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    cfg_text = config_to_text(params.config).encode()
    extra_b = extra.encode()
    out.write(struct.pack("<III", CKPT_VERSION, len(cfg_text), len(extra_b)))
    out.write(cfg_text)
    out.write(extra_b)
    out.write(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        nb = name.encode()
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack("<II", *t.shape))
        out.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    return out.getvalue()


def loads_checkpoint(buf: bytes) -> tuple[ModelParams, str]:
    if buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    try:
        pos = len(CKPT_MAGIC)
        version, n_cfg, n_extra = struct.unpack_from("<III", buf, pos)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        pos += 12
        cfg = config_from_text(buf[pos:pos + n_cfg].decode())
        pos += n_cfg
        extra = buf[pos:pos + n_extra].decode()
        pos += n_extra
        (n_tensors,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors: dict[str, Tensor] = {}
        for _ in range(n_tensors):
            (n_name,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n_name].decode()
            pos += n_name
            rows, cols = struct.unpack_from("<II", buf, pos)
            pos += 8
            nbytes = rows * cols * 8
            if pos + nbytes > len(buf):
                raise CheckpointFormatError(f"truncated tensor {name!r}")
            vals = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos)
            tensors[name] = ag.parameter(vals.reshape(rows, cols).astype(np.float64), name)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise CheckpointFormatError("trailing bytes in checkpoint")
    return ModelParams(cfg, tensors), extra


def save_checkpoint(params: ModelParams, path, extra: str = "") -> None:
    Path(path).write_bytes(dumps_checkpoint(params, extra))


def load_checkpoint(path) -> tuple[ModelParams, str]:
    return loads_checkpoint(Path(path).read_bytes())
