"""Training loops: online UDON, classification-only baselines, offline distillation."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import model as M
from . import sampler as S
from .config import ExperimentConfig
from .datagen import Dataset, generate_multidomain, read_dataset
from .evaluation import (MetricsReport, joint_index_eval, separate_index_eval,
                         write_metrics_csv, write_summary_json)
from .losses import LossFlags, logit_distill, nsl_classification, relational_distill, total_loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, phase: str, losses: dict[str, float]):
        self.step = step
        self.phase = phase
        self.losses = losses
        terms = ", ".join(f"{k}={v!r}" for k, v in losses.items())
        super().__init__(f"training diverged at step {step} ({phase}): {terms}")


class Adam:
    """Adam with per-tensor step counts.

    Only tensors that received a gradient in a step are touched, so heads of
    other domains keep their exact values.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[int, list] = {}

    def step(self, grads: dict[ag.Tensor, np.ndarray]) -> None:
        b1, b2 = self.beta1, self.beta2
        for t, g in grads.items():
            st = self.state.get(id(t))
            if st is None:
                # hold a reference to t so its id cannot be reused
                st = self.state[id(t)] = [np.zeros_like(g), np.zeros_like(g), 0, t]
            m, v = st[0], st[1]
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            st[2] += 1
            k = st[2]
            denom = np.sqrt(v)
            denom *= 1.0 / math.sqrt(1 - b2 ** k)
            denom += self.eps
            t.values = t.values - (self.lr / (1 - b1 ** k)) * (m / denom)


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    refreshes: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def add_step(self, record: dict) -> None:
        if self.steps and record["step"] <= self.steps[-1]["step"] \
                and record.get("phase") == self.steps[-1].get("phase"):
            raise ValueError("run log steps must be strictly increasing")
        self.steps.append(record)

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        if self.steps:
            keys = list(self.steps[0].keys())
            with open(out_dir / "steps.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys)
                w.writeheader()
                w.writerows(self.steps)
        if self.refreshes:
            n = len(self.refreshes[0]["P"])
            with open(out_dir / "sampler_trace.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", "domain", *[f"P{m}" for m in range(n)]])
                for r in self.refreshes:
                    w.writerow([r["step"], r["domain"], *[repr(p) for p in r["P"]]])
        if self.evals:
            rows = []
            for e in self.evals:
                rows.extend(e["report"].rows(e["run_id"], e["seed"], e["step"], e["split"]))
            write_metrics_csv(out_dir / "val_metrics.csv", rows)


@dataclass
class TrainResult:
    params: M.ModelParams
    log: RunLog
    config: ExperimentConfig
    seed: int
    teachers: list[M.ModelParams] = field(default_factory=list)
    phase_steps: dict[str, int] = field(default_factory=dict)

    def total_param_count(self) -> int:
        return self.params.count() + sum(t.count() for t in self.teachers)


def load_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_path:
        return read_dataset(cfg.data_path)
    return generate_multidomain(cfg.domains, cfg.feature_dim, cfg.split_fractions,
                                cfg.data_seed, cfg.layout)


def _check_finite(step: int, phase: str, values: dict[str, float]) -> None:
    if not all(math.isfinite(v) for v in values.values() if v is not None):
        raise DivergenceError(step, phase, values)


def _make_sampler(cfg: ExperimentConfig, data: Dataset, seed: int,
                  loss_source: str | None = None) -> S.SamplerState:
    return S.make_sampler(cfg.sampler, data.num_domains, seed,
                          refresh_period=cfg.refresh_period,
                          loss_source=loss_source or cfg.loss_source,
                          weights=cfg.sampler_weights or None, dataset=data,
                          min_prob=cfg.min_prob)


def udon_step(params: M.ModelParams, x: np.ndarray, y: np.ndarray, domain: int,
              flags: LossFlags, temperature: float, rel_norm: str = "mean",
              frozen_teacher=None, distill_logits: str = "cosine"):
    """Forward one clean batch and build the loss bundle.

    ``frozen_teacher(x, domain)`` supplies detached teacher embeddings for
    offline distillation; otherwise the shared-backbone teacher head is used
    when the model has one. With ``distill_logits="cosine"`` the logit
    distillation softens the classifier cosines by ``temperature`` alone;
    ``"scaled"`` feeds the classification logits (cosines over the classifier
    temperature) instead.
    """
    cfg = params.config
    e_b = M.backbone_forward(params, x)
    cls_t = rel = log_d = None
    e_u = l_u = cls_u = None
    if cfg.with_student:
        e_u = M.student_embed(params, e_b)
        l_u = M.logits(params, "student", domain, e_u)
        cls_u = nsl_classification(l_u, y)
    if cfg.with_teachers:
        e_t = M.teacher_embed(params, domain, e_b)
        l_t = M.logits(params, "teacher", domain, e_t)
        cls_t = nsl_classification(l_t, y)
        if e_u is not None and flags.use_rel:
            rel = relational_distill(e_u, ag.stop_gradient(e_t), rel_norm)
        if l_u is not None and flags.use_log:
            d_u, d_t = l_u, ag.stop_gradient(l_t)
            if distill_logits == "cosine":
                tau = cfg.classifier_temperature
                d_u, d_t = ag.scalar_scale(d_u, tau), ag.scalar_scale(d_t, tau)
            log_d = logit_distill(d_u, d_t, temperature)
    elif frozen_teacher is not None and flags.use_rel:
        rel = relational_distill(e_u, ag.stop_gradient(frozen_teacher(x, domain)), rel_norm)
    return total_loss(cls_t, cls_u, rel, log_d, flags)


def _run_loop(params: M.ModelParams, data: Dataset, cfg: ExperimentConfig, seed: int,
              steps: int, flags: LossFlags, run_log: RunLog, phase: str,
              domains: list[int] | None = None, frozen_teacher=None,
              loss_source: str | None = None, eval_fn=None) -> None:
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    sampler = _make_sampler(cfg, data, seed, loss_source)
    batch_rng = np.random.default_rng([seed, 0xBA7C, len(run_log.steps)])
    pools = [data.indices("train", d) for d in range(data.num_domains)]
    source = sampler.loss_source
    for step in range(1, steps + 1):
        if domains is not None and len(domains) == 1:
            domain = domains[0]
        else:
            domain = S.next_domain(sampler)
        idx = S.make_batch(data, domain, cfg.batch_size, batch_rng, cfg.class_balanced,
                           pool=pools[domain])
        x = data.features[idx].astype(np.float64)
        y = data.label[idx].astype(np.int64)
        head_domain = 0 if domains is not None and len(domains) == 1 else domain
        bundle = udon_step(params, x, y, head_domain, flags, cfg.temperature, cfg.rel_norm,
                           frozen_teacher, cfg.distill_logits)
        values = bundle.values()
        _check_finite(step, phase, {k: v for k, v in values.items()
                                    if getattr(bundle, k) is not None})
        grads = ag.backward(bundle.total)
        opt.step(grads)

        if source == "teacher_cls" and bundle.cls_teacher is not None:
            S.record_loss(sampler, domain, values["cls_teacher"])
        else:
            S.record_loss(sampler, domain, values["cls_student"])
        refreshed = S.step(sampler)
        run_log.add_step({"phase": phase, "step": step, "domain": domain, **values})
        if refreshed:
            run_log.refreshes.append({"phase": phase, "step": step, "domain": domain,
                                      "P": sampler.probabilities.tolist()})
        if eval_fn is not None and cfg.eval_every and step % cfg.eval_every == 0:
            eval_fn(step)


def _embed_fn(params: M.ModelParams, head: str = "student"):
    frozen = M.ModelParams(params.config, {n: ag.constant(t.values)
                                           for n, t in params.tensors.items()})

    def fn(features, domain):
        return M.embed_features(frozen, features, head, domain)

    return fn


def train(cfg: ExperimentConfig, seed: int, data: Dataset | None = None) -> TrainResult:
    """Online training: ``udon`` or ``baseline_cls_only``.

    Offline modes are dispatched to :func:`train_offline_distill`.
    """
    cfg.validate()
    if cfg.mode in ("offline_distill_8", "offline_distill_1"):
        return train_offline_distill(cfg, seed, data)
    data = data if data is not None else load_data(cfg)
    mcfg = cfg.model_config(data.classes_per_domain, data.feature_dim)
    params = M.init_params(mcfg, seed)
    run_log = RunLog()
    flags = cfg.loss_flags

    def eval_fn(step):
        report = joint_index_eval(_embed_fn(params), data, "val")
        run_log.evals.append({"run_id": cfg.run_id, "seed": seed, "step": step,
                              "split": "val", "report": report})

    _run_loop(params, data, cfg, seed, cfg.steps, flags, run_log, "train", eval_fn=eval_fn)
    return TrainResult(params, run_log, cfg, seed, phase_steps={"train": cfg.steps})


def _teacher_model_config(cfg: ExperimentConfig, classes: list[int],
                          input_dim: int) -> M.ModelConfig:
    mc = cfg.model_config(classes, input_dim)
    mc.with_teachers = True
    mc.with_student = False
    mc.mlp_baseline_heads = False
    return mc


def train_offline_distill(cfg: ExperimentConfig, seed: int,
                          data: Dataset | None = None) -> TrainResult:
    """Two-phase distillation from teachers with their own frozen backbones.

    Phase 1 trains the teacher(s) with classification only: one model per
    domain (``offline_distill_8``) or one backbone with a head per domain
    (``offline_distill_1``). Phase 2 trains a fresh student with its own
    classification loss plus relational distillation to the frozen teacher
    embeddings.
    """
    cfg.validate()
    if cfg.mode not in ("offline_distill_8", "offline_distill_1"):
        raise ag.ContractError(f"offline distillation needs an offline mode, got {cfg.mode}")
    data = data if data is not None else load_data(cfg)
    run_log = RunLog()
    n = data.num_domains
    teacher_budget = cfg.teacher_steps or cfg.steps
    cls_only = LossFlags(no_logit_distill=True, no_any_distill=True)

    teachers: list[M.ModelParams] = []
    if cfg.mode == "offline_distill_1":
        tp = M.init_params(_teacher_model_config(cfg, data.classes_per_domain,
                                                 data.feature_dim), seed + 1000)
        _run_loop(tp, data, cfg, seed + 1000, teacher_budget, cls_only, run_log, "teacher",
                  loss_source="teacher_cls")
        teachers.append(tp)
        frozen = [_embed_fn(tp, "teacher")] * n
        teacher_of = list(range(n))
    else:
        per = max(1, teacher_budget // n)
        frozen, teacher_of = [], []
        for d in range(n):
            tp = M.init_params(_teacher_model_config(cfg, [data.classes_per_domain[d]],
                                                     data.feature_dim), seed + 1000 + d)
            _run_loop(tp, data, cfg, seed + 1000 + d, per, cls_only, run_log,
                      f"teacher{d}", domains=[d], loss_source="teacher_cls")
            teachers.append(tp)
            frozen.append(_embed_fn(tp, "teacher"))
            teacher_of.append(0)

    def frozen_teacher(x, domain):
        return ag.constant(frozen[domain](x, teacher_of[domain]))

    student_cfg = dataclasses.replace(cfg, mode="baseline_cls_only")
    params = M.init_params(student_cfg.model_config(data.classes_per_domain, data.feature_dim),
                           seed)
    rel_only = LossFlags(no_logit_distill=True, no_student_ce=cfg.no_student_ce)
    source = "student_cls"
    _run_loop(params, data, cfg, seed, cfg.steps, rel_only, run_log, "student",
              frozen_teacher=frozen_teacher, loss_source=source)
    phases = {"teacher": teacher_budget, "student": cfg.steps}
    return TrainResult(params, run_log, cfg, seed, teachers, phases)


# ---------------------------------------------------------------------------
# evaluation entry points


def teacher_embed_fn(result: TrainResult):
    """Per-domain teacher embeddings for separate-index evaluation."""
    if result.config.mode == "udon":
        fn = _embed_fn(result.params, "teacher")
        return fn
    if result.config.mode == "offline_distill_1":
        return _embed_fn(result.teachers[0], "teacher")
    if result.config.mode == "offline_distill_8":
        fns = [_embed_fn(t, "teacher") for t in result.teachers]
        return lambda features, domain: fns[domain](features, 0)
    raise ag.ContractError(f"mode {result.config.mode} has no teacher embeddings")


def evaluate_params(params: M.ModelParams, data: Dataset, split: str = "test",
                    mode: str = "joint", embedding: str = "student",
                    teacher_fn=None) -> MetricsReport:
    cfg = params.config
    if data.feature_dim != cfg.input_dim or list(data.classes_per_domain) != list(
            cfg.classes_per_domain):
        raise ag.ContractError(
            f"checkpoint expects {cfg.input_dim}-D features and classes "
            f"{cfg.classes_per_domain}; dataset has {data.feature_dim}-D and "
            f"{list(data.classes_per_domain)}")
    if embedding == "student":
        fn = _embed_fn(params, "student")
    elif embedding == "teacher":
        if mode != "separate":
            raise ag.ContractError("teacher embeddings are per-domain; use mode=separate")
        fn = teacher_fn or _embed_fn(params, "teacher")
    else:
        raise ag.ContractError(f"embedding must be student or teacher, got {embedding!r}")
    if mode == "joint":
        return joint_index_eval(fn, data, split)
    if mode == "separate":
        return separate_index_eval(fn, data, split)
    raise ag.ContractError(f"mode must be joint or separate, got {mode!r}")


def write_report(report: MetricsReport, out_dir, run_id: str, seed, step, split,
                 stem: str = "metrics", timestamp: bool = True) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_dir / f"{stem}.csv", report.rows(run_id, seed, step, split))
    write_summary_json(out_dir / f"{stem}.json", report, timestamp=timestamp)


# ---------------------------------------------------------------------------
# ablation grid

# Named cells and the config overrides that define them. The first nine follow
# the ablation table rows in order; the rest are the extra baselines.
ABLATION_CELLS: dict[str, dict] = {
    "uscrr": dict(mode="baseline_cls_only", sampler="round_robin", loss_source="student_cls"),
    "cls_only_dyn": dict(mode="baseline_cls_only", loss_source="student_cls"),
    "full": {},
    "no_dyn_sampler_rr": dict(sampler="round_robin"),
    "teachers_64d": dict(teacher_dim=64),
    "no_logit_distill": dict(no_logit_distill=True),
    "no_any_distill": dict(no_logit_distill=True, no_any_distill=True),
    "no_student_ce": dict(no_student_ce=True),
    "dyn_sampler_on_univ": dict(loss_source="student_cls"),
    "mlp_baseline_dyn": dict(mode="baseline_cls_only", loss_source="student_cls",
                             mlp_baseline_heads=True),
    "offline_distill_1": dict(mode="offline_distill_1"),
    "offline_distill_8": dict(mode="offline_distill_8"),
}

ABLATION_HEADER = ["cell", "seed", "domain", "metric", "value"]


@dataclass
class CellFailure:
    cell: str
    seed: int
    kind: str  # "divergence" or "error"
    message: str


@dataclass
class AblationResult:
    rows: list[list] = field(default_factory=list)
    reports: dict[tuple[str, int], MetricsReport] = field(default_factory=dict)
    failures: list[CellFailure] = field(default_factory=list)

    def mean_of(self, cell: str, domain="mean", metric: str = "R@1") -> float:
        for r in self.rows:
            if r[0] == cell and r[1] == "mean" and r[2] == domain and r[3] == metric:
                return r[4]
        raise KeyError((cell, domain, metric))


def cell_config(base: ExperimentConfig, overrides) -> ExperimentConfig:
    """Resolve one cell; ``overrides`` is a dict of fields or a full config."""
    if isinstance(overrides, ExperimentConfig):
        cfg = dataclasses.replace(overrides, run_id=base.run_id)
    else:
        cfg = dataclasses.replace(base, **overrides)
    if cfg.mode == "baseline_cls_only" and cfg.sampler == "dynamic":
        cfg.loss_source = "student_cls"
    cfg.validate()
    return cfg


def _run_cell(cfg: ExperimentConfig, seed: int, data: Dataset, split: str) -> MetricsReport:
    result = train(cfg, seed, data)
    return evaluate_params(result.params, data, split)


def ablate(base: ExperimentConfig, cells: dict[str, dict] | list[str],
           seeds: list[int] | None = None, data: Dataset | None = None,
           split: str = "test", on_cell=None) -> AblationResult:
    """Run every cell for every seed and collect one consolidated table.

    ``cells`` maps cell names to config overrides (or complete configs); a
    list of names picks from :data:`ABLATION_CELLS`. A failing run is recorded and the grid goes on.
    """
    if not isinstance(cells, dict):
        unknown = [c for c in cells if c not in ABLATION_CELLS]
        if unknown:
            raise ag.ContractError(f"unknown ablation cell(s): {unknown}")
        cells = {c: ABLATION_CELLS[c] for c in cells}
    seeds = list(base.seeds if seeds is None else seeds)
    data = data if data is not None else load_data(base)
    out = AblationResult()
    for name, overrides in cells.items():
        per_seed: list[MetricsReport] = []
        for seed in seeds:
            try:
                cfg = cell_config(dataclasses.replace(base, run_id=name), overrides)
                report = _run_cell(cfg, seed, data, split)
            except DivergenceError as exc:
                out.failures.append(CellFailure(name, seed, "divergence", str(exc)))
                log.warning("cell %s seed %d diverged: %s", name, seed, exc)
                continue
            except (ValueError, RuntimeError) as exc:
                out.failures.append(CellFailure(name, seed, "error", str(exc)))
                log.warning("cell %s seed %d failed: %s", name, seed, exc)
                continue
            out.reports[(name, seed)] = report
            per_seed.append(report)
            for r in report.rows():
                out.rows.append([name, seed, r[4], r[5], r[6]])
            if on_cell is not None:
                on_cell(name, seed, report)
        if per_seed:
            keys = [(d, m) for d in sorted(per_seed[0].per_domain) for m in ("R@1", "mP@5")]
            keys += [("mean", m) for m in ("R@1", "mP@5")]
            for d, m in keys:
                vals = [rep.mean[m] if d == "mean" else rep.per_domain[d][m]
                        for rep in per_seed if d == "mean" or d in rep.per_domain]
                out.rows.append([name, "mean", d, m, float(np.mean(vals))])
    return out


def write_ablation(result: AblationResult, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        for r in result.rows:
            w.writerow([*r[:4], repr(float(r[4]))])
    if result.failures:
        with open(out_dir / "failures.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", "seed", "kind", "message"])
            for f in result.failures:
                w.writerow([f.cell, f.seed, f.kind, f.message])
