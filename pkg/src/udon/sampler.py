"""Domain selection for clean single-domain batches."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError
from .datagen import Dataset

SAMPLER_KINDS = ("round_robin", "dataset_size", "static_weights", "dynamic")
LOSS_SOURCES = ("teacher_cls", "student_cls")


@dataclass
class SamplerState:
    kind: str
    num_domains: int
    probabilities: np.ndarray
    refresh_period: int = 50
    loss_source: str = "teacher_cls"
    min_prob: float = 0.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    window_sum: np.ndarray = None
    window_count: np.ndarray = None
    last_mean: np.ndarray = None
    steps_since_refresh: int = 0
    draws: int = 0

    def __post_init__(self):
        n = self.num_domains
        if self.window_sum is None:
            self.window_sum = np.zeros(n)
        if self.window_count is None:
            self.window_count = np.zeros(n, dtype=np.int64)
        if self.last_mean is None:
            self.last_mean = np.ones(n)

    def window_means(self) -> np.ndarray:
        """Mean loss per domain over the current window (NaN when empty)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.window_count > 0,
                            self.window_sum / np.maximum(self.window_count, 1), np.nan)


def _normalize(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or np.any(~np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
        raise ContractError(f"weights must be finite, non-negative, not all zero: {w}")
    return w / w.sum()


def make_sampler(kind: str, num_domains: int, seed: int, *, refresh_period: int = 50,
                 loss_source: str = "teacher_cls", weights=None,
                 dataset: Dataset | None = None, min_prob: float = 0.0) -> SamplerState:
    if kind not in SAMPLER_KINDS:
        raise ContractError(f"sampler kind must be one of {SAMPLER_KINDS}, got {kind!r}")
    if loss_source not in LOSS_SOURCES:
        raise ContractError(f"loss_source must be one of {LOSS_SOURCES}")
    if refresh_period < 1:
        raise ContractError("refresh period must be >= 1")
    if not 0.0 <= min_prob * num_domains <= 1.0:
        raise ContractError("min_prob * num_domains must lie in [0, 1]")
    if kind == "dataset_size":
        if dataset is None:
            raise ContractError("dataset_size sampling needs the dataset")
        sizes = [len(dataset.indices("train", d)) for d in range(num_domains)]
        p = _normalize(sizes)
    elif kind == "static_weights":
        if weights is None or len(weights) != num_domains:
            raise ContractError("static_weights needs one weight per domain")
        p = _normalize(weights)
    else:
        p = np.full(num_domains, 1.0 / num_domains)
    return SamplerState(kind, num_domains, p, refresh_period, loss_source, min_prob,
                        np.random.default_rng([seed, 0x5A3]))


def record_loss(state: SamplerState, domain: int, loss_value: float) -> None:
    if not math.isfinite(loss_value) or loss_value < 0:
        raise ContractError(f"sampler received an invalid loss {loss_value!r} "
                            f"for domain {domain}")
    state.window_sum[domain] += loss_value
    state.window_count[domain] += 1


def refresh_probabilities(state: SamplerState) -> np.ndarray:
    """Set P(m) proportional to each domain's mean window loss and reset windows.

    Domains without records in this window reuse their previous mean. Before
    any refresh every previous mean is 1, i.e. uniform.
    """
    means = state.window_means()
    seen = state.window_count > 0
    state.last_mean = np.where(seen, means, state.last_mean)
    total = state.last_mean.sum()
    if total > 0:
        p = state.last_mean / total
    else:
        p = np.full(state.num_domains, 1.0 / state.num_domains)
    if state.min_prob > 0:
        # floor then rescale the remaining mass
        free = 1.0 - state.min_prob * state.num_domains
        p = state.min_prob + free * p
    state.probabilities = p
    state.window_sum = np.zeros(state.num_domains)
    state.window_count = np.zeros(state.num_domains, dtype=np.int64)
    state.steps_since_refresh = 0
    return p


def step(state: SamplerState) -> bool:
    """Advance the step counter; refresh the dynamic sampler when due.

    Returns True when a refresh happened.
    """
    state.steps_since_refresh += 1
    if state.kind == "dynamic" and state.steps_since_refresh >= state.refresh_period:
        refresh_probabilities(state)
        return True
    return False


def next_domain(state: SamplerState) -> int:
    if state.kind == "round_robin":
        d = state.draws % state.num_domains
    else:
        cdf = np.cumsum(state.probabilities)
        u = state.rng.random() * cdf[-1]
        d = int(np.searchsorted(cdf, u, side="right"))
        d = min(d, state.num_domains - 1)
        # never land on a zero-probability domain through rounding at the edge
        while state.probabilities[d] == 0:
            d -= 1
    state.draws += 1
    return d


def make_batch(dataset: Dataset, domain: int, batch_size: int, rng: np.random.Generator,
               class_balanced: bool = False, pool: np.ndarray | None = None) -> np.ndarray:
    """Row indices of ``batch_size`` train examples of one domain, with replacement."""
    if pool is None:
        pool = dataset.indices("train", domain)
    if pool.size == 0:
        raise ContractError(f"domain {domain} has no training examples")
    if not class_balanced:
        return pool[rng.integers(0, pool.size, size=batch_size)]
    labels = dataset.label[pool]
    classes = np.unique(labels)
    picked = classes[rng.integers(0, classes.size, size=batch_size)]
    out = np.empty(batch_size, dtype=np.int64)
    for k, c in enumerate(picked):
        members = pool[labels == c]
        out[k] = members[rng.integers(0, members.size)]
    return out


class SamplerTrace:
    """Rows of (step, domain, P...) written after each refresh."""

    def __init__(self, num_domains: int):
        self.num_domains = num_domains
        self.rows: list[list] = []

    def add(self, step: int, domain: int, probabilities) -> None:
        self.rows.append([step, domain, *[float(p) for p in probabilities]])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "domain", *[f"P{m}" for m in range(self.num_domains)]])
            for row in self.rows:
                w.writerow([row[0], row[1], *[repr(p) for p in row[2:]]])
