"""Exact nearest-neighbour retrieval metrics over joint or per-domain indexes.

Distances between unit vectors are taken as ``2 - 2 * cos``, which orders
neighbours exactly as Euclidean distance does. Ties go to the lower id.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autograd import ContractError
from .datagen import Dataset

log = logging.getLogger(__name__)

DEFAULT_K = 5


@dataclass
class EmbeddingIndex:
    vectors: np.ndarray
    domains: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.vectors) == len(self.domains) == len(self.labels)):
            raise ContractError("index arrays have different lengths")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

    def subset(self, mask: np.ndarray) -> tuple["EmbeddingIndex", np.ndarray]:
        ids = np.flatnonzero(mask)
        return EmbeddingIndex(self.vectors[ids], self.domains[ids], self.labels[ids]), ids


def distances(index: EmbeddingIndex, queries: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    return 2.0 - 2.0 * (q @ index.vectors.T)


def _rank(dist: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps ascending id among equal distances
    return np.argsort(dist, axis=-1, kind="stable")[..., :k]


def knn_search(index: EmbeddingIndex, query, k: int) -> np.ndarray:
    if len(index) == 0:
        raise ContractError("cannot search an empty index")
    if k < 1:
        raise ContractError("k must be >= 1")
    return _rank(distances(index, query)[0], k)


def knn_search_batch(index: EmbeddingIndex, queries, k: int) -> np.ndarray:
    if len(index) == 0:
        raise ContractError("cannot search an empty index")
    return _rank(distances(index, queries), k)


def recall_at_1(ranked, query_label: tuple[int, int], index: EmbeddingIndex) -> int:
    top = int(ranked[0])
    return int(index.domains[top] == query_label[0] and index.labels[top] == query_label[1])


def count_positives(index: EmbeddingIndex, query_label: tuple[int, int]) -> int:
    return int(np.sum((index.domains == query_label[0]) & (index.labels == query_label[1])))


def modified_mp_at_k(ranked, query_label: tuple[int, int], index: EmbeddingIndex,
                     k: int = DEFAULT_K) -> float | None:
    """Precision over the top min(k, #positives) neighbours; None without positives."""
    n_pos = count_positives(index, query_label)
    if n_pos == 0:
        return None
    kk = min(k, n_pos)
    top = np.asarray(ranked[:kk])
    hits = np.sum((index.domains[top] == query_label[0]) & (index.labels[top] == query_label[1]))
    return float(hits) / kk


@dataclass
class MetricsReport:
    per_domain: dict[int, dict[str, float]]
    mean: dict[str, float]
    num_queries: dict[int, int]
    metadata: dict[str, str] = field(default_factory=dict)

    def rows(self, run_id: str = "", seed: int | str = "", step: int | str = "",
             split: str = "") -> list[list]:
        out = []
        for d in sorted(self.per_domain):
            for metric in ("R@1", "mP@5"):
                out.append([run_id, seed, step, split, d, metric, self.per_domain[d][metric]])
        for metric in ("R@1", "mP@5"):
            out.append([run_id, seed, step, split, "mean", metric, self.mean[metric]])
        return out

    def summary(self) -> dict:
        """Table-style layout, values scaled by 100."""
        return {
            "domains": {str(d): {m: 100.0 * v for m, v in vals.items()}
                        for d, vals in sorted(self.per_domain.items())},
            "mean": {m: 100.0 * v for m, v in self.mean.items()},
            "num_queries": {str(d): n for d, n in sorted(self.num_queries.items())},
            "metadata": dict(self.metadata),
        }


def score_queries(index: EmbeddingIndex, queries: np.ndarray, q_domains, q_labels,
                  k: int = DEFAULT_K, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Per-query R@1 (0/1) and modified mP@k (NaN when the class has no positives)."""
    q_domains = np.asarray(q_domains, dtype=np.int64)
    q_labels = np.asarray(q_labels, dtype=np.int64)
    n = len(queries)
    r1 = np.zeros(n)
    mp = np.full(n, np.nan)
    if n == 0:
        return r1, mp
    if len(index) == 0:
        raise ContractError("cannot search an empty index")
    width = max(int(index.labels.max(initial=0)), int(q_labels.max(initial=0))) + 1
    keys = index.domains * width + index.labels
    uniq, counts = np.unique(keys, return_counts=True)
    kk = min(k, len(index))
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        ranked = knn_search_batch(index, queries[sl], kk)
        qk = q_domains[sl] * width + q_labels[sl]
        hit = (index.domains[ranked] == q_domains[sl, None]) & \
              (index.labels[ranked] == q_labels[sl, None])
        r1[sl] = hit[:, 0]
        pos = np.searchsorted(uniq, qk)
        pos_ok = (pos < uniq.size) & (uniq[np.minimum(pos, uniq.size - 1)] == qk)
        n_pos = np.where(pos_ok, counts[np.minimum(pos, uniq.size - 1)], 0)
        kprime = np.minimum(k, n_pos)
        cols = np.arange(kk)[None, :]
        hits = np.sum(hit & (cols < kprime[:, None]), axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mp[sl] = np.where(n_pos > 0, hits / np.maximum(kprime, 1), np.nan)
    return r1, mp


def aggregate(q_domains, r1, mp, domains: list[int]) -> MetricsReport:
    per_domain, num_queries = {}, {}
    q_domains = np.asarray(q_domains)
    for d in domains:
        sel = q_domains == d
        valid = sel & ~np.isnan(mp)
        if not np.any(valid):
            log.warning("domain %d has no scorable queries; omitted from the mean", d)
            continue
        # only queries with at least one positive are scored
        per_domain[d] = {"R@1": float(np.mean(r1[valid])), "mP@5": float(np.mean(mp[valid]))}
        num_queries[d] = int(valid.sum())
    if per_domain:
        mean = {m: float(np.mean([v[m] for v in per_domain.values()])) for m in ("R@1", "mP@5")}
    else:
        mean = {"R@1": float("nan"), "mP@5": float("nan")}
    return MetricsReport(per_domain, mean, num_queries)


EmbedFn = Callable[[np.ndarray, int | None], np.ndarray]


def _split_names(split: str) -> tuple[str, str]:
    if split not in ("val", "test"):
        raise ContractError(f"split must be 'val' or 'test', got {split!r}")
    return f"{split}_query", f"{split}_index"


def joint_index_eval(embed_fn: EmbedFn, dataset: Dataset, split: str,
                     k: int = DEFAULT_K) -> MetricsReport:
    """Every query searches one index pooling all domains.

    ``embed_fn(features, domain)`` returns unit-norm embeddings; ``domain`` is
    None for the joint index.
    """
    qn, xn = _split_names(split)
    qi, xi = dataset.indices(qn), dataset.indices(xn)
    index = EmbeddingIndex(embed_fn(dataset.features[xi], None),
                           dataset.domain[xi], dataset.label[xi])
    queries = embed_fn(dataset.features[qi], None)
    r1, mp = score_queries(index, queries, dataset.domain[qi], dataset.label[qi], k)
    return aggregate(dataset.domain[qi], r1, mp, list(range(dataset.num_domains)))


def separate_index_eval(embed_fn: EmbedFn, dataset: Dataset, split: str,
                        k: int = DEFAULT_K) -> MetricsReport:
    """Each query searches only its own domain's index; embeddings may be per-domain."""
    qn, xn = _split_names(split)
    all_q, all_r1, all_mp = [], [], []
    for d in range(dataset.num_domains):
        qi, xi = dataset.indices(qn, d), dataset.indices(xn, d)
        if len(qi) == 0:
            continue
        index = EmbeddingIndex(embed_fn(dataset.features[xi], d),
                               dataset.domain[xi], dataset.label[xi])
        r1, mp = score_queries(index, embed_fn(dataset.features[qi], d),
                               dataset.domain[qi], dataset.label[qi], k)
        all_q.append(dataset.domain[qi])
        all_r1.append(r1)
        all_mp.append(mp)
    if not all_q:
        return aggregate(np.zeros(0), np.zeros(0), np.zeros(0), list(range(dataset.num_domains)))
    return aggregate(np.concatenate(all_q), np.concatenate(all_r1), np.concatenate(all_mp),
                     list(range(dataset.num_domains)))


CSV_HEADER = ["run_id", "seed", "step", "split", "domain", "metric", "value"]


def write_metrics_csv(path, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([*r[:-1], repr(float(r[-1]))])


def write_summary_json(path, report: MetricsReport, timestamp: bool = True) -> None:
    payload = report.summary()
    if timestamp:
        payload["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
