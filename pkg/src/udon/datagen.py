"""Synthetic multi-domain retrieval data and the on-disk dataset format.

Each feature vector is laid out as ``[shared | cue | domain]``:

* ``shared`` carries class signal for every domain, in the same coordinates,
  so classes of different domains collide there;
* ``cue`` carries class signal only for ``cue_discriminative`` domains and
  high-variance, class-independent noise for ``cue_noise`` domains;
* ``domain`` holds a per-domain offset, a per-domain class subspace and a
  per-domain nuisance subspace.

A single fixed linear view therefore cannot be right for every domain: the
cue block must be used in some domains and suppressed in others.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"UDONDS1\n"
VERSION = 1

SPLITS = ("train", "val_query", "val_index", "test_query", "test_index")
SPLIT_CODE = {name: code for code, name in enumerate(SPLITS)}
CUE_MODES = ("cue_discriminative", "cue_noise")

DEFAULT_SPLIT_FRACTIONS = (0.70, 0.05, 0.10, 0.05, 0.10)


class GenerationError(ValueError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    num_classes: int
    class_size_exponent: float = 0.0
    samples_per_class_base: int = 50
    cue_mode: str = "cue_discriminative"
    noise_sigma: float = 0.1

    def __post_init__(self):
        if self.num_classes < 2:
            raise GenerationError(f"domain {self.domain_id}: need at least 2 classes")
        if self.class_size_exponent < 0:
            raise GenerationError(f"domain {self.domain_id}: exponent must be >= 0")
        if self.samples_per_class_base < 1:
            raise GenerationError(f"domain {self.domain_id}: base must be >= 1")
        if self.cue_mode not in CUE_MODES:
            raise GenerationError(f"domain {self.domain_id}: unknown cue_mode {self.cue_mode!r}")
        if self.noise_sigma < 0:
            raise GenerationError(f"domain {self.domain_id}: noise_sigma must be >= 0")


@dataclass(frozen=True)
class Layout:
    """Block sizes and signal magnitudes of the synthetic feature space."""

    shared_dims: int = 8
    cue_dims: int = 8
    class_dims: int = 8
    nuisance_dims: int = 16
    class_scale: float = 1.0
    domain_offset: float = 1.0
    nuisance_gain: float = 3.0


@dataclass
class Dataset:
    feature_dim: int
    classes_per_domain: list[int]
    domain: np.ndarray  # uint16
    label: np.ndarray  # uint32
    split: np.ndarray  # uint8, index into SPLITS
    features: np.ndarray  # float32, (M, feature_dim)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.domain = np.ascontiguousarray(self.domain, dtype=np.uint16)
        self.label = np.ascontiguousarray(self.label, dtype=np.uint32)
        self.split = np.ascontiguousarray(self.split, dtype=np.uint8)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32).reshape(
            -1, self.feature_dim)

    @property
    def num_domains(self) -> int:
        return len(self.classes_per_domain)

    def __len__(self) -> int:
        return int(self.domain.shape[0])

    def indices(self, split: str, domain: int | None = None) -> np.ndarray:
        mask = self.split == SPLIT_CODE[split]
        if domain is not None:
            mask &= self.domain == domain
        return np.flatnonzero(mask)

    def validate(self) -> None:
        """Raise ``ValueError`` if a dataset invariant is broken."""
        n = len(self)
        if not (self.label.shape[0] == self.split.shape[0] == self.features.shape[0] == n):
            raise ValueError("per-example arrays have different lengths")
        if n and int(self.domain.max()) >= self.num_domains:
            raise ValueError("domain id out of range")
        limits = np.asarray(self.classes_per_domain, dtype=np.int64)
        if n and np.any(self.label.astype(np.int64) >= limits[self.domain]):
            bad = int(np.flatnonzero(self.label.astype(np.int64) >= limits[self.domain])[0])
            raise ValueError(f"example {bad}: class id exceeds its domain's class count")
        if n and int(self.split.max()) >= len(SPLITS):
            raise ValueError("unknown split tag")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")
        for q, idx in (("val_query", "val_index"), ("test_query", "test_index")):
            have = set(zip(self.domain[self.indices(idx)].tolist(),
                           self.label[self.indices(idx)].tolist()))
            for d, c in zip(self.domain[self.indices(q)].tolist(),
                            self.label[self.indices(q)].tolist()):
                if (d, c) not in have:
                    raise ValueError(f"{q} class (domain {d}, class {c}) missing from {idx}")

    def equals(self, other: "Dataset") -> bool:
        return (self.feature_dim == other.feature_dim
                and list(self.classes_per_domain) == list(other.classes_per_domain)
                and np.array_equal(self.domain, other.domain)
                and np.array_equal(self.label, other.label)
                and np.array_equal(self.split, other.split)
                and self.features.tobytes() == other.features.tobytes())


def zipf_class_sizes(num_classes: int, exponent: float, base: int) -> list[int]:
    if num_classes < 1 or base < 1:
        raise GenerationError("num_classes and base must be >= 1")
    ranks = np.arange(1, num_classes + 1, dtype=np.float64)
    sizes = np.maximum(1, np.round(base * ranks ** (-float(exponent)))).astype(int)
    return sizes.tolist()


def _apportion(n: int, fractions: np.ndarray) -> np.ndarray:
    """Largest-remainder split of n items; ties go to the earlier split."""
    raw = n * fractions
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = sorted(range(len(fractions)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[:rest]:
        counts[k] += 1
    return counts


def split_counts(n: int, fractions, where: str = "class") -> np.ndarray:
    """Per-split example counts for one class of ``n`` examples.

    Every class with a positive train fraction keeps at least one training
    example. A query split is only populated when its index split is too;
    otherwise its examples move to the index split.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    counts = _apportion(n, fr)
    if fr[0] > 0 and counts[0] == 0:
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[0] += 1
    for q, i in ((1, 2), (3, 4)):
        if counts[q] > 0 and counts[i] == 0:
            if counts[q] >= 2:
                counts[q] -= 1
                counts[i] += 1
            elif counts[0] >= 2:
                counts[0] -= 1
                counts[i] += 1
            else:
                raise GenerationError(
                    f"{where}: {n} example(s) cannot cover "
                    f"{SPLITS[q]} together with {SPLITS[i]}")
    if fr[0] == 0 and n < 2:
        raise GenerationError(f"{where}: a single example cannot fill a query and an index split")
    return counts


def _check_fractions(fractions) -> np.ndarray:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (len(SPLITS),) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise GenerationError(f"split fractions must be {len(SPLITS)} non-negative values "
                              f"summing to 1, got {list(fractions)}")
    return fr


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q[:, :cols]


def _generate_domain(spec: DomainSpec, feature_dim: int, layout: Layout,
                     fractions: np.ndarray, seed: int):
    rng = np.random.default_rng([seed, spec.domain_id])
    s, c = layout.shared_dims, layout.cue_dims
    rest = feature_dim - s - c
    basis = _orthonormal(rng, rest, layout.class_dims + layout.nuisance_dims)
    class_basis = basis[:, :layout.class_dims]
    nuisance_basis = basis[:, layout.class_dims:]
    offset = rng.standard_normal(rest)
    offset *= layout.domain_offset / np.linalg.norm(offset)

    k = spec.num_classes
    scale = layout.class_scale
    centers = np.zeros((k, feature_dim))
    centers[:, :s] = rng.standard_normal((k, s)) * scale / np.sqrt(s)
    if spec.cue_mode == "cue_discriminative":
        centers[:, s:s + c] = rng.standard_normal((k, c)) * scale / np.sqrt(c)
    centers[:, s + c:] = (rng.standard_normal((k, layout.class_dims)) * scale
                          / np.sqrt(layout.class_dims)) @ class_basis.T + offset

    sizes = zipf_class_sizes(k, spec.class_size_exponent, spec.samples_per_class_base)
    sigma = spec.noise_sigma
    loud = layout.nuisance_gain * sigma
    feats, labels, splits = [], [], []
    for cls, n in enumerate(sizes):
        counts = split_counts(n, fractions, where=f"domain {spec.domain_id} class {cls}")
        x = np.repeat(centers[cls:cls + 1], n, axis=0)
        x += sigma * rng.standard_normal((n, feature_dim))
        x[:, s + c:] += (loud * rng.standard_normal((n, layout.nuisance_dims))) @ nuisance_basis.T
        if spec.cue_mode == "cue_noise":
            x[:, s:s + c] += loud * rng.standard_normal((n, c))
        tags = np.repeat(np.arange(len(SPLITS)), counts)
        feats.append(x)
        labels.append(np.full(n, cls))
        splits.append(rng.permutation(tags))
    return (np.concatenate(feats), np.concatenate(labels), np.concatenate(splits))


def generate_multidomain(specs: list[DomainSpec], feature_dim: int,
                         split_fractions=DEFAULT_SPLIT_FRACTIONS, seed: int = 0,
                         layout: Layout | None = None) -> Dataset:
    """Build a :class:`Dataset`; a pure function of its arguments.

    Each domain draws from its own RNG stream keyed by ``(seed, domain_id)``,
    so domains can be generated in any order with identical results.
    """
    layout = layout or Layout()
    fr = _check_fractions(split_fractions)
    ids = [sp.domain_id for sp in specs]
    if ids != list(range(len(specs))):
        raise GenerationError(f"domain ids must be 0..N-1 in order, got {ids}")
    if feature_dim < 2 * (layout.shared_dims + layout.cue_dims):
        raise GenerationError("feature_dim must be at least twice the shared+cue dims")
    if feature_dim - layout.shared_dims - layout.cue_dims < layout.class_dims + layout.nuisance_dims:
        raise GenerationError("domain block too small for class + nuisance subspaces")

    parts = [_generate_domain(sp, feature_dim, layout, fr, seed) for sp in specs]
    domain = np.concatenate([np.full(len(p[1]), sp.domain_id) for sp, p in zip(specs, parts)])
    features = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, feature_dim))
    label = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    split = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0)
    meta = {"generator": "udon.datagen", "seed": str(seed), "feature_dim": str(feature_dim),
            "split_fractions": ",".join(repr(float(f)) for f in fr)}
    for name, value in vars(layout).items():
        meta[f"layout.{name}"] = repr(value)
    for sp in specs:
        for name, value in vars(sp).items():
            if name != "domain_id":
                meta[f"domain.{sp.domain_id}.{name}"] = str(value)
    return Dataset(feature_dim, [sp.num_classes for sp in specs],
                   domain, label, split, features.astype(np.float32), meta)


# ---------------------------------------------------------------------------
# file format

_HEADER = struct.Struct("<III")
_DOMAIN = struct.Struct("<IQ")
_EXAMPLE_HEAD = np.dtype([("domain", "<u2"), ("label", "<u4"), ("split", "u1")])


def _example_dtype(feature_dim: int) -> np.dtype:
    return np.dtype([("domain", "<u2"), ("label", "<u4"), ("split", "u1"),
                     ("x", "<f4", (feature_dim,))])


def dumps_dataset(d: Dataset) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_HEADER.pack(VERSION, d.num_domains, d.feature_dim))
    per_domain = np.bincount(d.domain, minlength=d.num_domains)
    for c, n in zip(d.classes_per_domain, per_domain):
        out.write(_DOMAIN.pack(int(c), int(n)))
    rec = np.empty(len(d), dtype=_example_dtype(d.feature_dim))
    rec["domain"], rec["label"], rec["split"], rec["x"] = d.domain, d.label, d.split, d.features
    out.write(rec.tobytes())
    return out.getvalue()


def loads_dataset(buf: bytes) -> Dataset:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError("bad magic", 0)
    pos = len(MAGIC)
    if len(buf) < pos + _HEADER.size:
        raise DatasetFormatError("truncated header", len(buf))
    version, n_domains, feature_dim = _HEADER.unpack_from(buf, pos)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", pos)
    pos += _HEADER.size
    classes, counts = [], []
    for _ in range(n_domains):
        if len(buf) < pos + _DOMAIN.size:
            raise DatasetFormatError("truncated domain table", len(buf))
        c, n = _DOMAIN.unpack_from(buf, pos)
        classes.append(c)
        counts.append(n)
        pos += _DOMAIN.size
    dtype = _example_dtype(feature_dim)
    total = sum(counts)
    need = pos + total * dtype.itemsize
    if len(buf) < need:
        raise DatasetFormatError(f"truncated examples: expected {need} bytes, have {len(buf)}",
                                 len(buf))
    if len(buf) > need:
        raise DatasetFormatError("trailing bytes after last example", need)
    rec = np.frombuffer(buf, dtype=dtype, count=total, offset=pos)
    d = Dataset(feature_dim, classes, rec["domain"].copy(), rec["label"].copy(),
                rec["split"].copy(), rec["x"].copy())
    if not np.array_equal(np.bincount(d.domain, minlength=n_domains)[:n_domains], counts) \
            or (len(d) and int(d.domain.max()) >= n_domains):
        raise DatasetFormatError("per-domain example counts do not match records", pos)
    try:
        d.validate()
    except ValueError as exc:
        bad = _first_bad_record(d)
        raise DatasetFormatError(str(exc), pos + bad * dtype.itemsize) from None
    return d


def _first_bad_record(d: Dataset) -> int:
    limits = np.asarray(d.classes_per_domain, dtype=np.int64)
    bad = (d.label.astype(np.int64) >= limits[np.minimum(d.domain, len(limits) - 1)]) \
        | (d.split >= len(SPLITS)) | ~np.all(np.isfinite(d.features), axis=1)
    hits = np.flatnonzero(bad)
    return int(hits[0]) if hits.size else 0


def metadata_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def write_dataset(d: Dataset, path) -> None:
    path = Path(path)
    path.write_bytes(dumps_dataset(d))
    lines = [f"{k}={v}" for k, v in d.metadata.items()]
    metadata_path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_dataset(path) -> Dataset:
    path = Path(path)
    d = loads_dataset(path.read_bytes())
    meta = metadata_path(path)
    if meta.exists():
        for line in meta.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                d.metadata[k.strip()] = v.strip()
    return d
