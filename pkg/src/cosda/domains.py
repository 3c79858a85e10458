"""Synthetic labeled domains, domain sequences and dataset CSV files."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError

GENERATORS = ("two_moons", "gaussian_blobs", "csv")
PARADIGMS = ("inductive", "transductive")
SPLITS = ("train", "test", "all")


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    domain_name: str
    split: str = "all"
    n_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        self.validate()

    def validate(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"dataset {self.domain_name!r} needs a nonempty [N x D] feature matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(f"dataset {self.domain_name!r}: {self.labels.size} labels "
                            f"for {self.features.shape[0]} rows")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError(f"dataset {self.domain_name!r}: labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"dataset {self.domain_name!r} has non-finite features")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, split: str) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.domain_name, split, self.n_classes)


@dataclass
class Domain:
    """One domain with its train and test views."""
    name: str
    train: LabeledDataset
    test: LabeledDataset
    full: LabeledDataset


# ------------------------------------------------------------- generators

def rotate(features, degrees: float) -> np.ndarray:
    """Rotate 2-D points about the origin."""
    r = math.radians(degrees)
    c, s = math.cos(r), math.sin(r)
    rot = np.array([[c, s], [-s, c]])  # row vectors: x @ rot
    return np.asarray(features, dtype=np.float64) @ rot


def gen_two_moons(n: int, noise_sigma: float, rotation_deg: float, seed: int,
                  domain_name: str | None = None) -> LabeledDataset:
    """Two interleaved half circles, Gaussian jitter, then rotation about the origin."""
    if n < 2:
        raise ConfigError("two moons needs n >= 2")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    n_inner = n // 2
    n_outer = n - n_inner
    t_out = rng.uniform(0.0, math.pi, n_outer)
    t_in = rng.uniform(0.0, math.pi, n_inner)
    outer = np.column_stack([np.cos(t_out), np.sin(t_out)])
    inner = np.column_stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)])
    x = np.vstack([outer, inner])
    y = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    x = x + noise_sigma * rng.standard_normal(x.shape)
    order = rng.permutation(n)
    x, y = rotate(x[order], rotation_deg), y[order]
    name = domain_name if domain_name is not None else f"moons_{rotation_deg:g}deg"
    return LabeledDataset(x, y, name, "all", 2)


def gen_gaussian_blobs(n: int, n_classes: int, centers, cov_scale: float, seed: int,
                       domain_name: str = "blobs") -> LabeledDataset:
    """Isotropic Gaussian per class; ``cov_scale`` is the per-axis standard deviation."""
    centers = np.asarray(centers, dtype=np.float64)
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    if centers.ndim != 2 or centers.shape[0] != n_classes:
        raise ConfigError(f"need one center per class: {n_classes} classes, centers {centers.shape}")
    if cov_scale < 0:
        raise ConfigError("cov_scale must be nonnegative")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % n_classes
    rng.shuffle(y)
    x = centers[y] + cov_scale * rng.standard_normal((n, centers.shape[1]))
    return LabeledDataset(x, y, domain_name, "all", n_classes)


# -------------------------------------------------------------- sequences

@dataclass
class DomainSequenceSpec:
    generator: str = "two_moons"
    # rotation degrees (two_moons), center shift vectors (gaussian_blobs) or
    # CSV paths (csv); the first entry is the source domain
    domain_params: list = field(default_factory=lambda: [0.0, 30.0, 60.0, 90.0])
    samples_per_domain: int = 2000
    noise: float = 0.1
    seed: int = 0
    paradigm: str = "inductive"
    test_fraction: float = 0.2
    n_classes: int = 2
    centers: list | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if len(self.domain_params) < 2:
            raise ConfigError("need a source and at least one target domain")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.generator == "gaussian_blobs" and self.centers is None:
            raise ConfigError("gaussian_blobs needs base centers")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSequenceSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sequence spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "DomainSequenceSpec":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"sequence spec not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        return cls.from_dict(data)


def stratified_split(ds: LabeledDataset, test_fraction: float, seed: int):
    """Per-class shuffled split; returns ``(train_idx, test_idx)``."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        rng.shuffle(idx)
        k = int(round(test_fraction * idx.size))
        test_idx.append(idx[:k])
        train_idx.append(idx[k:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))


def _generate(spec: DomainSequenceSpec, k: int, param) -> LabeledDataset:
    seed = spec.seed * 1009 + k
    if spec.generator == "two_moons":
        return gen_two_moons(spec.samples_per_domain, spec.noise, float(param), seed,
                             domain_name=f"moons_{float(param):g}deg")
    if spec.generator == "gaussian_blobs":
        centers = np.asarray(spec.centers, dtype=np.float64) + np.asarray(param, dtype=np.float64)
        return gen_gaussian_blobs(spec.samples_per_domain, spec.n_classes, centers, spec.noise,
                                  seed, domain_name=f"blobs_{k}")
    return load_dataset(param, n_classes=spec.n_classes)


def make_sequence(spec: DomainSequenceSpec) -> tuple[Domain, list[Domain]]:
    """Build the source domain and the ordered target domains."""
    spec.validate()
    domains = []
    for k, param in enumerate(spec.domain_params):
        full = _generate(spec, k, param)
        if spec.paradigm == "transductive":
            domains.append(Domain(full.domain_name, full, full, full))
        else:
            tr, te = stratified_split(full, spec.test_fraction, spec.seed * 7919 + k)
            domains.append(Domain(full.domain_name, full.subset(tr, "train"), full.subset(te, "test"), full))
    return domains[0], domains[1:]


# -------------------------------------------------------------------- CSV

def dataset_to_csv(ds: LabeledDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{k}" for k in range(ds.dim)] + ["label", "domain"])
    for row, lab in zip(ds.features, ds.labels):
        w.writerow([format(v, ".17g") for v in row] + [int(lab), ds.domain_name])
    return buf.getvalue()


def save_dataset(ds: LabeledDataset, path) -> None:
    from .model import _atomic_write_bytes

    _atomic_write_bytes(Path(path), dataset_to_csv(ds).encode())


def load_dataset(path, n_classes: int | None = None, split: str = "all") -> LabeledDataset:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise DataError(f"dataset file not found: {path}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 3 or header[-2:] != ["label", "domain"] \
            or header[:-2] != [f"f{k}" for k in range(len(header) - 2)]:
        raise ParseError(f"bad header {header!r}", line=1)
    d = len(header) - 2
    if len(rows) == 1:
        raise DataError(f"{path}: no data rows")
    feats = np.empty((len(rows) - 1, d))
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    domain = None
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != d + 2:
            raise ParseError(f"expected {d + 2} fields, got {len(row)}", line=line)
        try:
            feats[i] = [float(v) for v in row[:d]]
        except ValueError as exc:
            raise ParseError(f"non-numeric feature: {exc}", line=line) from None
        try:
            labels[i] = int(row[d])
        except ValueError:
            raise ParseError(f"non-integer label {row[d]!r}", line=line) from None
        if domain is None:
            domain = row[d + 1]
        elif row[d + 1] != domain:
            raise ParseError(f"mixed domain names {domain!r} and {row[d + 1]!r}", line=line)
        if not np.all(np.isfinite(feats[i])):
            raise ParseError("non-finite feature", line=line)
    if n_classes is not None and labels.max() >= n_classes:
        raise DataError(f"{path}: label {labels.max()} out of range for {n_classes} classes")
    return LabeledDataset(feats, labels, domain, split, n_classes)
