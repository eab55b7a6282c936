"""Synthetic federations with label-set mismatch.

Single-label task: M Gaussian clusters in d dimensions with well separated
centers; a sample's hidden class is its cluster id.  Multi-label task: each
class owns a random unit direction and a sample is positive for the class
when its projection onto that direction clears a quantile threshold, so
every class stays linearly separable with a controllable positivity rate.

Each client identifies s of the M classes.  Labels outside the identified
set are zeroed and flagged unknown; for the single-label task a sample
whose hidden class is not identified becomes fully unlabeled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, ParseError

COVERAGE_ATTEMPTS = 1000


@dataclass
class LabelRecord:
    """Per-sample label vector plus the per-class trust mask.

    values[c] is meaningful only where known_mask[c] is True; everywhere
    else it is zero by construction.
    """

    values: np.ndarray
    known_mask: np.ndarray


@dataclass
class Sample:
    x: np.ndarray
    label: LabelRecord
    # Full ground truth, for evaluation only. Training code must not read it.
    true_label: np.ndarray


@dataclass
class ClientSpec:
    client_id: int
    identified: tuple[int, ...]
    unknown: tuple[int, ...]
    n_samples: int


@dataclass
class AugmentConfig:
    """Vector perturbations standing in for image augmentation roles.

    Weak: additive Gaussian noise.  Strong: larger additive noise, then
    per-coordinate scaling in [1-scale_jitter, 1+scale_jitter], then
    coordinate dropout.  Defaults assume unit cluster spread.
    """

    sigma_weak: float = 0.02
    sigma_strong: float = 0.2
    scale_jitter: float = 0.1
    drop_prob: float = 0.05


@dataclass
class FederationConfig:
    n_clients: int = 5
    n_classes: int = 7
    classes_per_client: int = 3
    feature_dim: int = 16
    task: str = "single"  # "single" or "multi"
    samples_per_client: int = 500
    n_val: int = 500
    n_test: int = 1000
    cluster_sep: float = 4.0   # pairwise center distance, in cluster-std units
    cluster_std: float = 1.0
    positive_rate: float = 0.3  # multi-label per-class positive fraction
    seed: int = 0

    def validate(self, path: str = "federation") -> None:
        if self.n_clients < 2:
            raise ConfigError(f"{path}.n_clients: need >= 2, got {self.n_clients}")
        if self.n_classes < 2:
            raise ConfigError(f"{path}.n_classes: need >= 2, got {self.n_classes}")
        if not 1 <= self.classes_per_client <= self.n_classes:
            raise ConfigError(
                f"{path}.classes_per_client: need 1..{self.n_classes}, "
                f"got {self.classes_per_client}")
        if self.task not in ("single", "multi"):
            raise ConfigError(f"{path}.task: must be 'single' or 'multi', "
                              f"got {self.task!r}")
        if self.feature_dim < 1:
            raise ConfigError(f"{path}.feature_dim: need >= 1")
        if self.samples_per_client < 1:
            raise ConfigError(f"{path}.samples_per_client: need >= 1")
        if not 0.0 < self.positive_rate < 1.0:
            raise ConfigError(f"{path}.positive_rate: need (0, 1), "
                              f"got {self.positive_rate}")


@dataclass
class Federation:
    specs: list[ClientSpec]
    clients: list[list[Sample]]  # masked per the owning client's spec
    val: list[Sample]
    test: list[Sample]
    config: FederationConfig = None


def _class_directions(n_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal rows when dim allows; random unit rows otherwise."""
    if n_classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        return q[:, :n_classes].T.copy()
    vecs = rng.standard_normal((n_classes, dim))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def _sample_identified_sets(cfg: FederationConfig,
                            rng: np.random.Generator) -> list[tuple[int, ...]]:
    # Resample the whole assignment until every class is identified somewhere.
    if cfg.classes_per_client * cfg.n_clients < cfg.n_classes:
        raise ConfigError("class coverage unsatisfiable: "
                          f"{cfg.n_clients} clients x {cfg.classes_per_client} "
                          f"classes cannot cover {cfg.n_classes} classes")
    for _ in range(COVERAGE_ATTEMPTS):
        sets = [tuple(sorted(rng.choice(cfg.n_classes, cfg.classes_per_client,
                                        replace=False).tolist()))
                for _ in range(cfg.n_clients)]
        covered = set()
        for s in sets:
            covered.update(s)
        if len(covered) == cfg.n_classes:
            return sets
    raise ConfigError("class coverage unsatisfiable: resampling budget exhausted")


def _draw_single_label(n: int, centers: np.ndarray, cfg: FederationConfig,
                       rng: np.random.Generator) -> list[Sample]:
    m = cfg.n_classes
    classes = rng.integers(0, m, size=n)
    xs = centers[classes] + cfg.cluster_std * rng.standard_normal((n, cfg.feature_dim))
    samples = []
    for i in range(n):
        truth = np.zeros(m)
        truth[classes[i]] = 1.0
        samples.append(Sample(x=xs[i], true_label=truth,
                              label=LabelRecord(values=truth.copy(),
                                                known_mask=np.ones(m, dtype=bool))))
    return samples


def _draw_multi_label(n: int, directions: np.ndarray, threshold: float,
                      cfg: FederationConfig,
                      rng: np.random.Generator) -> list[Sample]:
    m = cfg.n_classes
    xs = rng.standard_normal((n, cfg.feature_dim))
    projections = xs @ directions.T
    labels = (projections >= threshold).astype(np.float64)
    samples = []
    for i in range(n):
        samples.append(Sample(x=xs[i], true_label=labels[i],
                              label=LabelRecord(values=labels[i].copy(),
                                                known_mask=np.ones(m, dtype=bool))))
    return samples


def gen_federation(cfg: FederationConfig) -> Federation:
    """Build per-client datasets, a validation set and a test set.

    Deterministic per cfg.seed.  Client data is already masked; val/test
    keep full labels.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    identified_sets = _sample_identified_sets(cfg, rng)
    specs = []
    for k, ident in enumerate(identified_sets):
        unknown = tuple(c for c in range(cfg.n_classes) if c not in ident)
        specs.append(ClientSpec(client_id=k, identified=ident, unknown=unknown,
                                n_samples=cfg.samples_per_client))

    if cfg.task == "single":
        centers = _class_directions(cfg.n_classes, cfg.feature_dim, rng)
        # Orthonormal rows scaled so pairwise center distance = cluster_sep * std.
        centers = centers * (cfg.cluster_sep * cfg.cluster_std / np.sqrt(2.0))

        def draw(n):
            return _draw_single_label(n, centers, cfg, rng)
    else:
        directions = _class_directions(cfg.n_classes, cfg.feature_dim, rng)
        threshold = norm.ppf(1.0 - cfg.positive_rate)

        def draw(n):
            return _draw_multi_label(n, directions, threshold, cfg, rng)

    clients = [mask_labels(draw(cfg.samples_per_client), spec, cfg.task)
               for spec in specs]
    val = draw(cfg.n_val)
    test = draw(cfg.n_test)
    return Federation(specs=specs, clients=clients, val=val, test=test, config=cfg)


def mask_labels(dataset: list[Sample], spec: ClientSpec, task: str) -> list[Sample]:
    """Apply the client's identified-class view to full labels.

    Multi-label: mask is True exactly on identified classes, values are
    zeroed elsewhere.  Single-label: a sample keeps its one-hot label only
    when its hidden class is identified; otherwise it is fully unlabeled.
    """
    if not dataset:
        return []
    identified = np.zeros(len(dataset[0].true_label), dtype=bool)
    for c in spec.identified:
        identified[c] = True
    out = []
    for s in dataset:
        if task == "multi":
            mask = identified.copy()
            values = np.where(mask, s.true_label, 0.0)
        else:
            true_class = int(np.argmax(s.true_label))
            if identified[true_class]:
                mask = np.ones_like(identified)
                values = s.true_label.copy()
            else:
                mask = np.zeros_like(identified)
                values = np.zeros_like(s.true_label)
        out.append(Sample(x=s.x, true_label=s.true_label,
                          label=LabelRecord(values=values, known_mask=mask)))
    return out


def unmask_labels(dataset: list[Sample]) -> list[Sample]:
    """Restore full supervision (the fully-labeled upper-bound setting)."""
    return [Sample(x=s.x, true_label=s.true_label,
                   label=LabelRecord(values=s.true_label.copy(),
                                     known_mask=np.ones(len(s.true_label),
                                                        dtype=bool)))
            for s in dataset]


def _weak_noise(x: np.ndarray, rng: np.random.Generator,
                cfg: AugmentConfig) -> np.ndarray:
    return x + cfg.sigma_weak * rng.standard_normal(x.shape)


def _strong_noise(x: np.ndarray, rng: np.random.Generator,
                  cfg: AugmentConfig) -> np.ndarray:
    out = x + cfg.sigma_strong * rng.standard_normal(x.shape)
    out = out * rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter, x.shape)
    if cfg.drop_prob > 0:
        out = np.where(rng.random(x.shape) < cfg.drop_prob, 0.0, out)
    return out


def augment_weak(x: np.ndarray, seed: int,
                 cfg: AugmentConfig | None = None) -> np.ndarray:
    """Small additive-noise view of x, deterministic per seed."""
    cfg = cfg or AugmentConfig()
    return _weak_noise(np.asarray(x, dtype=np.float64),
                       np.random.default_rng(seed), cfg)


def augment_strong(x: np.ndarray, seed: int,
                   cfg: AugmentConfig | None = None) -> np.ndarray:
    """Noise + coordinate scaling + dropout view of x, deterministic per seed."""
    cfg = cfg or AugmentConfig()
    return _strong_noise(np.asarray(x, dtype=np.float64),
                         np.random.default_rng(seed), cfg)


def augment_weak_batch(xs: np.ndarray, rng: np.random.Generator,
                       cfg: AugmentConfig) -> np.ndarray:
    return _weak_noise(xs, rng, cfg)


def augment_strong_batch(xs: np.ndarray, rng: np.random.Generator,
                         cfg: AugmentConfig) -> np.ndarray:
    return _strong_noise(xs, rng, cfg)


def save_csv(dataset: list[Sample], path: str) -> None:
    """Write samples as rows: d features, M label values, M masks, M truths."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        if not dataset:
            return
        d = len(dataset[0].x)
        m = len(dataset[0].true_label)
        writer.writerow([f"x{i}" for i in range(d)]
                        + [f"y{c}" for c in range(m)]
                        + [f"mask{c}" for c in range(m)]
                        + [f"true{c}" for c in range(m)])
        for s in dataset:
            writer.writerow([repr(float(v)) for v in s.x]
                            + [int(v) for v in s.label.values]
                            + [int(v) for v in s.label.known_mask]
                            + [int(v) for v in s.true_label])


def load_csv(path: str) -> list[Sample]:
    """Inverse of save_csv.  Raises ParseError naming the offending line."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        return []
    header = rows[0]
    d = sum(1 for name in header if name.startswith("x"))
    m = sum(1 for name in header if name.startswith("y"))
    expected = d + 3 * m
    if d == 0 or m == 0 or len(header) != expected:
        raise ParseError(f"{path}:1: malformed header")
    samples = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != expected:
            raise ParseError(f"{path}:{lineno}: expected {expected} columns, "
                             f"got {len(row)}")
        try:
            x = np.array([float(v) for v in row[:d]])
            values = np.array([float(v) for v in row[d:d + m]])
            mask = np.array([bool(int(v)) for v in row[d + m:d + 2 * m]])
            truth = np.array([float(v) for v in row[d + 2 * m:]])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        samples.append(Sample(x=x, true_label=truth,
                              label=LabelRecord(values=values, known_mask=mask)))
    return samples
