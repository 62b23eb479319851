"""Synthetic datasets and non-IID client partitioning.

Gaussian mixtures stand in for image data. Every example carries an integer
id so that shard disjointness can be checked by identity even after a
feature shift has moved its coordinates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

MAX_REDRAWS = 10

PATHOLOGICAL = "pathological"
DIRICHLET = "dirichlet"
FEATURE_SHIFT = "feature_shift"
HYBRID = "hybrid"
SCHEMES = (PATHOLOGICAL, DIRICHLET, FEATURE_SHIFT, HYBRID)


class PartitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    ids: np.ndarray

    def __post_init__(self):
        if self.X.ndim != 2 or len(self.X) != len(self.y) or len(self.ids) != len(self.y):
            raise ValueError("inconsistent dataset arrays")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.ids[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def label_set(self) -> set:
        return set(np.unique(self.y).tolist())


@dataclass(frozen=True)
class PublicPool:
    """Unlabelled shared pool; row j is example j for every party."""

    X: np.ndarray
    ids: np.ndarray

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return len(self.X)


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str
    num_clients: int
    seed: int = 0
    classes_per_client: int = 2
    alpha: float = 0.5
    domains: int = 1
    clients_per_domain: int = 1
    target_classes: Optional[tuple] = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients < 2:
            raise ValueError("need at least 2 clients")
        if self.classes_per_client < 1:
            raise ValueError("classes_per_client must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.scheme in (FEATURE_SHIFT, HYBRID) and self.domains < 1:
            raise ValueError("need at least one domain")
        if self.scheme == HYBRID and self.domains * self.clients_per_domain != self.num_clients:
            raise ValueError("hybrid: num_clients must equal domains * clients_per_domain")


@dataclass(frozen=True)
class DomainShift:
    """Per-domain affine map x -> scale * R(angle) x + bias, plus Gaussian noise.

    The rotation acts on consecutive coordinate pairs (0,1), (2,3), ...
    """

    angles: tuple
    scales: tuple
    biases: tuple
    noise_std: tuple

    @property
    def num_domains(self) -> int:
        return len(self.angles)


def make_domain_shift(num_domains: int, dim: int, rotation: float = 0.3,
                      scale_step: float = 0.0, bias_gap: float = 0.5,
                      noise: float = 0.0) -> DomainShift:
    """Domain d rotates by d*rotation, scales by 1 + d*scale_step and shifts every
    feature by d*bias_gap."""
    return DomainShift(
        angles=tuple(d * rotation for d in range(num_domains)),
        scales=tuple(1.0 + d * scale_step for d in range(num_domains)),
        biases=tuple(tuple([d * bias_gap] * dim) for d in range(num_domains)),
        noise_std=tuple([noise] * num_domains),
    )


def _derive(seed, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _class_directions(num_classes: int, dim: int) -> np.ndarray:
    # Independent of the data seed so the class layout is a property of (C, d).
    rng = np.random.default_rng(np.random.SeedSequence([num_classes, dim, 0x5EED]))
    if num_classes <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, num_classes)))
        return q.T
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    if num_classes <= 2 * dim:
        # signed basis vectors: any two directions are orthogonal or opposite
        return np.concatenate([q.T, -q.T])[:num_classes]
    # farthest-point selection from random unit vectors keeps directions spread out
    cand = rng.normal(size=(64 * num_classes, dim))
    cand /= np.linalg.norm(cand, axis=1, keepdims=True)
    chosen = [0]
    best = cand @ cand[0]
    for _ in range(num_classes - 1):
        nxt = int(np.argmin(best))
        chosen.append(nxt)
        best = np.maximum(best, cand @ cand[nxt])
    return cand[chosen]


def make_mixture(num_classes: int, dim: int, per_class: int, separation: float,
                 seed: int = 0, id_offset: int = 0) -> Dataset:
    """Isotropic unit-variance Gaussian per class, mean at ``separation`` along a fixed direction."""
    if num_classes < 2 or dim < 2:
        raise ValueError("need num_classes >= 2 and dim >= 2")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if not separation > 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    means = separation * _class_directions(num_classes, dim)
    y = np.repeat(np.arange(num_classes), per_class)
    X = means[y] + rng.normal(size=(len(y), dim))
    return Dataset(X, y, num_classes, np.arange(len(y)) + id_offset)


def apply_feature_shift(dataset: Dataset, domain_id: int, shift: DomainShift,
                        seed: int = 0) -> Dataset:
    if not 0 <= domain_id < shift.num_domains:
        raise ValueError(f"domain {domain_id} not in [0, {shift.num_domains})")
    bias = np.asarray(shift.biases[domain_id], dtype=np.float64)
    if bias.shape != (dataset.dim,):
        raise ValueError(f"shift has dimension {bias.size}, data has {dataset.dim}")
    X = dataset.X.copy()
    c, s = math.cos(shift.angles[domain_id]), math.sin(shift.angles[domain_id])
    for a in range(0, dataset.dim - 1, 2):
        xa, xb = X[:, a].copy(), X[:, a + 1].copy()
        X[:, a] = c * xa - s * xb
        X[:, a + 1] = s * xa + c * xb
    X = shift.scales[domain_id] * X + bias
    std = shift.noise_std[domain_id]
    if std > 0:
        X = X + _derive(seed, domain_id).normal(0.0, std, size=X.shape)
    return Dataset(X, dataset.y.copy(), dataset.num_classes, dataset.ids.copy())


def split_public(dataset: Dataset, fraction: float, seed: int = 0):
    """Split into private data and an unlabelled public pool.

    Returns ``(private, pool, pool_truth)``; the ground-truth labels of the
    pool are kept apart and only meant for diagnostics.
    """
    n = len(dataset)
    n_pub = int(round(fraction * n))
    if not 0 < fraction < 1 or n_pub < 1 or n_pub > n - 1:
        raise ValueError(f"fraction {fraction} leaves an empty side on {n} examples")
    perm = np.random.default_rng(seed).permutation(n)
    pub, priv = np.sort(perm[:n_pub]), np.sort(perm[n_pub:])
    pool = PublicPool(dataset.X[pub].copy(), dataset.ids[pub].copy())
    return dataset.subset(priv), pool, dataset.y[pub].copy()


@dataclass
class Partition:
    shards: list
    class_freq: np.ndarray
    client_classes: list
    client_domains: list = field(default_factory=list)

    def __iter__(self):
        # allows ``shards, freq = partition(...)``
        return iter((self.shards, self.class_freq))


def _assign_classes(clients: Sequence[int], classes: Sequence[int], k: int,
                    rng: np.random.Generator) -> dict:
    if k > len(classes):
        raise ValueError(f"classes_per_client={k} exceeds {len(classes)} target classes")
    order = rng.permutation(np.asarray(classes))
    n = len(order)
    return {c: sorted(int(order[(pos * k + j) % n]) for j in range(k))
            for pos, c in enumerate(clients)}


def _split_by_class(dataset: Dataset, assignment: dict, rng) -> dict:
    """Split every class's examples evenly among the clients holding it."""
    out = {c: [] for c in assignment}
    for cls in range(dataset.num_classes):
        holders = [c for c, classes in assignment.items() if cls in classes]
        if not holders:
            continue
        idx = rng.permutation(np.flatnonzero(dataset.y == cls))
        for c, part in zip(holders, np.array_split(idx, len(holders))):
            out[c].append(part)
    return {c: np.sort(np.concatenate(parts)) if parts else np.array([], dtype=np.int64)
            for c, parts in out.items()}


def _dirichlet_split(dataset: Dataset, m: int, alpha: float, rng) -> list:
    parts = [[] for _ in range(m)]
    for cls in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.y == cls))
        if not len(idx):
            continue
        props = rng.dirichlet(np.full(m, alpha))
        cuts = np.round(np.cumsum(props)[:-1] * len(idx)).astype(int)
        for i, chunk in enumerate(np.split(idx, cuts)):
            parts[i].append(chunk)
    return [np.sort(np.concatenate(p)) for p in parts]


def partition(dataset: Dataset, spec: PartitionSpec,
              shift: Optional[DomainShift] = None) -> Partition:
    """Split labelled data into ``spec.num_clients`` disjoint shards.

    Feature-shift and hybrid schemes need a ``DomainShift``; clients are
    assigned to domains in contiguous blocks (hybrid) or round-robin.
    """
    m = spec.num_clients
    targets = list(spec.target_classes) if spec.target_classes else list(range(dataset.num_classes))
    domains = [0] * m
    if spec.scheme in (FEATURE_SHIFT, HYBRID):
        if shift is None or shift.num_domains < spec.domains:
            raise ValueError(f"{spec.scheme} needs a DomainShift with {spec.domains} domains")
        if spec.scheme == HYBRID:
            domains = [i // spec.clients_per_domain for i in range(m)]
        else:
            domains = [i % spec.domains for i in range(m)]

    for attempt in range(MAX_REDRAWS):
        rng = _derive(spec.seed, attempt)
        if spec.scheme == PATHOLOGICAL:
            assign = _assign_classes(range(m), targets, spec.classes_per_client, rng)
            by_client = _split_by_class(dataset, assign, rng)
            index_sets = [by_client[i] for i in range(m)]
        elif spec.scheme == DIRICHLET:
            index_sets = _dirichlet_split(dataset, m, spec.alpha, rng)
        elif spec.scheme == FEATURE_SHIFT:
            pool = np.flatnonzero(np.isin(dataset.y, targets))
            index_sets = [np.sort(p) for p in np.array_split(rng.permutation(pool), m)]
        else:
            assign = {}
            for d in range(spec.domains):
                members = [i for i in range(m) if domains[i] == d]
                assign.update(_assign_classes(members, targets, spec.classes_per_client, rng))
            by_client = _split_by_class(dataset, assign, rng)
            index_sets = [by_client[i] for i in range(m)]
        if all(len(ix) for ix in index_sets):
            break
    else:
        raise PartitionError(f"a client shard stayed empty after {MAX_REDRAWS} draws")

    shards = [dataset.subset(ix) for ix in index_sets]
    if spec.scheme in (FEATURE_SHIFT, HYBRID):
        shards = [apply_feature_shift(s, domains[i], shift, seed=_seed_int(spec.seed, 1, i))
                  for i, s in enumerate(shards)]
    freq = np.stack([s.class_counts() for s in shards])
    classes = [sorted(s.label_set()) for s in shards]
    return Partition(shards, freq, classes, domains)


def _seed_int(seed, *keys) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def flip_labels(dataset: Dataset) -> Dataset:
    """Cyclic relabelling y -> (y + 1) mod C; every label changes."""
    return Dataset(dataset.X, (dataset.y + 1) % dataset.num_classes, dataset.num_classes,
                   dataset.ids)


# ---------------------------------------------------------------------------
# Scenario assembly


@dataclass(frozen=True)
class ScenarioSpec:
    num_classes: int = 10
    dim: int = 16
    per_class: int = 100
    separation: float = 3.0
    public_fraction: float = 0.3
    test_per_client: int = 100
    partition: PartitionSpec = PartitionSpec(DIRICHLET, 5)
    rotation: float = 0.3
    scale_step: float = 0.0
    bias_gap: float = 0.5
    shift_noise: float = 0.0
    flipped_label_client: Optional[int] = None


@dataclass
class Scenario:
    spec: ScenarioSpec
    shards: list
    class_freq: np.ndarray
    pool: PublicPool
    pool_truth: np.ndarray
    test_sets: list
    client_classes: list
    client_domains: list

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    def manifest(self) -> dict:
        spec = asdict(self.spec)
        return {
            "seed": self.spec.partition.seed,
            "spec": spec,
            "num_clients": self.num_clients,
            "public_size": len(self.pool),
            "class_counts": self.class_freq.tolist(),
            "client_classes": self.client_classes,
            "client_domains": self.client_domains,
            "flipped_label_client": self.spec.flipped_label_client,
        }


def _shift_of(spec: ScenarioSpec) -> Optional[DomainShift]:
    p = spec.partition
    if p.scheme not in (FEATURE_SHIFT, HYBRID):
        return None
    return make_domain_shift(p.domains, spec.dim, spec.rotation, spec.scale_step,
                             spec.bias_gap, spec.shift_noise)


def make_scenario(spec: ScenarioSpec) -> Scenario:
    """Build private shards, a public pool drawn from all client distributions and
    per-client test sets following each client's own class mix and domain."""
    seed = spec.partition.seed
    full = make_mixture(spec.num_classes, spec.dim, spec.per_class, spec.separation,
                        seed=_seed_int(seed, 10))
    private, pool, truth = split_public(full, spec.public_fraction, seed=_seed_int(seed, 11))
    shift = _shift_of(spec)
    part = partition(private, spec.partition, shift)
    shards = list(part.shards)

    if shift is not None:
        # each public example comes from a uniformly drawn domain
        rng = _derive(seed, 12)
        dom = rng.integers(0, spec.partition.domains, size=len(pool))
        X = pool.X.copy()
        for d in range(spec.partition.domains):
            rows = np.flatnonzero(dom == d)
            if len(rows):
                tmp = Dataset(X[rows], np.zeros(len(rows), dtype=np.int64), spec.num_classes,
                              pool.ids[rows])
                X[rows] = apply_feature_shift(tmp, d, shift, seed=_seed_int(seed, 13)).X
        pool = PublicPool(X, pool.ids)

    test_pool = make_mixture(spec.num_classes, spec.dim, spec.test_per_client, spec.separation,
                             seed=_seed_int(seed, 20), id_offset=len(full))
    test_sets = []
    for i, shard in enumerate(shards):
        rng = _derive(seed, 21, i)
        counts = _apportion(part.class_freq[i], spec.test_per_client)
        idx = np.concatenate([
            rng.choice(np.flatnonzero(test_pool.y == c), size=n, replace=False)
            for c, n in enumerate(counts) if n
        ])
        test = test_pool.subset(np.sort(idx))
        if shift is not None:
            test = apply_feature_shift(test, part.client_domains[i], shift,
                                       seed=_seed_int(seed, 22, i))
        test_sets.append(test)

    flip = spec.flipped_label_client
    if flip is not None:
        if not 0 <= flip < len(shards):
            raise ValueError(f"flipped_label_client {flip} out of range")
        shards[flip] = flip_labels(shards[flip])
        test_sets[flip] = flip_labels(test_sets[flip])
    freq = np.stack([s.class_counts() for s in shards])
    classes = [sorted(s.label_set()) for s in shards]
    return Scenario(spec, shards, freq, pool, truth, test_sets, classes, part.client_domains)


def _apportion(weights, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``total`` in proportion to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    raw = w / w.sum() * total
    out = np.floor(raw).astype(int)
    rest = total - out.sum()
    out[np.argsort(-(raw - out), kind="stable")[:rest]] += 1
    return out


def write_manifest(scenario: Scenario, path):
    with open(path, "w") as fh:
        json.dump(scenario.manifest(), fh, indent=2, sort_keys=True)


def dump_csv(data, path):
    """One row per example, label in the last column (empty for public pool rows)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(data, PublicPool):
            for x in data.X:
                w.writerow([repr(float(v)) for v in x] + [""])
        else:
            for x, y in zip(data.X, data.y):
                w.writerow([repr(float(v)) for v in x] + [int(y)])
