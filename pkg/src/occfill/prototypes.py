"""Fully visible pedestrian prototypes via K-means over pooled features.

The bank is built offline: collect every fully visible pedestrian, run
Lloyd's algorithm with K-means++ seeding and a few restarts on the
flattened feature vectors, and keep each cluster center together with the
scale statistics of its members. Lookup at completion time goes by
proposal scale, which is far cheaper than a feature-space search and is
what the scale statistics are stored for; a feature-space lookup exists
for comparison.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, PreconditionError, ShapeMismatchError
from .ndnum import Rng, check_finite
from .synth import PEDESTRIAN

FULLY_VISIBLE = 0.99


@dataclass(frozen=True)
class Prototype:
    center: np.ndarray          # (C, X, Y) float64, read-only
    scale_mean: float
    scale_std: float
    member_count: int


@dataclass(frozen=True)
class PrototypeBank:
    prototypes: tuple

    @property
    def k(self):
        return len(self.prototypes)

    def validate(self, pool_size=None):
        if not self.prototypes:
            raise PreconditionError("bank must hold at least one prototype")
        counts = [p.member_count for p in self.prototypes]
        if any(c < 1 for c in counts):
            raise PreconditionError("every cluster must keep at least one member")
        if pool_size is not None and sum(counts) != pool_size:
            raise PreconditionError(
                f"member counts sum to {sum(counts)}, pool holds {pool_size}")
        means = [p.scale_mean for p in self.prototypes]
        if any(b < a for a, b in zip(means, means[1:])):
            raise PreconditionError("prototypes must be sorted by scale mean")
        shape = self.prototypes[0].center.shape
        for p in self.prototypes:
            if p.center.shape != shape:
                raise ShapeMismatchError("prototype center", p.center, shape)
        return self


@dataclass(frozen=True)
class FeaturePool:
    features: np.ndarray        # (N, C, X, Y)
    scales: np.ndarray          # (N,)

    @property
    def size(self):
        return self.features.shape[0]


def build_pool(proposals):
    """Collect the fully visible pedestrians of a dataset into a pool."""
    keep = [p for p in proposals
            if p.label == PEDESTRIAN and p.visibility >= FULLY_VISIBLE]
    if not keep:
        raise PreconditionError("no fully visible samples")
    shape = keep[0].features.shape
    for p in keep:
        if p.features.shape != shape:
            raise ShapeMismatchError("pool features", p.features, shape)
    features = np.stack([p.features for p in keep])
    scales = np.array([p.scale for p in keep], dtype=np.float64)
    features.setflags(write=False)
    scales.setflags(write=False)
    return FeaturePool(features, scales)


def _plus_plus_seed(flat, k, rng):
    """K-means++ seeding: spread initial centers by squared distance."""
    n = flat.shape[0]
    chosen = [int(rng.integers(0, n))]
    d2 = ((flat - flat[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0.0:
            pick = int(rng.integers(0, n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        chosen.append(pick)
        d2 = np.minimum(d2, ((flat - flat[pick]) ** 2).sum(axis=1))
    return flat[chosen].copy()


def _assign(flat, centers):
    d2 = ((flat[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1), d2


def _lloyd(flat, k, rng, max_iters):
    """One seeded Lloyd run; returns (labels, objective)."""
    centers = _plus_plus_seed(flat, k, rng)
    labels = np.full(flat.shape[0], -1)
    for _ in range(max_iters):
        new_labels, d2 = _assign(flat, centers)
        # Re-seed any emptied cluster with the point farthest from its
        # center, never stealing a point repaired this same pass.
        own = d2[np.arange(flat.shape[0]), new_labels]
        for j in range(k):
            if not (new_labels == j).any():
                worst = int(own.argmax())
                new_labels[worst] = j
                own[worst] = -np.inf
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = flat[members].mean(axis=0)
    missing = [j for j in range(k) if not (labels == j).any()]
    if missing:  # max_iters ran out mid-repair; enforce nonempty clusters
        _, d2 = _assign(flat, centers)
        own = d2[np.arange(flat.shape[0]), labels]
        for j in missing:
            worst = int(own.argmax())
            labels[worst] = j
            own[worst] = -np.inf
    return labels, _objective(flat, labels, k)


def _objective(flat, labels, k):
    centers = np.empty((k, flat.shape[1]))
    for j in range(k):
        centers[j] = flat[labels == j].mean(axis=0)
    return float(np.sum((flat - centers[labels]) ** 2))


def kmeans(pool, k=5, seed=0, max_iters=100, restarts=5):
    """Cluster the pool; the best of `restarts` seeded runs wins."""
    if k < 1:
        raise PreconditionError(f"cluster count must be >= 1, got {k}")
    if pool.size < k:
        raise PreconditionError(
            f"pool holds {pool.size} entries, fewer than {k} clusters")
    if max_iters < 1 or restarts < 1:
        raise PreconditionError("max_iters and restarts must be >= 1")
    flat = pool.features.reshape(pool.size, -1).astype(np.float64)
    check_finite(flat, "pool features")
    root = Rng(seed)
    best_labels, best_obj = None, np.inf
    for r in range(restarts):
        labels, obj = _lloyd(flat, k, root.split(f"restart-{r}"), max_iters)
        if obj < best_obj:
            best_labels, best_obj = labels, obj
    shape = pool.features.shape[1:]
    protos = []
    for j in range(k):
        members = best_labels == j
        center = pool.features[members].mean(axis=0).reshape(shape)
        center.setflags(write=False)
        scales = pool.scales[members]
        protos.append(Prototype(center, float(scales.mean()),
                                float(scales.std()), int(members.sum())))
    protos.sort(key=lambda p: p.scale_mean)
    return PrototypeBank(tuple(protos)).validate(pool_size=pool.size)


def wcss(pool, bank):
    """Within-cluster sum of squares of the pool under the bank's centers."""
    flat = pool.features.reshape(pool.size, -1)
    centers = np.stack([p.center.reshape(-1) for p in bank.prototypes])
    labels, _ = _assign(flat, centers)
    return float(np.sum((flat - centers[labels]) ** 2))


def nearest_prototype(bank, scale):
    """The prototype whose scale mean is closest; ties go to the smaller."""
    if not bank.prototypes:
        raise PreconditionError("bank is empty")
    if scale <= 0:
        raise PreconditionError(f"scale must be positive, got {scale}")
    best = 0
    for i, p in enumerate(bank.prototypes):
        if abs(scale - p.scale_mean) < abs(scale - bank.prototypes[best].scale_mean):
            best = i
    return bank.prototypes[best]


def nearest_prototype_by_features(bank, features):
    """Full feature-space lookup, kept for comparison with the scale route."""
    if not bank.prototypes:
        raise PreconditionError("bank is empty")
    flat = np.asarray(features, dtype=np.float64).reshape(-1)
    best, best_d = 0, np.inf
    for i, p in enumerate(bank.prototypes):
        d = float(np.sum((flat - p.center.reshape(-1)) ** 2))
        if d < best_d:
            best, best_d = i, d
    return bank.prototypes[best]


# ---------------------------------------------------------------------------
# Bank file: magic "FCPB" | version u32 | K u32 | C u32 | X u32 | Y u32
# then per prototype: scale_mean f64 | scale_std f64 | member_count u32 |
# C*X*Y center f64.
# ---------------------------------------------------------------------------

BANK_MAGIC = b"FCPB"
BANK_VERSION = 1


def write_bank(bank, path):
    bank.validate()
    c, x, y = bank.prototypes[0].center.shape
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<IIIII", BANK_VERSION, bank.k, c, x, y))
        for p in bank.prototypes:
            fh.write(struct.pack("<ddI", p.scale_mean, p.scale_std,
                                 p.member_count))
            fh.write(p.center.astype("<f8").tobytes())


def read_bank(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != BANK_MAGIC:
        raise FormatError(0, f"bad magic {data[:4]!r}")
    if len(data) < 24:
        raise FormatError(4, "truncated header")
    version, k, c, x, y = struct.unpack("<IIIII", data[4:24])
    if version != BANK_VERSION:
        raise FormatError(4, f"unsupported version {version}")
    if k < 1:
        raise FormatError(8, "bank must hold at least one prototype")
    pos = 24
    record = 20 + c * x * y * 8
    protos = []
    for i in range(k):
        if pos + record > len(data):
            raise FormatError(pos, f"truncated prototype {i}")
        mean, std, count = struct.unpack("<ddI", data[pos:pos + 20])
        if count < 1:
            raise FormatError(pos + 16, f"prototype {i} has no members")
        center = np.frombuffer(data[pos + 20:pos + record],
                               dtype="<f8").reshape(c, x, y)
        if not np.isfinite(center).all():
            raise FormatError(pos + 20, f"non-finite center in prototype {i}")
        center = center.copy()
        center.setflags(write=False)
        protos.append(Prototype(center, mean, std, count))
        pos += record
    if pos != len(data):
        raise FormatError(pos, f"{len(data) - pos} trailing bytes")
    if any(b.scale_mean < a.scale_mean for a, b in zip(protos, protos[1:])):
        raise FormatError(24, "prototypes out of scale order")
    return PrototypeBank(tuple(protos)).validate()
