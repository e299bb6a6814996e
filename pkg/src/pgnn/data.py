"""Datasets: text-file I/O, random splits, cSBM graphs and noisy-edge perturbation.

File formats
------------
edges     one edge per line, ``src<TAB>dst[<TAB>weight]``, 0-based ids,
          ``#`` comment lines ignored; each undirected pair may appear in
          either or both orientations if the weights agree.
features  headerless CSV, row i = node i.
labels    one integer per line, row i = node i.
split     JSON object with sorted integer arrays "train", "val", "test".
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Rng
from .errors import DataError
from .graph import SparseGraph

SCHEMES = {"sparse": (25, 25, 1000), "dense": (60, 20, 100)}


@dataclass
class Dataset:
    graph: SparseGraph
    X: np.ndarray
    labels: np.ndarray
    names: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.graph.n
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise DataError(f"feature matrix has {self.X.shape[0]} rows, graph has {n} nodes")
        if self.labels.shape != (n,):
            raise DataError(f"{self.labels.size} labels for {n} nodes")
        if self.labels.min() < 0:
            raise DataError("labels must be nonnegative")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class SplitMask:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        sets = [set(a.tolist()) for a in (self.train, self.val, self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("split masks overlap")
        if not self.train.size or not self.val.size:
            raise DataError("train and val masks must be nonempty")

    def to_json(self) -> str:
        return json.dumps({k: sorted(getattr(self, k).tolist()) for k in ("train", "val", "test")})

    @classmethod
    def from_json(cls, text: str, n: int | None = None) -> "SplitMask":
        try:
            obj = json.loads(text)
            parts = [np.asarray(sorted(obj[k]), dtype=np.int64) for k in ("train", "val", "test")]
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"malformed split file: {exc}") from exc
        if n is not None and any(p.size and (p.min() < 0 or p.max() >= n) for p in parts):
            raise DataError(f"split index outside [0, {n})")
        return cls(*parts)


# --------------------------------------------------------------------------
# File I/O
# --------------------------------------------------------------------------


def read_edges(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src, dst, w = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            try:
                if len(parts) not in (2, 3):
                    raise ValueError(f"expected 2 or 3 fields, got {len(parts)}")
                src.append(int(parts[0]))
                dst.append(int(parts[1]))
                w.append(float(parts[2]) if len(parts) == 3 else 1.0)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), np.array(w)


def read_features(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec:
                continue
            try:
                rows.append([float(x) for x in rec])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if len(rows[-1]) != len(rows[0]):
                raise DataError(f"{path}:{lineno}: expected {len(rows[0])} columns, got {len(rows[-1])}")
    return np.array(rows, dtype=np.float64)


def read_labels(path) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return np.array(out, dtype=np.int64)


def load_graph(path, n: int | None = None) -> SparseGraph:
    src, dst, w = read_edges(path)
    if n is None:
        n = int(max(src.max(), dst.max())) + 1 if src.size else 0
    return SparseGraph.from_arrays(n, src, dst, w)


def load_dataset(edge_path, feature_path, label_path) -> Dataset:
    X = read_features(feature_path)
    labels = read_labels(label_path)
    if X.shape[0] != labels.size:
        raise DataError(f"feature file has {X.shape[0]} rows but label file has {labels.size}")
    src, dst, w = read_edges(edge_path)
    n = labels.size
    if src.size and max(src.max(), dst.max()) >= n:
        raise DataError(f"edge list references node {max(src.max(), dst.max())} but only {n} nodes have labels")
    graph = SparseGraph.from_arrays(n, src, dst, w)
    return Dataset(graph, X, labels)


def format_float(x: float) -> str:
    return repr(float(x))


def write_edges(path, g: SparseGraph) -> None:
    u, v, w = g.edges()
    with open(path, "w", encoding="utf-8") as fh:
        for a, b, c in zip(u.tolist(), v.tolist(), w.tolist()):
            fh.write(f"{a}\t{b}\n" if c == 1.0 else f"{a}\t{b}\t{format_float(c)}\n")


def write_features(path, X: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.atleast_2d(X):
            fh.write(",".join(format_float(x) for x in row) + "\n")


def write_labels(path, labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(y)}\n" for y in labels)


def save_dataset(ds: Dataset, directory, stem: str = "data") -> tuple[Path, Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = (directory / f"{stem}.edges", directory / f"{stem}.features.csv", directory / f"{stem}.labels")
    write_edges(paths[0], ds.graph)
    write_features(paths[1], ds.X)
    write_labels(paths[2], ds.labels)
    return paths


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


def make_split(n: int, scheme: str, labels=None, seed: int = 0) -> SplitMask:
    """Seeded random split: sparse 2.5/2.5/95 or dense 60/20/20 percent.

    Train and val sizes are floored; the remainder is the test set.
    ``labels`` is accepted for interface symmetry and not used.
    """
    try:
        tr, va, denom = SCHEMES[scheme]
    except KeyError:
        raise DataError(f"unknown split scheme {scheme!r}") from None
    n_train, n_val = n * tr // denom, n * va // denom
    if n_train == 0 or n_val == 0:
        raise DataError(f"{scheme} split of {n} nodes leaves train or val empty")
    perm = Rng(seed).permutation(n)
    return SplitMask(
        np.sort(perm[:n_train]),
        np.sort(perm[n_train:n_train + n_val]),
        np.sort(perm[n_train + n_val:]),
    )


# --------------------------------------------------------------------------
# Noisy edges
# --------------------------------------------------------------------------


def perturb_edges(g: SparseGraph, r: float, seed: int = 0) -> SparseGraph:
    """Add ceil(r |E|) random non-edges and drop as many original edges.

    Removals that would isolate a node are skipped and another original
    edge is tried. If the originals run out, the shortfall is taken from
    the added edges so that |E| is preserved.
    """
    if not 0 <= r <= 1:
        raise DataError(f"perturbation rate must lie in [0, 1], got {r}")
    u, v, w = g.edges()
    m, n = u.size, g.n
    k = math.ceil(r * m - 1e-9)
    if k == 0:
        return g
    if k > n * (n - 1) // 2 - m:
        raise DataError(f"cannot add {k} edges: only {n * (n - 1) // 2 - m} non-edges exist")
    rng = Rng(seed)

    existing = set((u * n + v).tolist())
    added: list[int] = []
    added_set: set[int] = set()
    while len(added) < k:
        a = rng.integers(0, n, 2 * (k - len(added)) + 8)
        b = rng.integers(0, n, a.size)
        for x, y in zip(a.tolist(), b.tolist()):
            if x == y:
                continue
            key = min(x, y) * n + max(x, y)
            if key in existing or key in added_set:
                continue
            added.append(key)
            added_set.add(key)
            if len(added) == k:
                break

    deg = np.bincount(np.concatenate([u, v]), minlength=n)
    add_arr = np.array(added, dtype=np.int64)
    deg += np.bincount(np.concatenate([add_arr // n, add_arr % n]), minlength=n)

    keep_orig = np.ones(m, dtype=bool)
    removed = 0
    for e in rng.permutation(m).tolist():
        if removed == k:
            break
        a, b = u[e], v[e]
        if deg[a] > 1 and deg[b] > 1:
            keep_orig[e] = False
            deg[a] -= 1
            deg[b] -= 1
            removed += 1

    keep_add = np.ones(k, dtype=bool)
    for e in rng.permutation(k).tolist():
        if removed == k:
            break
        a, b = added[e] // n, added[e] % n
        if deg[a] > 1 and deg[b] > 1:
            keep_add[e] = False
            deg[a] -= 1
            deg[b] -= 1
            removed += 1
    if removed < k:
        raise DataError("could not remove enough edges without isolating a node")

    add_arr = add_arr[keep_add]
    src = np.concatenate([u[keep_orig], add_arr // n])
    dst = np.concatenate([v[keep_orig], add_arr % n])
    wt = np.concatenate([w[keep_orig], np.ones(add_arr.size)])
    return SparseGraph.from_arrays(n, src, dst, wt)


# --------------------------------------------------------------------------
# cSBM
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CsbmParams:
    n: int
    f: int
    d: float
    epsilon: float
    phi: float
    lam: float
    mu_feat: float
    seed: int = 0

    def __post_init__(self):
        if abs(self.lam * math.sqrt(self.d)) >= self.d:
            raise DataError(f"|lambda sqrt(d)| = {abs(self.lam * math.sqrt(self.d)):.4g} must be < d = {self.d}")


def csbm_params_from_phi(n: int, f: int, d: float, epsilon: float, phi: float, seed: int = 0) -> CsbmParams:
    """Split the signal budget 1 + epsilon between graph (lambda) and features (mu).

    lambda^2 + mu^2 f / n = 1 + epsilon; phi = 0 puts everything in the
    features, |phi| = 1 everything in the graph, phi < 0 gives heterophily.
    """
    if n <= 0 or f <= 0 or d <= 0 or epsilon < 0:
        raise DataError("n, f, d must be positive and epsilon nonnegative")
    if abs(phi) > 1:
        raise DataError(f"phi must lie in [-1, 1], got {phi}")
    angle = phi * math.pi / 2
    lam = math.sqrt(1 + epsilon) * math.sin(angle)
    mu_feat = math.sqrt((1 + epsilon) * n / f) * math.cos(angle)
    return CsbmParams(n, f, d, epsilon, phi, lam, mu_feat, seed)


def generate_csbm(params: CsbmParams) -> Dataset:
    n, f, d = params.n, params.f, params.d
    rng = Rng(params.seed)
    signs = np.where(rng.permutation(n) < n // 2, 1.0, -1.0)
    labels = (signs < 0).astype(np.int64)

    p_same = (d + params.lam * math.sqrt(d)) / n
    p_diff = (d - params.lam * math.sqrt(d)) / n
    for prob in (p_same, p_diff):
        if not 0 <= prob <= 1:
            raise DataError(f"edge probability {prob} outside [0, 1]")
    edge_rng = rng.child(1)
    src, dst = [], []
    for i in range(n - 1):
        j = np.arange(i + 1, n)
        prob = np.where(signs[j] == signs[i], p_same, p_diff)
        hit = j[edge_rng.random(j.size) < prob]
        src.append(np.full(hit.size, i))
        dst.append(hit)
    src = np.concatenate(src) if src else np.zeros(0, np.int64)
    dst = np.concatenate(dst) if dst else np.zeros(0, np.int64)

    deg = np.bincount(np.concatenate([src, dst]), minlength=n)
    repair_rng = rng.child(2)
    extra_src, extra_dst = [], []
    for i in np.flatnonzero(deg == 0).tolist():
        j = int(repair_rng.integers(0, n - 1))
        j += j >= i
        extra_src.append(i)
        extra_dst.append(j)
    graph = SparseGraph.from_arrays(
        n,
        np.concatenate([src, np.array(extra_src, dtype=np.int64)]),
        np.concatenate([dst, np.array(extra_dst, dtype=np.int64)]),
    )

    feat_rng = rng.child(3)
    u = feat_rng.normal(0.0, 1.0 / math.sqrt(f), (1, f))
    Z = feat_rng.normal(0.0, 1.0, (n, f))
    X = math.sqrt(params.mu_feat / n) * signs[:, None] * u + Z / math.sqrt(f)
    return Dataset(graph, X, labels, meta={"repairs": len(extra_src), "lambda": params.lam,
                                           "mu_feat": params.mu_feat, "phi": params.phi})
