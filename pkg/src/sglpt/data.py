"""TUDataset text-format I/O, degree features, deterministic splits and a synthetic benchmark."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .graph import Graph, round_half_up
from .optim import load_checkpoint, save_checkpoint

DATA_ROOT_ENV = "SGL_DATA_ROOT"


class DataError(Exception):
    pass


class MissingFileError(DataError, FileNotFoundError):
    pass


class ParseError(DataError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path, self.line = path, line


@dataclass
class DatasetBundle:
    graphs: list[Graph]
    num_classes: int
    feature_kind: str  # "node_label" | "degree" | "none"
    name: str
    label_values: list = field(default_factory=list)

    def __post_init__(self):
        dims = {g.feature_dim for g in self.graphs}
        if len(dims) > 1:
            raise DataError(f"{self.name}: mixed feature dimensions {sorted(dims)}")
        bad = [g.id for g in self.graphs if g.label is None or not 0 <= g.label < self.num_classes]
        if bad:
            raise DataError(f"{self.name}: graphs {bad[:5]} have labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    @property
    def feature_dim(self) -> int:
        return self.graphs[0].feature_dim

    @property
    def avg_nodes(self) -> float:
        return float(np.mean([g.num_nodes for g in self.graphs]))

    @property
    def avg_edges(self) -> float:
        return float(np.mean([g.num_edges for g in self.graphs]))

    @property
    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.name}|{self.num_classes}|{self.feature_kind}".encode())
        for g in self.graphs:
            h.update(np.int64(g.label).tobytes())
            h.update(np.asarray(g.x.shape, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(g.x).tobytes())
            h.update(np.ascontiguousarray(g.edges).tobytes())
        return h.hexdigest()

    def subset(self, idx) -> list[Graph]:
        return [self.graphs[i] for i in idx]


def resolve_root(root: str | os.PathLike | None) -> Path:
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else Path(root or "data")


def _read_ints(path: Path, ncols: int) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter="," if ncols > 1 else None, dtype=np.int64, ndmin=2)
    except ValueError:
        # locate the offending line for the error message
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = [p for p in line.replace(",", " ").split()]
                if not parts:
                    continue
                try:
                    vals = [int(float(p)) for p in parts]
                except ValueError:
                    raise ParseError(path, lineno, f"not an integer row: {line.strip()!r}") from None
                if len(vals) != ncols:
                    raise ParseError(path, lineno, f"expected {ncols} values, got {len(vals)}")
        raise
    if arr.size == 0:
        return np.zeros((0, ncols), dtype=np.int64)
    if arr.shape[1] < ncols:
        raise ParseError(path, 1, f"expected {ncols} columns, got {arr.shape[1]}")
    return arr[:, :ncols]


def parse_tudataset(root: str | os.PathLike, name: str) -> DatasetBundle:
    """Read ``<root>/<name>/<name>_*.txt`` (or ``<root>/<name>_*.txt``)."""
    base = Path(root)
    folder = base / name if (base / name).is_dir() else base
    if not folder.is_dir():
        raise MissingFileError(f"dataset directory not found: {folder}")
    fn = lambda suffix: folder / f"{name}_{suffix}.txt"
    for req in ("A", "graph_indicator", "graph_labels"):
        if not fn(req).exists():
            raise MissingFileError(f"missing required file: {fn(req)}")

    indicator = _read_ints(fn("graph_indicator"), 1)[:, 0]
    raw_labels = _read_ints(fn("graph_labels"), 1)[:, 0]
    num_graphs, num_nodes = len(raw_labels), len(indicator)
    bad = np.flatnonzero((indicator < 1) | (indicator > num_graphs))
    if len(bad):
        raise ParseError(fn("graph_indicator"), int(bad[0]) + 1,
                         f"graph id {indicator[bad[0]]} outside [1, {num_graphs}]")
    if np.any(np.diff(indicator) < 0):
        line = int(np.flatnonzero(np.diff(indicator) < 0)[0]) + 2
        raise ParseError(fn("graph_indicator"), line, "graph ids must be non-decreasing")
    sizes = np.bincount(indicator - 1, minlength=num_graphs)
    if np.any(sizes == 0):
        raise ParseError(fn("graph_labels"), int(np.flatnonzero(sizes == 0)[0]) + 1, "graph has no nodes")
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    edges = _read_ints(fn("A"), 2) - 1
    bad = np.flatnonzero((edges < 0).any(axis=1) | (edges >= num_nodes).any(axis=1))
    if len(bad):
        raise ParseError(fn("A"), int(bad[0]) + 1, f"node index outside [1, {num_nodes}]")
    gsrc, gdst = indicator[edges[:, 0]] - 1, indicator[edges[:, 1]] - 1
    bad = np.flatnonzero(gsrc != gdst)
    if len(bad):
        raise ParseError(fn("A"), int(bad[0]) + 1, "edge joins nodes of different graphs")

    if fn("node_labels").exists():
        node_raw = _read_ints(fn("node_labels"), 1)[:, 0]
        if len(node_raw) != num_nodes:
            raise ParseError(fn("node_labels"), min(len(node_raw), num_nodes) + 1,
                             f"{len(node_raw)} node labels for {num_nodes} nodes")
        values, codes = np.unique(node_raw, return_inverse=True)
        feats = np.eye(len(values))[codes]
        kind = "node_label"
    else:
        feats = np.zeros((num_nodes, 0))
        kind = "none"

    label_values, y = np.unique(raw_labels, return_inverse=True)
    order = np.argsort(gsrc, kind="stable")
    edges, gsrc = edges[order], gsrc[order]
    estart = np.searchsorted(gsrc, np.arange(num_graphs + 1))
    graphs = []
    for k in range(num_graphs):
        e = edges[estart[k]:estart[k + 1]] - offsets[k]
        graphs.append(Graph(feats[offsets[k]:offsets[k + 1]], e, int(y[k]), k))
    return DatasetBundle(graphs, len(label_values), kind, name, [int(v) for v in label_values])


def write_tudataset(bundle: DatasetBundle, root: str | os.PathLike, name: str | None = None) -> Path:
    """Serialize to TUDataset text files; node-label one-hots are written as their index."""
    name = name or bundle.name
    folder = Path(root) / name
    folder.mkdir(parents=True, exist_ok=True)
    offset = 0
    a_lines, ind, nl = [], [], []
    for k, g in enumerate(bundle.graphs):
        for i, j in g.directed_edges()[np.lexsort(g.directed_edges().T[::-1])]:
            a_lines.append(f"{i + 1 + offset}, {j + 1 + offset}")
        ind.extend([str(k + 1)] * g.num_nodes)
        if bundle.feature_kind == "node_label":
            nl.extend(str(int(v)) for v in g.x.argmax(axis=1))
        offset += g.num_nodes
    (folder / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (folder / f"{name}_graph_indicator.txt").write_text("\n".join(ind) + "\n")
    (folder / f"{name}_graph_labels.txt").write_text("\n".join(str(g.label) for g in bundle.graphs) + "\n")
    if nl:
        (folder / f"{name}_node_labels.txt").write_text("\n".join(nl) + "\n")
    return folder


def degree_featurize(bundle: DatasetBundle, cap: int | None = None) -> DatasetBundle:
    """One-hot of min(degree, cap) as node features; cap defaults to the dataset's max degree."""
    degs = [g.degrees() for g in bundle.graphs]
    if cap is None:
        cap = int(max(d.max() for d in degs))
    eye = np.eye(cap + 1)
    graphs = [g.replace(x=eye[np.minimum(d, cap)]) for g, d in zip(bundle.graphs, degs)]
    return DatasetBundle(graphs, bundle.num_classes, "degree", bundle.name, bundle.label_values)


def load_dataset(root: str | os.PathLike | None, name: str, cache: bool = False) -> DatasetBundle:
    """Parse a dataset, adding degree features when it lacks node labels."""
    root = resolve_root(root)
    cache_path = root / name / f"{name}.sglcache"
    if cache and cache_path.exists():
        return load_cache(cache_path)
    bundle = parse_tudataset(root, name)
    if bundle.feature_kind == "none":
        bundle = degree_featurize(bundle)
    if cache:
        save_cache(bundle, cache_path)
    return bundle


# -- binary cache -------------------------------------------------------------------

def save_cache(bundle: DatasetBundle, path: str | os.PathLike) -> None:
    path = Path(path)
    tensors = {
        "x": np.concatenate([g.x for g in bundle.graphs]),
        "edges": np.concatenate([g.edges for g in bundle.graphs]).astype(np.int64),
        "labels": bundle.labels,
        "node_offsets": np.cumsum([0] + [g.num_nodes for g in bundle.graphs]).astype(np.int64),
        "edge_offsets": np.cumsum([0] + [g.num_edges for g in bundle.graphs]).astype(np.int64),
    }
    index = {"name": bundle.name, "num_classes": bundle.num_classes, "feature_kind": bundle.feature_kind,
             "label_values": bundle.label_values, "checksum": bundle.checksum}
    save_checkpoint(path, tensors, index)
    path.with_suffix(".index.json").write_text(json.dumps(index, indent=1, sort_keys=True))


def load_cache(path: str | os.PathLike) -> DatasetBundle:
    t, meta = load_checkpoint(path)
    no, eo = t["node_offsets"], t["edge_offsets"]
    graphs = [Graph(t["x"][no[k]:no[k + 1]], t["edges"][eo[k]:eo[k + 1]], int(t["labels"][k]), k)
              for k in range(len(t["labels"]))]
    bundle = DatasetBundle(graphs, meta["num_classes"], meta["feature_kind"], meta["name"], meta["label_values"])
    if bundle.checksum != meta["checksum"]:
        raise DataError(f"{path}: cache checksum mismatch")
    return bundle


# -- splits -----------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Train/test index partitions; one pair per fold (a single pair for label-rate and k-shot)."""

    kind: str
    param: float
    seed: int
    train: tuple[np.ndarray, ...]
    test: tuple[np.ndarray, ...]

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return iter(zip(self.train, self.test))

    def __len__(self) -> int:
        return len(self.train)


def _by_class(labels: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]


def make_split(labels, kind: str, seed: int, k: int | None = None, rate: float | None = None) -> SplitSpec:
    """Deterministic stratified splits.

    kind: ``kfold`` (``k`` folds), ``label_rate`` (labelled share ``rate``) or
    ``kshot`` (``k`` graphs per class for training, the rest for testing).
    """
    labels = np.asarray(getattr(labels, "labels", labels))
    n = len(labels)
    rng = np.random.default_rng([seed, 0x5EED])
    if kind == "kfold":
        if k is None or k < 2 or k > n:
            raise ValueError(f"kfold needs 2 <= k <= {n}, got {k}")
        fold_of = np.empty(n, dtype=np.int64)
        dealt = np.concatenate(_by_class(labels, rng))
        fold_of[dealt] = np.arange(n) % k
        tests = tuple(np.sort(np.flatnonzero(fold_of == f)) for f in range(k))
        trains = tuple(np.sort(np.flatnonzero(fold_of != f)) for f in range(k))
        return SplitSpec(kind, k, seed, trains, tests)
    if kind == "label_rate":
        if rate is None or not 0 < rate <= 1:
            raise ValueError(f"label rate must lie in (0, 1], got {rate}")
        chosen = [idx[:max(1, round_half_up(rate * len(idx)))] for idx in _by_class(labels, rng)]
        train = np.sort(np.concatenate(chosen))
        return SplitSpec(kind, rate, seed, (train,), (np.setdiff1d(np.arange(n), train),))
    if kind == "kshot":
        if k is None or k < 1:
            raise ValueError(f"kshot needs k >= 1, got {k}")
        parts = []
        for c, idx in zip(np.unique(labels), _by_class(labels, rng)):
            if len(idx) < k:
                raise ValueError(f"class {c} has {len(idx)} graphs, fewer than k={k}")
            parts.append(idx[:k])
        train = np.sort(np.concatenate(parts))
        return SplitSpec(kind, k, seed, (train,), (np.setdiff1d(np.arange(n), train),))
    raise ValueError(f"unknown split kind {kind!r}")


# -- synthetic benchmark ------------------------------------------------------------

def synthetic_motif_dataset(num_graphs: int = 200, seed: int = 0, num_types: int = 5,
                            label_noise: float = 0.0, decoys: int = 0, name: str = "SYNTH") -> DatasetBundle:
    """Two-class molecule-like graphs that differ only in how a three-atom group is wired.

    Every graph is a ring backbone (type 0) with random pendant atoms (types 3+)
    plus one group of a type-1 atom and two type-2 atoms. Class 1 attaches the
    group as a star (1 bonded to both 2s); class 0 as a chain (1-2-2). Node-type
    counts are identically distributed across classes, so only structure separates them.
    ``decoys`` adds further 1-2-2 groups wired at random, which blurs the signal
    (the class is still the wiring of the first group, so the Bayes rate drops below 1).
    """
    if num_types < 4:
        raise ValueError(f"num_types must be >= 4 (ring, group and pendant types), got {num_types}")
    rng = np.random.default_rng(seed)
    graphs = []
    for k in range(num_graphs):
        y = int(k % 2)
        ring = int(rng.integers(5, 9))
        types = [0] * ring
        edges = [(i, (i + 1) % ring) for i in range(ring)]
        for _ in range(int(rng.integers(0, 4))):
            types.append(int(rng.integers(3, num_types)))
            edges.append((int(rng.integers(0, ring)), len(types) - 1))
        for star in [y == 1] + [bool(rng.random() < 0.5) for _ in range(decoys)]:
            a, b, c = len(types), len(types) + 1, len(types) + 2
            types += [1, 2, 2]
            edges.append((int(rng.integers(0, ring)), a))
            edges += [(a, b), (a, c)] if star else [(a, b), (b, c)]
        if rng.random() < label_noise:
            y = 1 - y
        x = np.eye(num_types)[types]
        graphs.append(Graph(x, edges, y, k))
    return DatasetBundle(graphs, 2, "node_label", name, [0, 1])
