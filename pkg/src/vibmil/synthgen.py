"""Synthetic multiple-instance datasets shaped like whole-slide-image bags.

Each bag holds N instances.  Instance latent labels are drawn so that a
positive bag contains a small fraction of positive instances; the bag label is
the maximum latent label.  Latent features are class prototypes plus Gaussian
noise, and the observed (raw) features are a frozen random tanh network
applied to the latent features, standing in for task-agnostic pretrained
embeddings.

On disk a dataset is a directory holding ``manifest.json`` and ``bags.bin``.
Per bag the blob stores N (u64), the N x D float64 features, N u8 latent
labels and one u8 bag label, all little-endian.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "bags.bin"

# severity -> magnitude multipliers, all linear in severity (severity 1..5)
SHIFT_PER_SEVERITY = 0.25  # x feature std along a random unit-RMS direction
NOISE_PER_SEVERITY = 0.10  # x feature std, Gaussian
SCALE_PER_SEVERITY = 0.08  # per-dim factors in [1 - 0.08 s, 1 + 0.08 s]
MIX_PER_SEVERITY = 0.04  # skew generator magnitude of the Cayley rotation
CORRUPTION_KINDS = ("feature_shift", "feature_scale", "additive_noise", "channel_mix")


class DatasetError(ValueError):
    pass


class ChecksumError(DatasetError):
    pass


@dataclass
class BagSample:
    bag_id: int
    instances: np.ndarray  # N x D_raw
    instance_labels: np.ndarray  # N latent labels, evaluation only
    bag_label: int
    positive_fraction: float

    @property
    def n_instances(self) -> int:
        return self.instances.shape[0]


@dataclass
class DatasetConfig:
    n_bags: int = 334
    bag_size_min: int = 512
    bag_size_max: int = 2048
    n_classes: int = 2
    latent_dim: int = 16
    raw_dim: int = 64
    prototype_separation: float = 4.0
    instance_noise_std: float = 1.0
    positive_fraction_min: float = 0.005
    positive_fraction_max: float = 0.05
    warp_depth: int = 2
    warp_gain: float = 1.5
    warp_seed: int = 1234
    seed: int = 0

    def validate(self) -> None:
        if self.n_bags < 1:
            raise DatasetError("n_bags must be >= 1")
        if not 2 <= self.bag_size_min <= self.bag_size_max:
            raise DatasetError("need 2 <= bag_size_min <= bag_size_max")
        if self.n_classes < 2:
            raise DatasetError("n_classes must be >= 2")
        if self.latent_dim < 1 or self.raw_dim < 1 or self.warp_depth < 1:
            raise DatasetError("latent_dim, raw_dim and warp_depth must be >= 1")
        if self.prototype_separation <= 0 or self.instance_noise_std <= 0 or self.warp_gain <= 0:
            raise DatasetError("separation, noise std and warp gain must be > 0")
        if not 0.0 <= self.positive_fraction_min <= self.positive_fraction_max <= 1.0:
            raise DatasetError("need 0 <= positive_fraction_min <= positive_fraction_max <= 1")
        if self.n_classes - 1 > self.latent_dim:
            raise DatasetError("latent_dim must fit one prototype direction per positive class")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class CorruptionSpec:
    kind: str
    severity: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise DatasetError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTION_KINDS}")
        if not 1 <= int(self.severity) <= 5:
            raise DatasetError(f"severity must be in 1..5, got {self.severity}")

    def tag(self) -> str:
        return f"{self.kind}:s{self.severity}:seed{self.seed}"


@dataclass
class Dataset:
    """An ordered list of bags plus provenance (config echo, corruption tag)."""

    bags: list[BagSample]
    config: dict = field(default_factory=dict)
    corruption: str = ""

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    def __getitem__(self, i):
        return self.bags[i]

    @property
    def bag_labels(self) -> np.ndarray:
        return np.array([b.bag_label for b in self.bags], dtype=np.int64)

    def with_bags(self, bags: list[BagSample]) -> "Dataset":
        return Dataset(bags, dict(self.config), self.corruption)


# ----------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class Warp:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __call__(self, z: np.ndarray) -> np.ndarray:
        h = z
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w + b)
        return h


def make_warp(config: DatasetConfig) -> Warp:
    rng = np.random.default_rng([config.warp_seed, 0x57A7])
    dims = [config.latent_dim] + [config.raw_dim] * config.warp_depth
    # latent coordinates are ~N(0, noise^2) around prototypes; normalise the first layer to that scale
    in_scale = [np.sqrt(config.instance_noise_std**2 + config.prototype_separation**2 / config.latent_dim)]
    in_scale += [1.0] * (config.warp_depth - 1)
    weights, biases = [], []
    for i in range(config.warp_depth):
        fan_in = dims[i]
        w = rng.normal(0.0, config.warp_gain / np.sqrt(fan_in) / in_scale[i], size=(dims[i], dims[i + 1]))
        weights.append(w)
        biases.append(rng.normal(0.0, 0.1, size=dims[i + 1]))
    return Warp(tuple(weights), tuple(biases))


def class_prototypes(config: DatasetConfig) -> np.ndarray:
    """C x d prototypes: class 0 at the origin, class c at separation along orthonormal direction c."""
    rng = np.random.default_rng([config.seed, 0x9807])
    q, _ = np.linalg.qr(rng.normal(size=(config.latent_dim, config.latent_dim)))
    protos = np.zeros((config.n_classes, config.latent_dim))
    for c in range(1, config.n_classes):
        protos[c] = config.prototype_separation * q[:, c - 1]
    return protos


def _bag_latent(config: DatasetConfig, bag_id: int, protos: np.ndarray):
    rng = np.random.default_rng([config.seed, bag_id])
    n = int(rng.integers(config.bag_size_min, config.bag_size_max + 1))
    bag_class = int(rng.integers(0, config.n_classes))
    labels = np.zeros(n, dtype=np.uint8)
    if bag_class > 0:
        frac = rng.uniform(config.positive_fraction_min, config.positive_fraction_max)
        n_pos = int(round(frac * n))
        if n_pos == 0 and config.positive_fraction_max > 0:
            n_pos = 1
        labels[rng.choice(n, size=n_pos, replace=False)] = bag_class
    latent = protos[labels] + rng.normal(0.0, config.instance_noise_std, size=(n, config.latent_dim))
    drawn = bag_class if np.any(labels > 0) else 0
    return latent, labels, drawn


def latent_features(config: DatasetConfig, bag_id: int) -> np.ndarray:
    """Regenerate the pre-warp latent features of one bag (oracle features for tests)."""
    latent, _, _ = _bag_latent(config, bag_id, class_prototypes(config))
    return latent


def generate_dataset(config: DatasetConfig) -> Dataset:
    config.validate()
    protos = class_prototypes(config)
    warp = make_warp(config)
    bags = []
    for bag_id in range(config.n_bags):
        latent, labels, drawn = _bag_latent(config, bag_id, protos)
        bag_label = int(labels.max())
        assert bag_label == drawn, "bag label must equal the max latent label"
        bags.append(BagSample(
            bag_id=bag_id,
            instances=warp(latent),
            instance_labels=labels,
            bag_label=bag_label,
            positive_fraction=float(np.count_nonzero(labels) / labels.size),
        ))
    return Dataset(bags, config.to_dict())


# ----------------------------------------------------------------------------
# corruption


def _feature_stats(dataset: Dataset) -> np.ndarray:
    allx = np.concatenate([b.instances for b in dataset.bags], axis=0)
    return allx.std(axis=0)


def corruption_transform(spec: CorruptionSpec, dim: int, feature_std: np.ndarray):
    """Return ``f(bag_id, x) -> x'`` for ``spec``.  Magnitudes scale linearly with severity."""
    rng = np.random.default_rng([spec.seed, CORRUPTION_KINDS.index(spec.kind)])
    s = int(spec.severity)
    if spec.kind == "feature_shift":
        direction = rng.normal(size=dim)
        direction /= np.sqrt(np.mean(direction**2))
        shift = SHIFT_PER_SEVERITY * s * feature_std * direction
        return lambda bag_id, x: x + shift
    if spec.kind == "feature_scale":
        factors = 1.0 + SCALE_PER_SEVERITY * s * rng.uniform(-1.0, 1.0, size=dim)
        return lambda bag_id, x: x * factors
    if spec.kind == "additive_noise":
        sigma = NOISE_PER_SEVERITY * s * feature_std

        def noisy(bag_id, x):
            r = np.random.default_rng([spec.seed, 0xA0, bag_id])
            return x + r.normal(size=x.shape) * sigma

        return noisy
    # channel_mix: Cayley transform of a scaled skew-symmetric matrix is a rotation
    a = rng.normal(size=(dim, dim)) / np.sqrt(dim)
    skew = MIX_PER_SEVERITY * s * (a - a.T) / 2.0
    eye = np.eye(dim)
    rot = np.linalg.solve(eye - skew, eye + skew)
    return lambda bag_id, x: x @ rot


def apply_corruption(dataset: Dataset, spec: CorruptionSpec) -> Dataset:
    """Corrupted copy of ``dataset``; labels are untouched, the input is not modified."""
    if not dataset.bags:
        return dataset.with_bags([])
    dim = dataset.bags[0].instances.shape[1]
    f = corruption_transform(spec, dim, _feature_stats(dataset))
    bags = [dataclasses.replace(b, instances=f(b.bag_id, b.instances),
                                instance_labels=b.instance_labels.copy()) for b in dataset.bags]
    tag = spec.tag() if not dataset.corruption else f"{dataset.corruption}+{spec.tag()}"
    return Dataset(bags, dict(dataset.config), tag)


# ----------------------------------------------------------------------------
# splitting


def split_counts(labels: np.ndarray, ratios: Sequence[float]) -> np.ndarray:
    """Per-class, per-split bag counts (classes x splits).

    Global split sizes come from largest-remainder apportionment; each cell is
    within one bag of ``class_count * ratio``.
    """
    ratios = np.asarray(ratios, dtype=float)
    classes, class_n = np.unique(labels, return_counts=True)
    n = int(class_n.sum())
    sizes = _apportion(n, ratios)
    exact = class_n[:, None] * ratios[None, :]
    counts = np.floor(exact).astype(int)
    row_left = class_n - counts.sum(axis=1)
    col_left = sizes - counts.sum(axis=0)
    frac = exact - counts
    order = sorted(((frac[i, j], -i, -j) for i in range(len(classes)) for j in range(len(ratios))
                    if ratios[j] > 0), reverse=True)
    for _, ni, nj in order:
        i, j = -ni, -nj
        if row_left[i] > 0 and col_left[j] > 0:
            counts[i, j] += 1
            row_left[i] -= 1
            col_left[j] -= 1
    upper = np.ceil(exact - 1e-12).astype(int)
    while row_left.any():  # place greedy leftovers by augmenting paths that respect floor/ceil
        if not _augment(counts, upper, np.floor(exact + 1e-12).astype(int), row_left, col_left):
            raise DatasetError(f"cannot apportion class counts {class_n.tolist()} over ratios {ratios.tolist()}")
    return counts


def _augment(counts, upper, lower, row_left, col_left) -> bool:
    """Move one bag along a row -> column -> row ... path ending at a column with room."""
    n_rows, n_cols = counts.shape
    parent: dict[tuple[str, int], tuple[str, int] | None] = {("r", i): None for i in np.flatnonzero(row_left > 0)}
    queue = list(parent)
    while queue:
        kind, a = queue.pop(0)
        if kind == "r":
            for j in range(n_cols):
                if counts[a, j] < upper[a, j] and ("c", j) not in parent:
                    parent[("c", j)] = (kind, a)
                    if col_left[j] > 0:
                        node = ("c", j)
                        while parent[node] is not None:
                            prev = parent[node]
                            if node[0] == "c":
                                counts[prev[1], node[1]] += 1
                            else:
                                counts[node[1], prev[1]] -= 1
                            node = prev
                        row_left[node[1]] -= 1
                        col_left[j] -= 1
                        return True
                    queue.append(("c", j))
        else:
            for i in range(n_rows):
                if counts[i, a] > lower[i, a] and ("r", i) not in parent:
                    parent[("r", i)] = (kind, a)
                    queue.append(("r", i))
    return False


def _apportion(n: int, ratios: np.ndarray) -> np.ndarray:
    exact = n * ratios
    sizes = np.floor(exact).astype(int)
    rem = n - sizes.sum()
    for j in np.argsort(-(exact - sizes), kind="stable")[:rem]:
        sizes[j] += 1
    return sizes


def split(dataset: Dataset, ratios: Sequence[float], seed: int) -> tuple[Dataset, ...]:
    """Stratified shuffled partition into ``len(ratios)`` datasets (usually train/val/test)."""
    ratios = [float(r) for r in ratios]
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must be non-negative and sum to 1, got {ratios}")
    labels = dataset.bag_labels
    classes = np.unique(labels)
    counts = split_counts(labels, ratios)
    for j, r in enumerate(ratios):
        if r > 0 and np.any(counts[:, j] == 0):
            missing = [int(c) for c, k in zip(classes, counts[:, j]) if k == 0]
            raise DatasetError(f"split {j} (ratio {r}) would receive no bags of class(es) {missing}")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in ratios]
    for i, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        start = 0
        for j, k in enumerate(counts[i]):
            parts[j].extend(idx[start:start + k].tolist())
            start += k
    out = []
    for p in parts:
        # keep a deterministic shuffled order rather than class-sorted blocks
        p = np.array(sorted(p), dtype=int)
        p = p[rng.permutation(p.size)] if p.size else p
        out.append(dataset.with_bags([dataset.bags[k] for k in p]))
    return tuple(out)


# ----------------------------------------------------------------------------
# persistence


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def bag_record_size(n: int, dim: int) -> int:
    return 8 + 8 * n * dim + n + 1


def save_dataset(dataset: Dataset | Iterable[BagSample], path: str | os.PathLike,
                 config: dict | None = None, corruption: str = "") -> Path:
    """Write ``manifest.json`` + ``bags.bin`` into directory ``path``.

    ``dataset`` may be any iterable of bags; bags are streamed to disk one at a
    time, so very large datasets never need to be resident.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if isinstance(dataset, Dataset):
        config = dataset.config if config is None else config
        corruption = corruption or dataset.corruption
    digest = hashlib.sha256()
    records = []
    offset = 0
    dim = None
    fd, tmp = tempfile.mkstemp(dir=root, prefix=f".{BLOB_NAME}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            for bag in dataset:
                x = np.ascontiguousarray(bag.instances, dtype="<f8")
                n, d = x.shape
                if dim is None:
                    dim = d
                elif d != dim:
                    raise DatasetError("all bags must share the feature dimension")
                chunk = (struct.pack("<Q", n) + x.tobytes()
                         + np.asarray(bag.instance_labels, dtype=np.uint8).tobytes()
                         + struct.pack("<B", int(bag.bag_label)))
                fh.write(chunk)
                digest.update(chunk)
                records.append({"bag_id": int(bag.bag_id), "offset": offset, "n_instances": int(n),
                                "positive_fraction": float(bag.positive_fraction)})
                offset += len(chunk)
        os.replace(tmp, root / BLOB_NAME)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "corruption": corruption,
        "n_bags": len(records),
        "feature_dim": dim or 0,
        "blob": BLOB_NAME,
        "blob_bytes": offset,
        "sha256": digest.hexdigest(),
        "bags": records,
    }
    _atomic_write(root / MANIFEST_NAME, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return root


def read_manifest(path: str | os.PathLike) -> dict:
    root = Path(path)
    try:
        return json.loads((root / MANIFEST_NAME).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetError(f"unreadable manifest in {root}: {exc}") from exc


def predicted_blob_size(manifest: dict) -> int:
    return sum(bag_record_size(r["n_instances"], manifest["feature_dim"]) for r in manifest["bags"])


def load_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    manifest = read_manifest(root)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {manifest.get('format_version')}")
    blob = (root / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ChecksumError(f"checksum mismatch for {root / manifest['blob']}")
    dim = manifest["feature_dim"]
    bags = []
    for rec in manifest["bags"]:
        off = rec["offset"]
        (n,) = struct.unpack_from("<Q", blob, off)
        off += 8
        x = np.frombuffer(blob, dtype="<f8", count=n * dim, offset=off).reshape(n, dim).astype(np.float64)
        off += 8 * n * dim
        labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off).copy()
        off += n
        bags.append(BagSample(rec["bag_id"], x, labels, int(blob[off]), rec["positive_fraction"]))
    return Dataset(bags, manifest["config"], manifest.get("corruption", ""))


def dataset_checksum(path: str | os.PathLike) -> str:
    return read_manifest(path)["sha256"]
