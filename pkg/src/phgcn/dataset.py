"""Feature-map datasets: PHGF binary I/O, the synthetic generator, stripe pooling."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import SplitMix64

MAGIC = b"PHGF"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")
DEFAULT_LEVELS = (1, 3, 6)


class PHGFError(Exception):
    """Base class for PHGF read/write failures. ``offset`` is the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(PHGFError):
    pass


class UnsupportedVersionError(PHGFError):
    pass


class TruncatedError(PHGFError):
    pass


class NonFiniteError(PHGFError):
    pass


class ShapeError(PHGFError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    levels: tuple[int, ...] = DEFAULT_LEVELS

    def __post_init__(self):
        levels = tuple(int(v) for v in self.levels)
        if not levels or any(v < 1 for v in levels):
            raise ValueError(f"partition levels must be positive, got {levels}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"partition levels must be strictly increasing, got {levels}")
        object.__setattr__(self, "levels", levels)

    @property
    def num_parts(self) -> int:
        return sum(self.levels)

    def check_rows(self, rows: int) -> None:
        for n in self.levels:
            if rows % n:
                raise ValueError(f"rows={rows} is not divisible by partition level {n}")

    def nodes(self) -> list[tuple[int, int]]:
        """(level index, part index) for every node, canonical order."""
        return [(p, i) for p, n in enumerate(self.levels) for i in range(n)]


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray  # rows x cols x dim
    label: int

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class PartFeatureSet:
    vectors: np.ndarray  # N x d, canonical order
    nodes: tuple[tuple[int, int], ...]

    @property
    def num_parts(self) -> int:
        return len(self.nodes)


@dataclass
class Dataset:
    """Stacked feature maps (n, rows, cols, dim) plus labels and a split."""

    features: np.ndarray
    labels: np.ndarray
    split: dict[str, list[int]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        if self.features.ndim != 4:
            raise ShapeError(f"features must be 4-d (n, rows, cols, dim), got shape {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise ShapeError("labels and features disagree in length")
        if not self.split:
            self.split = {"train": [], "query": [], "gallery": list(range(len(self)))}
        for key in ("train", "query", "gallery"):
            self.split.setdefault(key, [])

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> FeatureMap:
        return FeatureMap(self.features[i], int(self.labels[i]))

    @property
    def images(self) -> list[FeatureMap]:
        return [self[i] for i in range(len(self))]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.features.shape[1:])

    def validate_split(self) -> None:
        n = len(self)
        for key, idx in self.split.items():
            if key not in ("train", "query", "gallery"):
                continue
            bad = [i for i in idx if not 0 <= i < n]
            if bad:
                raise ValueError(f"split {key!r} has out-of-range indices {bad[:5]}")
        overlap = set(self.split["query"]) & set(self.split["gallery"])
        if overlap:
            raise ValueError(f"query and gallery overlap on {sorted(overlap)[:5]}")
        gallery_ids = {int(self.labels[i]) for i in self.split["gallery"]}
        missing = sorted({int(self.labels[i]) for i in self.split["query"]} - gallery_ids)
        if missing:
            raise ValueError(f"query identities {missing[:5]} have no gallery image")

    def subset(self, key: str) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(self.split[key], dtype=np.int64)
        return self.features[idx], self.labels[idx]


# --- PHGF I/O ---------------------------------------------------------------


def split_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".split.json")


def write_phgf(dataset: Dataset, path, extra_split_meta: dict | None = None) -> None:
    """Write ``dataset`` as PHGF plus its companion split file."""
    feats = dataset.features
    if len(dataset) == 0:
        raise ShapeError("cannot write an empty dataset")
    n, rows, cols, dim = feats.shape
    if min(rows, cols, dim) < 1:
        raise ShapeError(f"degenerate feature shape {feats.shape[1:]}")
    body = np.empty((n, 1 + rows * cols * dim), dtype="<u4")
    body[:, 0] = dataset.labels.astype("<u4")
    body[:, 1:] = np.ascontiguousarray(feats, dtype="<f4").reshape(n, -1).view("<u4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, rows, cols, dim))
        fh.write(body.tobytes())
    split = {k: [int(i) for i in dataset.split[k]] for k in ("train", "query", "gallery")}
    if extra_split_meta:
        split.update(extra_split_meta)
    split_path(path).write_text(json.dumps(split, indent=2) + "\n")


def read_phgf(path, check_finite: bool = True) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < HEADER.size:
        raise TruncatedError(f"header needs {HEADER.size} bytes, file has {len(data)}", offset=len(data))
    _, version, n, rows, cols, dim = HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported PHGF version {version}", offset=4)
    if min(rows, cols, dim) < 1:
        raise ShapeError(f"degenerate shape rows={rows} cols={cols} dim={dim}", offset=12)
    record = 4 * (1 + rows * cols * dim)
    expected = HEADER.size + n * record
    if len(data) < expected:
        complete = (len(data) - HEADER.size) // record
        raise TruncatedError(
            f"header declares {n} images but payload holds {complete} complete images",
            offset=HEADER.size + complete * record,
        )
    if len(data) > expected:
        raise PHGFError(f"{len(data) - expected} trailing bytes after payload", offset=expected)
    body = np.frombuffer(data, dtype="<u4", count=n * record // 4, offset=HEADER.size).reshape(n, -1)
    labels = body[:, 0].astype(np.uint32)
    feats = body[:, 1:].view("<f4").astype(np.float32).reshape(n, rows, cols, dim)
    if check_finite:
        bad = np.flatnonzero(~np.isfinite(body[:, 1:].view("<f4")).reshape(-1))
        if bad.size:
            img, k = divmod(int(bad[0]), rows * cols * dim)
            offset = HEADER.size + img * record + 4 + 4 * k
            raise NonFiniteError(f"non-finite feature value in image {img}", offset=offset)
    split = {}
    companion = split_path(path)
    if companion.exists():
        raw = json.loads(companion.read_text())
        split = {k: [int(i) for i in raw.get(k, [])] for k in ("train", "query", "gallery")}
    ds = Dataset(feats, labels, split)
    ds.validate_split()
    return ds


# --- synthetic generator ----------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 16
    images_per_identity: int = 12
    rows: int = 24
    cols: int = 8
    dim: int = 32
    noise_sigma: float = 0.5
    corrupt_prob: float = 0.0
    seed: int = 0
    # identities [0, train_identities) go to train; the rest to query/gallery
    train_identities: int | None = None

    def __post_init__(self):
        for name in ("n_identities", "images_per_identity", "rows", "cols", "dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 <= self.corrupt_prob <= 1.0:
            raise ValueError(f"corrupt_prob must lie in [0, 1], got {self.corrupt_prob}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if self.n_identities < 2:
            raise ValueError("n_identities must be at least 2")
        if self.rows % 6:
            raise ValueError(f"rows={self.rows} is not divisible by 6")
        if not 0 <= self.num_train_identities <= self.n_identities:
            raise ValueError("train_identities must lie in [0, n_identities]")

    @property
    def num_train_identities(self) -> int:
        if self.train_identities is None:
            return self.n_identities // 2
        return int(self.train_identities)


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Seeded stripe-prototype dataset with optional stripe occlusion.

    Draw order from one SplitMix64 stream keyed by ``cfg.seed``: all identity
    prototypes (identity-major, stripe, channel), then per image (identity-major):
    noise for every grid row (row, channel), one uniform per stripe for the
    corruption decision, and for each corrupted stripe its full block of
    standard normals (row, col, channel).
    """
    rng = SplitMix64(cfg.seed)
    n_ids, per_id = cfg.n_identities, cfg.images_per_identity
    rows, cols, dim, stripes = cfg.rows, cfg.cols, cfg.dim, 6
    height = rows // stripes

    protos = rng.normal(n_ids * stripes * dim).reshape(n_ids, stripes, dim)
    feats = np.empty((n_ids * per_id, rows, cols, dim), dtype=np.float64)
    labels = np.repeat(np.arange(n_ids, dtype=np.uint32), per_id)
    corrupted = np.zeros((n_ids * per_id, stripes), dtype=bool)
    for ident in range(n_ids):
        for k in range(per_id):
            img = ident * per_id + k
            noise = cfg.noise_sigma * rng.normal(rows * dim).reshape(rows, dim)
            grid = np.repeat(protos[ident], height, axis=0) + noise
            feats[img] = grid[:, None, :]
            hit = rng.uniform(stripes) < cfg.corrupt_prob
            for s in np.flatnonzero(hit):
                block = rng.normal(height * cols * dim).reshape(height, cols, dim)
                feats[img, s * height:(s + 1) * height] = block
            corrupted[img] = hit

    n_train = cfg.num_train_identities
    split = {"train": [], "query": [], "gallery": []}
    for ident in range(n_ids):
        idx = list(range(ident * per_id, (ident + 1) * per_id))
        if ident < n_train:
            split["train"].extend(idx)
        else:
            split["query"].append(idx[0])
            split["gallery"].extend(idx[1:])
    meta = {"synth": dict(cfg.__dict__), "corrupted_stripes": corrupted}
    return Dataset(feats.astype(np.float32), labels, split, meta)


# --- pooling ----------------------------------------------------------------


def pool_parts(features: np.ndarray, spec: PartitionSpec) -> np.ndarray:
    """Average-pool stacked maps (..., rows, cols, dim) into (..., N, dim).

    Accumulates in float64 and returns float64.
    """
    features = np.asarray(features, dtype=np.float64)
    rows = features.shape[-3]
    spec.check_rows(rows)
    out = []
    for n in spec.levels:
        h = rows // n
        blocks = features.reshape(*features.shape[:-3], n, h * features.shape[-2], features.shape[-1])
        out.append(blocks.mean(axis=-2))
    return np.concatenate(out, axis=-2)


def partition_pool(fmap: FeatureMap, spec: PartitionSpec = PartitionSpec()) -> PartFeatureSet:
    vectors = pool_parts(fmap.values, spec)
    return PartFeatureSet(vectors, tuple(spec.nodes()))
