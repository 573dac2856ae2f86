"""Few-shot datasets, class splits, episode sampling and the EPDS file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

META_TRAIN, META_VAL, META_TEST = 0, 1, 2
SPLIT_NAMES = {"train": META_TRAIN, "val": META_VAL, "test": META_TEST}
DEFAULT_FRACTIONS = (0.64, 0.16, 0.20)

EPDS_MAGIC = b"EPDS"
EPDS_VERSION = 1


def split_id(split: int | str) -> int:
    if isinstance(split, str):
        try:
            return SPLIT_NAMES[split]
        except KeyError:
            raise ValidationError(f"unknown split {split!r}") from None
    if split not in (META_TRAIN, META_VAL, META_TEST):
        raise ValidationError(f"unknown split {split!r}")
    return int(split)


@dataclass
class Dataset:
    """Per-class sample matrices plus a class -> split assignment.

    ``classes`` maps class id to a ``[count, m]`` float64 array. ``splits``
    may be empty until :func:`make_splits` runs.
    """

    classes: dict[int, np.ndarray]
    splits: dict[int, int] = field(default_factory=dict)
    names: dict[int, str] = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return next(iter(self.classes.values())).shape[1]

    def class_ids(self, split: int | str | None = None) -> list[int]:
        if split is None:
            return sorted(self.classes)
        sid = split_id(split)
        return sorted(c for c, s in self.splits.items() if s == sid)

    def split_counts(self) -> tuple[int, int, int]:
        return tuple(len(self.class_ids(s)) for s in (META_TRAIN, META_VAL, META_TEST))

    def equals(self, other: "Dataset") -> bool:
        if sorted(self.classes) != sorted(other.classes) or self.splits != other.splits:
            return False
        return all(np.array_equal(self.classes[c], other.classes[c]) for c in self.classes)


@dataclass(frozen=True)
class EpisodeSpec:
    """N-way / K-shot / Q-query episode shape.

    ``shots`` may be a ``(low, high)`` range; then ``batch_size`` is fixed and
    the query count is recomputed per episode as ``batch_size / ways - shots``.
    """

    ways: int
    shots: int | tuple[int, int] = 1
    queries: int = 15
    batch_size: int | None = None

    def __post_init__(self):
        if self.ways < 2:
            raise ValidationError("an episode needs at least 2 ways")
        if self.random_shots:
            lo, hi = self.shots
            if lo < 1 or hi < lo:
                raise ValidationError(f"bad shot range {self.shots}")
            if self.batch_size is None or self.batch_size % self.ways:
                raise ValidationError("random shots need a batch size divisible by ways")
            if self.batch_size // self.ways - hi < 1:
                raise ValidationError("batch size leaves no room for queries at the largest shot")
        else:
            if self.shots < 1 or self.queries < 1:
                raise ValidationError("shots and queries must be >= 1")
            expect = self.ways * (self.shots + self.queries)
            if self.batch_size is not None and self.batch_size != expect:
                raise ValidationError(f"batch size {self.batch_size} != N(K+Q) = {expect}")

    @property
    def random_shots(self) -> bool:
        return isinstance(self.shots, tuple)

    @property
    def max_shots(self) -> int:
        return self.shots[1] if self.random_shots else self.shots

    @property
    def samples_per_class(self) -> int:
        """Largest K+Q any episode of this spec needs from one class."""
        if self.random_shots:
            return self.batch_size // self.ways
        return self.shots + self.queries

    def draw(self, rng: np.random.Generator) -> tuple[int, int]:
        if not self.random_shots:
            return self.shots, self.queries
        lo, hi = self.shots
        k = int(rng.integers(lo, hi + 1))
        return k, self.batch_size // self.ways - k


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    classes: tuple[int, ...]
    shots: int
    queries: int
    seed: tuple = ()

    @property
    def ways(self) -> int:
        return self.support_y.shape[1]

    @property
    def batch_size(self) -> int:
        return self.support_x.shape[0] + self.query_x.shape[0]


def episode_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for episode ``index``; counter-based so that any
    episode can be reproduced without replaying its predecessors."""
    return np.random.default_rng([int(seed), int(stream), int(index)])


def make_splits(dataset: Dataset, fractions=DEFAULT_FRACTIONS, seed: int = 0,
                min_classes: int = 2) -> Dataset:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValidationError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    ids = sorted(dataset.classes)
    total = len(ids)
    n_val = int(round(fractions[1] * total))
    n_test = int(round(fractions[2] * total))
    n_train = total - n_val - n_test
    counts = (n_train, n_val, n_test)
    if min(counts) < min_classes:
        raise ValidationError(
            f"{total} classes give split sizes {counts}; each split needs >= {min_classes}"
        )
    order = np.random.default_rng(seed).permutation(total)
    splits = {}
    for pos, i in enumerate(order):
        splits[ids[i]] = META_TRAIN if pos < n_train else META_VAL if pos < n_train + n_val else META_TEST
    return replace(dataset, splits=splits)


def check_dataset(dataset: Dataset, split, spec: EpisodeSpec) -> None:
    ids = dataset.class_ids(split)
    if len(ids) < spec.ways:
        raise ValidationError(f"split {split!r} has {len(ids)} classes; episode needs {spec.ways}")
    need = spec.samples_per_class
    short = [c for c in ids if dataset.classes[c].shape[0] < need]
    if short:
        raise ValidationError(f"classes {short[:5]} have fewer than {need} samples")


def sample_episode(dataset: Dataset, split, spec: EpisodeSpec,
                   rng: np.random.Generator) -> Episode:
    ids = dataset.class_ids(split)
    if len(ids) < spec.ways:
        raise ValidationError(f"split {split!r} has {len(ids)} classes; episode needs {spec.ways}")
    shots, queries = spec.draw(rng)
    chosen = rng.choice(len(ids), size=spec.ways, replace=False)
    n_way = spec.ways
    m = dataset.input_dim
    sx = np.empty((n_way * shots, m))
    qx = np.empty((n_way * queries, m))
    for label, ci in enumerate(chosen):
        samples = dataset.classes[ids[ci]]
        if samples.shape[0] < shots + queries:
            raise ValidationError(
                f"class {ids[ci]} has {samples.shape[0]} samples; episode needs {shots + queries}"
            )
        pick = rng.choice(samples.shape[0], size=shots + queries, replace=False)
        sx[label * shots:(label + 1) * shots] = samples[pick[:shots]]
        qx[label * queries:(label + 1) * queries] = samples[pick[shots:]]
    eye = np.eye(n_way)
    return Episode(
        support_x=sx,
        support_y=np.repeat(eye, shots, axis=0),
        query_x=qx,
        query_y=np.repeat(eye, queries, axis=0),
        classes=tuple(ids[ci] for ci in chosen),
        shots=shots,
        queries=queries,
    )


# ---------------------------------------------------------------------------
# synthetic generators

# Spread at which raw-input nearest-centroid 5-way 1-shot accuracy is about
# 62% for the default generator settings (see benchmarks/pilot_calibration.py).
DEFAULT_SPREAD = 0.15


def _f32(x: np.ndarray) -> np.ndarray:
    # values are stored as f32 on disk; keep memory and disk identical
    return x.astype(np.float32).astype(np.float64)


def gaussian_task_generator(n_classes: int, input_dim: int = 32, spread: float = DEFAULT_SPREAD,
                            nonlinearity_seed: int = 0, seed: int = 0, *,
                            samples_per_class: int = 20, latent_dim: int = 16,
                            nuisance_dim: int = 16, nuisance_scale: float = 2.0,
                            hidden: int = 64) -> Dataset:
    """Gaussian clusters pushed through one shared random nonlinear map.

    Each class has a mean on the unit sphere of a ``latent_dim`` space. A
    sample is the class mean plus isotropic noise of scale ``spread``,
    concatenated with ``nuisance_dim`` class-independent coordinates of scale
    ``nuisance_scale * spread``. The map ``x = tanh(h A + c) B`` is drawn from
    ``nonlinearity_seed`` and shared by every class, so a useful embedding has
    to learn to undo it and to discard the nuisance directions.
    """
    if n_classes < 15:
        raise ValidationError("need at least 15 classes so that every split is usable")
    mrng = np.random.default_rng(nonlinearity_seed)
    d_in = latent_dim + nuisance_dim
    A = mrng.standard_normal((d_in, hidden)) * (2.0 / np.sqrt(d_in))
    c = mrng.uniform(-0.5, 0.5, hidden)
    B = mrng.standard_normal((hidden, input_dim)) / np.sqrt(hidden)

    rng = np.random.default_rng(seed)
    classes = {}
    for cid in range(n_classes):
        mu = rng.standard_normal(latent_dim)
        mu /= np.linalg.norm(mu)
        sig = mu + spread * rng.standard_normal((samples_per_class, latent_dim))
        nuis = nuisance_scale * spread * rng.standard_normal((samples_per_class, nuisance_dim))
        h = np.concatenate([sig, nuis], axis=1)
        classes[cid] = _f32(np.tanh(h @ A + c) @ B)
    return Dataset(classes=classes)


def glyph_task_generator(n_classes: int, grid_size: int = 8, flip_noise: float = 0.1,
                         seed: int = 0, *, samples_per_class: int = 40) -> Dataset:
    """Random binary ``grid x grid`` templates with i.i.d. pixel flips."""
    if grid_size < 8:
        raise ValidationError("grid size must be >= 8")
    if not 0.0 <= flip_noise < 0.5:
        raise ValidationError("flip noise must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    p = grid_size * grid_size
    classes = {}
    for cid in range(n_classes):
        template = rng.random(p) < 0.5
        flips = rng.random((samples_per_class, p)) < flip_noise
        classes[cid] = (template[None, :] ^ flips).astype(np.float64)
    return Dataset(classes=classes)


# ---------------------------------------------------------------------------
# EPDS file format

def save_dataset(dataset: Dataset, path, names: dict[int, str] | None = None,
                 meta: dict | None = None) -> None:
    """Write little-endian EPDS plus an optional ``.meta.json`` sidecar."""
    if not dataset.classes:
        raise ValidationError("cannot save a dataset with no classes")
    m = dataset.input_dim
    missing = [c for c in dataset.classes if c not in dataset.splits]
    if missing:
        raise ValidationError(f"classes {missing[:5]} have no split assignment")
    parts = [EPDS_MAGIC, struct.pack("<BII", EPDS_VERSION, len(dataset.classes), m)]
    for cid in sorted(dataset.classes):
        x = dataset.classes[cid]
        if x.ndim != 2 or x.shape[1] != m:
            raise ValidationError(f"class {cid} has shape {x.shape}; expected [*, {m}]")
        parts.append(struct.pack("<IBI", cid, dataset.splits[cid], x.shape[0]))
        parts.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    names = names if names is not None else dataset.names
    if names or meta:
        sidecar = {"classes": {str(k): v for k, v in sorted(names.items())}}
        if meta:
            sidecar.update(meta)
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated EPDS file while reading {what}", pos)
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != EPDS_MAGIC:
        raise FormatError("bad magic, not an EPDS file", 0)
    (version,) = struct.unpack("<B", take(1, "version"))
    if version != EPDS_VERSION:
        raise FormatError(f"unsupported EPDS version {version}", 4)
    n_classes, m = struct.unpack("<II", take(8, "header"))
    classes, splits = {}, {}
    for _ in range(n_classes):
        start = pos
        cid, split, count = struct.unpack("<IBI", take(9, "class header"))
        if split > META_TEST:
            raise FormatError(f"invalid split code {split}", start + 4)
        if cid in classes:
            raise FormatError(f"duplicate class id {cid}", start)
        payload = take(4 * count * m, f"class {cid} samples")
        classes[cid] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(count, m)
        splits[cid] = split
    if pos != len(data):
        raise FormatError("trailing bytes after last class", pos)
    names = {}
    side = sidecar_path(path)
    if side.exists():
        try:
            names = {int(k): v for k, v in json.loads(side.read_text()).get("classes", {}).items()}
        except (ValueError, AttributeError):
            names = {}
    return Dataset(classes=classes, splits=splits, names=names)
