"""Domain streams: a seeded synthetic location-shift generator, raw-feature
ingestion from a CSV manifest, and the per-class adaptation sample picker.

Synthetic samples are spectrogram-like 16x16x1 patches: a class-specific
spectral envelope modulated in time, randomly rolled along the time axis,
scaled, and corrupted by Gaussian noise. A location is an affine map
``x -> scale * x + offset`` applied per input channel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SCENES = (
    "airport",
    "shopping_mall",
    "metro_station",
    "street_pedestrian",
    "public_square",
    "street_traffic",
    "tram",
    "bus",
    "metro",
    "park",
)
SEVERE_SCENES = ("bus", "park", "metro", "metro_station")

# (scale range, offset range, noise multiplier)
SEVERITY_PRESETS = {
    "mild": ((0.9, 1.1), (-0.1, 0.1), 1.0),
    "moderate": ((0.7, 1.4), (-0.5, 0.5), 1.0),
    "severe": ((0.4, 2.5), (-1.0, 1.0), 2.0),
}

BASE_NOISE = 0.6
FEATURE_SHAPE = (16, 16, 1)

# spawn-key tags for the RNG substreams
_PATTERNS, _TRAIN, _TEST, _SHIFT, _SELECT = 0, 1, 2, 3, 4


def _rng(global_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(global_seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class Shift:
    scale: tuple[float, ...]
    offset: tuple[float, ...]
    noise: float

    @property
    def is_identity(self) -> bool:
        return all(a == 1.0 for a in self.scale) and all(b == 0.0 for b in self.offset)


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    name: str
    classes: tuple[str, ...] = SCENES
    n_train: int = 100
    n_test: int = 100
    seed: int = 0
    severity: str | None = None
    scale: tuple[float, ...] | None = None
    offset: tuple[float, ...] | None = None
    noise: float = BASE_NOISE
    n_locations: int = 1
    adapt_per_class: int = 1
    # no train split: adaptation samples come from the test split instead
    adapt_from_test: bool = False

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        unknown = [c for c in self.classes if c not in SCENES]
        if unknown:
            raise ConfigError(f"domain {self.name}: unknown class ids {unknown}")
        if not self.classes or len(set(self.classes)) != len(self.classes):
            raise ConfigError(f"domain {self.name}: class list must be nonempty and unique")
        if self.n_test < 1 or self.n_train < 0 or (self.n_train == 0 and not self.adapt_from_test):
            raise ConfigError(f"domain {self.name}: need n_test >= 1 and n_train >= 1 (or adapt_from_test)")
        if self.severity is not None and self.severity not in SEVERITY_PRESETS:
            raise ConfigError(f"domain {self.name}: unknown severity {self.severity!r}")
        if self.severity is not None and (self.scale is not None or self.offset is not None):
            raise ConfigError(f"domain {self.name}: give either a severity preset or explicit scale/offset")
        for name in ("scale", "offset"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(float(a) for a in np.atleast_1d(v)))
        if self.scale is not None and min(self.scale) <= 0:
            raise ConfigError(f"domain {self.name}: scale entries must be positive")
        if self.noise <= 0 or self.n_locations < 1 or self.adapt_per_class < 1:
            raise ConfigError(f"domain {self.name}: noise, n_locations and adapt_per_class must be positive")

    @property
    def has_train(self) -> bool:
        return self.n_train > 0

    @property
    def class_indices(self) -> np.ndarray:
        return np.array([SCENES.index(c) for c in self.classes])

    @property
    def k(self) -> int:
        return self.adapt_per_class * len(self.classes)

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "name": self.name,
            "classes": list(self.classes),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "seed": self.seed,
            "severity": self.severity,
            "scale": list(self.scale) if self.scale is not None else None,
            "offset": list(self.offset) if self.offset is not None else None,
            "noise": self.noise,
            "n_locations": self.n_locations,
            "adapt_per_class": self.adapt_per_class,
            "adapt_from_test": self.adapt_from_test,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        for key in ("classes", "scale", "offset"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if "classes" not in d:
            d["classes"] = SCENES
        return cls(**d)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray  # indices into SCENES
    split: str
    domain_id: int
    classes: tuple[str, ...] = SCENES

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} labels")
        allowed = {SCENES.index(c) for c in self.classes}
        if not set(np.unique(self.y).tolist()) <= allowed:
            raise DataError(f"domain {self.domain_id}: labels outside the class list")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return replace(self, x=self.x[idx], y=self.y[idx])


@dataclass
class Domain:
    spec: DomainSpec
    train: Dataset | None
    test: Dataset

    @property
    def domain_id(self):
        return self.spec.domain_id


# ---------------------------------------------------------------------------
# synthetic generator


def class_patterns(global_seed: int, shape=FEATURE_SHAPE) -> np.ndarray:
    """Deterministic (n_classes, H, W) clean patterns: spectral envelope x temporal modulation."""
    rng = _rng(global_seed, _PATTERNS)
    h, w = shape[0], shape[1]
    f = np.arange(h)[:, None]
    t = np.arange(w)[None, :]
    out = np.empty((len(SCENES), h, w))
    for c in range(len(SCENES)):
        centers = rng.uniform(0, h - 1, size=2)
        widths = rng.uniform(1.0, 3.0, size=2)
        heights = rng.uniform(0.5, 1.5, size=2)
        env = sum(a * np.exp(-0.5 * ((f - mu) / s) ** 2) for a, mu, s in zip(heights, centers, widths))
        rate = rng.integers(1, 5)
        depth = rng.uniform(0.3, 1.0)
        out[c] = env * (1.0 + depth * np.sin(2 * math.pi * rate * t / w))
    return out


def _clean_samples(patterns, labels, rng, noise) -> np.ndarray:
    n = len(labels)
    h, w = patterns.shape[1:]
    x = np.empty((n, h, w))
    rolls = rng.integers(0, w, size=n)
    amps = rng.uniform(0.8, 1.2, size=n)
    for i in range(n):
        x[i] = amps[i] * np.roll(patterns[labels[i]], rolls[i], axis=1)
    x += noise * rng.standard_normal(x.shape)
    return x[..., None]


def _balanced_labels(class_idx: np.ndarray, n: int, rng) -> np.ndarray:
    return class_idx[rng.permutation(np.arange(n) % len(class_idx))]


def location_shifts(spec: DomainSpec, global_seed: int) -> list[Shift]:
    channels = FEATURE_SHAPE[-1]
    if spec.severity is None:
        scale = spec.scale if spec.scale is not None else (1.0,) * channels
        offset = spec.offset if spec.offset is not None else (0.0,) * channels
        return [Shift(scale, offset, spec.noise)] * spec.n_locations
    (a_lo, a_hi), (b_lo, b_hi), noise_mult = SEVERITY_PRESETS[spec.severity]
    rng = _rng(global_seed, spec.seed, _SHIFT)
    shifts = []
    for _ in range(spec.n_locations):
        a = rng.uniform(a_lo, a_hi, size=channels)
        b = rng.uniform(b_lo, b_hi, size=channels)
        shifts.append(Shift(tuple(a.tolist()), tuple(b.tolist()), spec.noise * noise_mult))
    return shifts


def _generate_split(spec, global_seed, n, tag, patterns, shifts) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(global_seed, spec.seed, tag)
    labels = _balanced_labels(spec.class_indices, n, rng)
    location = np.arange(n) % len(shifts)
    x = np.empty((n,) + FEATURE_SHAPE)
    # one clean draw per location keeps the substream layout independent of the shift values
    for loc, shift in enumerate(shifts):
        idx = np.flatnonzero(location == loc)
        clean = _clean_samples(patterns, labels[idx], rng, shift.noise)
        if not shift.is_identity:
            clean = np.asarray(shift.scale) * clean + np.asarray(shift.offset)
        x[idx] = clean
    return x.astype(np.float32), labels


def gen_synthetic_domain(spec: DomainSpec, global_seed: int = 0) -> Domain:
    """Train/test datasets for one synthetic domain; a pure function of (seed, spec)."""
    patterns = class_patterns(global_seed)
    shifts = location_shifts(spec, global_seed)
    train = None
    if spec.has_train:
        x, y = _generate_split(spec, global_seed, spec.n_train, _TRAIN, patterns, shifts)
        train = Dataset(x, y, "train", spec.domain_id, spec.classes)
    x, y = _generate_split(spec, global_seed, spec.n_test, _TEST, patterns, shifts)
    return Domain(spec, train, Dataset(x, y, "test", spec.domain_id, spec.classes))


def gen_clean_domain(spec: DomainSpec, global_seed: int = 0) -> Domain:
    """The same draws as :func:`gen_synthetic_domain` with every location shift removed."""
    return gen_synthetic_domain(replace(spec, severity=None, scale=None, offset=None), global_seed)


def default_stream_specs() -> list[DomainSpec]:
    """Six domains: a pooled six-location base, three shifted locations, one
    test-only location, and a severe four-class location with more data."""
    return [
        DomainSpec(1, "six-locations", n_train=480, n_test=300, seed=1, severity="mild", n_locations=6),
        DomainSpec(2, "location-2", n_train=100, n_test=100, seed=2, severity="mild"),
        DomainSpec(3, "location-3", n_train=100, n_test=100, seed=3, severity="moderate"),
        DomainSpec(4, "location-4", n_train=100, n_test=100, seed=4, severity="moderate"),
        DomainSpec(5, "location-5-test-only", n_train=0, n_test=100, seed=5, severity="moderate",
                   adapt_from_test=True),
        DomainSpec(6, "severe-location", classes=SEVERE_SCENES, n_train=320, n_test=160, seed=6,
                   severity="severe", adapt_per_class=2),
    ]


# ---------------------------------------------------------------------------
# adaptation sample selection


def select_adaptation_samples(data: Dataset, per_class: int, seed: int, classes=None) -> list[tuple[np.ndarray, int]]:
    """``per_class`` samples of every class, drawn uniformly without replacement.

    Returned in class-interleaved order (one of each class, then the next
    round), so that a running adaptation sees every class early.
    """
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    classes = data.classes if classes is None else tuple(classes)
    rng = _rng(seed, _SELECT, data.domain_id)
    picks = []
    for name in classes:
        c = SCENES.index(name)
        idx = np.flatnonzero(data.y == c)
        if len(idx) < per_class:
            raise DataError(f"class {name!r} has {len(idx)} samples in domain {data.domain_id}, need {per_class}")
        picks.append(rng.choice(idx, size=per_class, replace=False))
    order = np.stack(picks, axis=1).reshape(-1)  # round-robin over classes
    return [(data.x[i], int(data.y[i])) for i in order]


def selection_indices(data: Dataset, per_class: int, seed: int, classes=None) -> np.ndarray:
    """Dataset indices that :func:`select_adaptation_samples` would return."""
    classes = data.classes if classes is None else tuple(classes)
    rng = _rng(seed, _SELECT, data.domain_id)
    picks = [rng.choice(np.flatnonzero(data.y == SCENES.index(n)), size=per_class, replace=False) for n in classes]
    return np.stack(picks, axis=1).reshape(-1)


# ---------------------------------------------------------------------------
# feature files + manifest

MANIFEST_NAME = "manifest.csv"


@dataclass
class FeatureManifest:
    root: Path
    rows: list[tuple[str, str, str]]  # (relative path, label, split)
    shape: tuple[int, ...] = FEATURE_SHAPE
    dtype: str = "<f4"
    meta: dict = field(default_factory=dict)

    @classmethod
    def read(cls, path) -> "FeatureManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        meta = {}
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
        body_start = 0
        for body_start, line in enumerate(lines):
            if not line.startswith("#"):
                break
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
        else:
            body_start = len(lines)
        if "shape" not in meta:
            raise DataError(f"{path}: header block must declare '# shape: H,W,C'")
        shape = tuple(int(s) for s in meta["shape"].split(","))
        dtype = meta.get("dtype", "<f4")
        if dtype != "<f4":
            raise DataError(f"{path}: only little-endian float32 features are supported, got {dtype}")
        reader = csv.reader(lines[body_start:])
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise DataError(f"{path}: expected CSV header 'path,label,split', got {header}")
        rows = [tuple(r) for r in reader if r]
        for i, r in enumerate(rows, start=1):
            if len(r) != 3:
                raise DataError(f"{path}: row {i} has {len(r)} fields, expected 3")
        return cls(path.parent, rows, shape, dtype, meta)

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        lines = [f"# {k}: {v}" for k, v in self.meta.items() if k not in ("shape", "dtype")]
        lines += [f"# shape: {','.join(map(str, self.shape))}", f"# dtype: {self.dtype}"]
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "label", "split"])
            w.writerows(self.rows)
        return path


def load_feature_dir(manifest: FeatureManifest | str | Path, domain_id: int | None = None) -> tuple[Dataset | None, Dataset]:
    """(train or None, test) in manifest row order; errors name the offending row."""
    if not isinstance(manifest, FeatureManifest):
        manifest = FeatureManifest.read(manifest)
    if not manifest.rows:
        raise DataError(f"{manifest.root}: manifest has no rows")
    if domain_id is None:
        domain_id = int(manifest.meta.get("domain_id", 0))
    count = int(np.prod(manifest.shape))
    parts = {"train": ([], []), "test": ([], [])}
    for i, (rel, label, split) in enumerate(manifest.rows, start=1):
        if label not in SCENES:
            raise DataError(f"row {i}: unknown label {label!r}")
        if split not in parts:
            raise DataError(f"row {i}: unknown split {split!r}")
        fpath = manifest.root / rel
        if not fpath.is_file():
            raise DataError(f"row {i}: missing file {fpath}")
        raw = np.fromfile(fpath, dtype="<f4")
        if raw.size != count:
            raise DataError(f"row {i}: {fpath} holds {raw.size} values, declared shape {manifest.shape} needs {count}")
        parts[split][0].append(raw.reshape(manifest.shape).astype(np.float32))
        parts[split][1].append(SCENES.index(label))
    if "classes" in manifest.meta:
        classes = tuple(manifest.meta["classes"].split(";"))
    else:
        present = set(parts["train"][1]) | set(parts["test"][1])
        classes = tuple(c for i, c in enumerate(SCENES) if i in present)

    def build(split):
        xs, ys = parts[split]
        if not xs:
            return None
        return Dataset(np.stack(xs), np.array(ys, dtype=np.int64), split, domain_id, classes)

    test = build("test")
    if test is None:
        raise DataError(f"{manifest.root}: manifest has no test rows")
    return build("train"), test


def export_domain(domain: Domain, root) -> FeatureManifest:
    """Write one raw float32 file per sample plus the manifest; inverse of :func:`load_feature_dir`."""
    root = Path(root)
    rows = []
    for data in (domain.train, domain.test):
        if data is None:
            continue
        (root / data.split).mkdir(parents=True, exist_ok=True)
        for i in range(len(data)):
            rel = f"{data.split}/{i:06d}.f32"
            np.asarray(data.x[i], dtype="<f4").tofile(root / rel)
            rows.append((rel, SCENES[int(data.y[i])], data.split))
    meta = {"domain_id": domain.domain_id, "name": domain.spec.name, "classes": ";".join(domain.spec.classes)}
    manifest = FeatureManifest(root, rows, tuple(domain.test.x.shape[1:]), "<f4", meta)
    manifest.write()
    return manifest
