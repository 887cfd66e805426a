"""Procedural glyph-classification data and analytic weather corruptions.

Every image is a class-determined glyph (shape family x fill pattern) drawn at
a random position, scale and rotation over a smooth textured background.
Pixels are float32 in [0, 1], CHW layout. Each image has its own RNG derived
from ``(seed, split, index)``, so generation order never matters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .binio import read_array_file, write_array_file
from .errors import ConfigError, DataError

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}

SHAPES = ("disk", "triangle", "cross", "square", "bar", "ellipse")
FILLS = ("solid", "hollow")
KINDS = ("clear", "fog", "rain", "snow")

MIN_IMAGE_SIZE = 16
FOG_LUMINANCE = 0.9
HOLLOW_INNER = 0.5


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 8
    channels: int = 3
    height: int = 32
    width: int = 32
    n_train: int = 4000
    n_val: int = 400
    n_test: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.n_classes > len(SHAPES) * len(FILLS):
            raise ConfigError(f"at most {len(SHAPES) * len(FILLS)} glyph classes are available")
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ConfigError("split counts must be positive")
        if self.channels <= 0:
            raise ConfigError("channels must be positive")
        if min(self.height, self.width) < MIN_IMAGE_SIZE:
            raise ConfigError(f"images smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE} cannot hold a glyph")

    def count(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


_DEFAULT_DOMAIN_SEEDS = {"clear": 0, "fog": 101, "rain": 202, "snow": 303}


@dataclass(frozen=True)
class DomainSpec:
    kind: str = "clear"
    severity: float | None = None  # None picks 0.8 for corruptions, 0 for clear
    seed: int | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown domain kind {self.kind!r}; expected one of {KINDS}")
        sev = self.severity
        if self.kind == "clear":
            sev = 0.0
        elif sev is None:
            sev = 0.8
        if not 0.0 <= sev <= 1.0:
            raise ConfigError(f"severity must lie in [0, 1], got {sev}")
        object.__setattr__(self, "severity", float(sev))
        if self.seed is None:
            object.__setattr__(self, "seed", _DEFAULT_DOMAIN_SEEDS[self.kind])

    @property
    def task_id(self) -> str:
        return self.name or self.kind


def default_domains(severities: dict[str, float] | None = None) -> list[DomainSpec]:
    severities = severities or {}
    return [DomainSpec(k, severities.get(k)) for k in KINDS]


@dataclass
class Split:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class LabeledDataset:
    spec: DatasetSpec
    splits: dict[str, Split]

    def __getitem__(self, split: str) -> Split:
        return self.splits[split]


@dataclass
class Task:
    task_id: str
    domain: DomainSpec
    splits: dict[str, Split]

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def val(self) -> Split:
        return self.splits["val"]

    @property
    def test(self) -> Split:
        return self.splits["test"]


@dataclass
class TaskSequence:
    tasks: list[Task]
    classes: tuple[int, ...]
    spec: DatasetSpec = field(default_factory=DatasetSpec)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> Task:
        if isinstance(i, str):
            for t in self.tasks:
                if t.task_id == i:
                    return t
            raise KeyError(f"no task {i!r} in sequence")
        return self.tasks[i]

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]


# ---------------------------------------------------------------- base images


def _image_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_CODE[split], index])


def _smooth_noise(rng: np.random.Generator, channels: int, h: int, w: int, cells: int = 4) -> np.ndarray:
    """Bilinear upsampling of a coarse random grid."""
    grid = rng.random((channels, cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[:, y0][:, :, x0]
    g01 = grid[:, y0][:, :, x0 + 1]
    g10 = grid[:, y0 + 1][:, :, x0]
    g11 = grid[:, y0 + 1][:, :, x0 + 1]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


def _silhouette(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    if shape == "disk":
        return u * u + v * v <= 1.0
    if shape == "square":
        return np.maximum(au, av) <= 0.8
    if shape == "triangle":
        return (v >= -0.5) & (v <= 1.0 - np.sqrt(3.0) * au)
    if shape == "cross":
        return ((au <= 0.3) & (av <= 0.95)) | ((av <= 0.3) & (au <= 0.95))
    if shape == "bar":
        return (au <= 1.0) & (av <= 0.45)
    if shape == "ellipse":
        return u * u + 4.0 * v * v <= 1.0
    raise ConfigError(f"unknown shape {shape!r}")


def glyph_mask(shape: str, fill: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Boolean mask of a glyph in its own normalized, rotated frame (radius 1)."""
    inside = _silhouette(shape, u, v)
    if fill == "hollow":
        inside &= ~_silhouette(shape, u / HOLLOW_INNER, v / HOLLOW_INNER)
    return inside


def class_glyph(label: int) -> tuple[str, str]:
    return SHAPES[label // len(FILLS)], FILLS[label % len(FILLS)]


def render_image(spec: DatasetSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    c, h, w = spec.channels, spec.height, spec.width
    base = rng.uniform(0.05, 0.35, size=(c, 1, 1))
    img = base + 0.2 * (_smooth_noise(rng, c, h, w) - 0.5) + 0.02 * rng.standard_normal((c, h, w))

    size = min(h, w)
    radius = rng.uniform(0.28, 0.38) * size
    cy = rng.uniform(0.5 * size - 0.15 * size, 0.5 * size + 0.15 * size) * h / size
    cx = rng.uniform(0.5 * size - 0.15 * size, 0.5 * size + 0.15 * size) * w / size
    theta = rng.uniform(-np.pi / 6, np.pi / 6)
    color = rng.uniform(0.6, 1.0, size=(c, 1, 1))

    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = (yy - cy) / radius, (xx - cx) / radius
    cos, sin = np.cos(theta), np.sin(theta)
    u = cos * dx + sin * dy
    v = -sin * dx + cos * dy
    mask = glyph_mask(*class_glyph(label), u, v)
    img = np.where(mask[None], color, img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_split(spec: DatasetSpec, split: str) -> Split:
    n = spec.count(split)
    labels = np.arange(n, dtype=np.int64) % spec.n_classes
    images = np.empty((n, spec.channels, spec.height, spec.width), dtype=np.float32)
    for i in range(n):
        images[i] = render_image(spec, int(labels[i]), _image_rng(spec.seed, split, i))
    return Split(images, labels)


def gen_base(spec: DatasetSpec = DatasetSpec()) -> LabeledDataset:
    return LabeledDataset(spec, {s: gen_split(spec, s) for s in SPLITS})


# ---------------------------------------------------------------- corruptions


def apply_fog(image: np.ndarray, severity: float, seed: int | None = None) -> np.ndarray:
    """Blend towards a constant haze, denser towards the top of the image."""
    _check_severity(severity)
    if severity == 0:
        return image.copy()
    h = image.shape[-2]
    g = 1.0 - np.arange(h) / max(h - 1, 1)  # 1 at the top row, 0 at the bottom
    alpha = (severity * (0.5 + 0.5 * g))[:, None]
    out = (1.0 - alpha) * image + alpha * FOG_LUMINANCE
    return out.astype(image.dtype)


def _box_blur3(image: np.ndarray) -> np.ndarray:
    p = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = image.shape[-2:]
    return sum(p[:, i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0


def rain_streaks(shape: tuple[int, int], severity: float, seed) -> list[tuple[float, float, float, float, float]]:
    """Streak geometry: (x0, y0, x1, y1, opacity) per streak, shared angle."""
    h, w = shape
    n = int(round(severity * 60))
    rng = np.random.default_rng(seed)
    angle = np.deg2rad(rng.uniform(60.0, 80.0))
    lengths = rng.uniform(0.2, 0.45, n) * min(h, w)
    x0 = rng.uniform(-0.2 * w, w, n)
    y0 = rng.uniform(-0.2 * h, h, n)
    opacity = rng.uniform(0.5, 0.8, n)
    x1 = x0 + lengths * np.cos(angle)
    y1 = y0 + lengths * np.sin(angle)
    return [tuple(map(float, t)) for t in zip(x0, y0, x1, y1, opacity)]


def apply_rain(image: np.ndarray, severity: float, seed) -> np.ndarray:
    """Bright semi-transparent streaks at a shared slant, then a light blur."""
    _check_severity(severity)
    if severity == 0:
        return image.copy()
    h, w = image.shape[-2:]
    streaks = rain_streaks((h, w), severity, seed)
    out = image.astype(np.float64)
    if streaks:
        s = np.array(streaks)
        px = (np.arange(w) + 0.5)[None, None, :]
        py = (np.arange(h) + 0.5)[None, :, None]
        ax, ay, bx, by, op = (s[:, k, None, None] for k in range(5))
        dx, dy = bx - ax, by - ay
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
        dist2 = (px - ax - t * dx) ** 2 + (py - ay - t * dy) ** 2
        coverage = np.where(dist2 <= 0.36, op, 0.0).max(axis=0)
        out = (1.0 - coverage) * out + coverage * 0.95
    blur = 0.5 * severity
    out = (1.0 - blur) * out + blur * _box_blur3(out)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def apply_snow(image: np.ndarray, severity: float, seed) -> np.ndarray:
    """Brightness lift plus white 1-2 px flakes covering ``0.1 * severity`` of pixels."""
    _check_severity(severity)
    if severity == 0:
        return image.copy()
    h, w = image.shape[-2:]
    rng = np.random.default_rng(seed)
    out = np.clip(image + severity * 0.15, 0.0, 1.0)
    target = int(round(severity * 0.10 * h * w))
    flakes = np.zeros((h, w), dtype=bool)
    covered = 0
    while covered < target:
        y, x = int(rng.integers(h)), int(rng.integers(w))
        size = int(rng.integers(1, 3))
        patch = flakes[y : y + size, x : x + size]
        covered += int(patch.size - patch.sum())
        patch[...] = True
    out[:, flakes] = 1.0
    return out.astype(image.dtype)


def _check_severity(severity: float) -> None:
    if not 0.0 <= severity <= 1.0:
        raise ConfigError(f"severity must lie in [0, 1], got {severity}")


def corrupt(image: np.ndarray, domain: DomainSpec, split: str, index: int) -> np.ndarray:
    seed = [domain.seed, _SPLIT_CODE[split], index]
    if domain.kind == "clear" or domain.severity == 0:
        return image.copy()
    if domain.kind == "fog":
        return apply_fog(image, domain.severity)
    if domain.kind == "rain":
        return apply_rain(image, domain.severity, seed)
    return apply_snow(image, domain.severity, seed)


def make_sequence(dataset: LabeledDataset, domain_specs: list[DomainSpec]) -> TaskSequence:
    if not domain_specs:
        raise ConfigError("a task sequence needs at least one domain")
    if domain_specs[0].kind != "clear":
        raise ConfigError("the first task of a sequence must be the clear domain")
    ids = [d.task_id for d in domain_specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate task ids in {ids}")
    tasks = []
    for domain in domain_specs:
        splits = {}
        for name, split in dataset.splits.items():
            imgs = np.empty_like(split.images)
            for i in range(len(split)):
                imgs[i] = corrupt(split.images[i], domain, name, i)
            splits[name] = Split(imgs, split.labels.copy())
        tasks.append(Task(domain.task_id, domain, splits))
    return TaskSequence(tasks, tuple(range(dataset.spec.n_classes)), dataset.spec)


def build_sequence(spec: DatasetSpec = DatasetSpec(), domains: list[DomainSpec] | None = None) -> TaskSequence:
    return make_sequence(gen_base(spec), domains if domains is not None else default_domains())


# ---------------------------------------------------------------- persistence


def save_sequence(seq: TaskSequence, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = {
        "dataset": asdict(seq.spec),
        "tasks": [{"task_id": t.task_id, "domain": asdict(t.domain)} for t in seq.tasks],
    }
    (root / "sequence.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    for task in seq.tasks:
        for name, split in task.splits.items():
            d = root / task.task_id / name
            d.mkdir(parents=True, exist_ok=True)
            manifest = {
                "task_id": task.task_id,
                "split": name,
                "dataset": asdict(seq.spec),
                "domain": asdict(task.domain),
                "count": len(split),
                "shape": list(split.images.shape[1:]),
                "labels": split.labels.tolist(),
            }
            (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
            write_array_file(d / "images.bin", {"images": split.images})


def load_sequence(root) -> TaskSequence:
    root = Path(root)
    try:
        index = json.loads((root / "sequence.json").read_text())
    except FileNotFoundError:
        raise DataError(f"no task sequence found under {root}") from None
    spec = DatasetSpec(**index["dataset"])
    tasks = []
    for entry in index["tasks"]:
        domain = DomainSpec(**entry["domain"])
        splits = {}
        for name in SPLITS:
            d = root / entry["task_id"] / name
            manifest = json.loads((d / "manifest.json").read_text())
            images = read_array_file(d / "images.bin")["images"].reshape([manifest["count"], *manifest["shape"]])
            splits[name] = Split(images, np.array(manifest["labels"], dtype=np.int64))
        tasks.append(Task(entry["task_id"], domain, splits))
    return TaskSequence(tasks, tuple(range(spec.n_classes)), spec)


def export_png(split: Split, out_dir, count: int = 16) -> list[Path]:
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(min(count, len(split))):
        arr = (np.clip(split.images[i].transpose(1, 2, 0), 0, 1) * 255).round().astype(np.uint8)
        if arr.shape[-1] == 1:
            arr = arr[..., 0]
        p = out_dir / f"{i:05d}_label{int(split.labels[i])}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths
