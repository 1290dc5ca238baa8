"""Datasets, subject-independent folds, crop/flip augmentation and the toy corpus."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

FNIM_MAGIC = b"FNIM"
FNIM_VERSION = 1
_FNIM_HEADER = struct.Struct("<4sIIII")

EXPRESSIONS = ("An", "Co", "Di", "Fe", "Ha", "Sa", "Su", "Ne")

# per-class image counts from the public datasets, kept as reference metadata
REFERENCE_CLASS_COUNTS = {
    "CK+": {"An": 135, "Co": 54, "Di": 177, "Fe": 75, "Ha": 147, "Sa": 84, "Su": 249, "Ne": 327},
    "Oulu-CASIA": {"An": 240, "Di": 240, "Fe": 240, "Ha": 240, "Sa": 240, "Su": 240},
    "TFD": {"An": 437, "Di": 457, "Fe": 424, "Ha": 758, "Sa": 441, "Su": 459, "Ne": 1202},
    "SFEW": {"An": 255, "Di": 75, "Fe": 124, "Ha": 256, "Sa": 234, "Su": 150, "Ne": 228},
}
# published totals, kept verbatim even where they disagree with the per-class rows:
# the CK+ classes sum to 1248 against a stated 1308, and Oulu-CASIA is listed as
# 1444 in one place and 1440 in another (its classes sum to 1440)
REFERENCE_TOTALS = {"CK+": 1308, "Oulu-CASIA": (1444, 1440), "TFD": 4178, "SFEW": 1322}


# -- image files ----------------------------------------------------------------
def write_fnim(path, image):
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise ValueError(f"FNIM images are C x H x W, got shape {image.shape}")
    c, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(_FNIM_HEADER.pack(FNIM_MAGIC, FNIM_VERSION, c, h, w))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_fnim(path):
    blob = Path(path).read_bytes()
    if len(blob) < _FNIM_HEADER.size:
        raise FormatError(f"{path}: truncated FNIM header")
    magic, version, c, h, w = _FNIM_HEADER.unpack_from(blob)
    if magic != FNIM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FNIM_VERSION:
        raise FormatError(f"{path}: unsupported FNIM version {version}")
    count = c * h * w
    if count == 0 or len(blob) != _FNIM_HEADER.size + 4 * count:
        raise FormatError(f"{path}: payload size does not match {c}x{h}x{w}")
    return np.frombuffer(blob, dtype="<f4", offset=_FNIM_HEADER.size).reshape(c, h, w).astype(np.float32)


def read_image(path):
    """C x H x W float32 image from FNIM, or from a PGM/PPM scaled to [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im)
            full = 65535.0 if arr.dtype == np.uint16 or im.mode.startswith("I") else 255.0
        arr = arr.astype(np.float32) / full
        return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1).copy()
    return read_fnim(path)


# -- datasets -------------------------------------------------------------------
@dataclass
class LabeledImage:
    id: int
    subject: object
    label: int
    pixels: np.ndarray


class Dataset:
    """Images (N x C x H x W, values in [0, 1]) with subject ids and labels.

    ``labels`` is an instrumented property: every read increments
    ``label_reads`` so callers can prove a code path never touched them.
    """

    def __init__(self, images, labels, subjects, class_names, paths=None, pixel_mean=0.0):
        self.images = np.asarray(images, dtype=np.float32)
        self._labels = np.asarray(labels, dtype=np.int64)
        self.subjects = np.asarray(subjects)
        self.class_names = list(class_names)
        self.paths = list(paths) if paths is not None else None
        self.pixel_mean = float(pixel_mean)
        self.ids = np.arange(len(self.images))
        self.label_reads = 0
        if not (len(self.images) == len(self._labels) == len(self.subjects)):
            raise DataError("images, labels and subjects must have equal length")
        if len(self._labels) and (self._labels.min() < 0 or self._labels.max() >= len(self.class_names)):
            raise DataError(f"labels must lie in [0, {len(self.class_names)})")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return LabeledImage(int(self.ids[i]), self.subjects[i], int(self.labels[i]), self.images[i])

    @property
    def labels(self):
        self.label_reads += 1
        return self._labels

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def inputs(self, indices=None):
        x = self.images if indices is None else self.images[indices]
        return x - np.float32(self.pixel_mean) if self.pixel_mean else x

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        paths = [self.paths[i] for i in indices] if self.paths is not None else None
        sub = Dataset(self.images[indices], self._labels[indices], self.subjects[indices],
                      self.class_names, paths, self.pixel_mean)
        sub.ids = self.ids[indices]
        return sub

    def class_counts(self):
        counts = np.bincount(self._labels, minlength=self.num_classes)
        return {name: int(n) for name, n in zip(self.class_names, counts)}

    def summary(self):
        counts = self.class_counts()
        cells = " ".join(f"{k}={v}" for k, v in counts.items())
        return f"{len(self)} images, {len(np.unique(self.subjects))} subjects, {cells}"


def _subject_key(s):
    s = str(s)
    return (0, int(s), "") if s.lstrip("-").isdigit() else (1, 0, s)


def _normalise_subjects(values):
    if all(str(v).lstrip("-").isdigit() for v in values):
        return np.asarray([int(v) for v in values], dtype=np.int64)
    return np.asarray([str(v) for v in values], dtype=object)


def _read_header_comments(lines):
    meta = {}
    for line in lines:
        if not line.startswith("#"):
            break
        body = line[1:].strip()
        if "=" in body:
            key, value = body.split("=", 1)
            meta[key.strip()] = value.strip()
    return meta


def load_dataset(manifest_path):
    """Read a ``path,subject,label`` manifest; problems are reported all at once.

    Leading ``# key = value`` comment lines may declare ``labels`` (the
    ordered class vocabulary) and ``mean`` (pixel mean to subtract).
    Without a ``labels`` line a ``labels.txt`` sidecar is used, and failing
    that the vocabulary is the order of first appearance.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    lines = manifest_path.read_text(encoding="utf-8").splitlines()
    meta = _read_header_comments(lines)
    body = [line for line in lines if not line.startswith("#")]
    rows = list(csv.reader(body))
    if not rows or [c.strip() for c in rows[0]] != ["path", "subject", "label"]:
        raise DataError(f"{manifest_path}: header must be 'path,subject,label'")
    rows = rows[1:]

    vocab = None
    if "labels" in meta:
        vocab = [v.strip() for v in meta["labels"].split(",") if v.strip()]
    elif (manifest_path.parent / "labels.txt").is_file():
        vocab = [v.strip() for v in (manifest_path.parent / "labels.txt").read_text().splitlines() if v.strip()]

    problems, seen = [], {}
    images, labels, subjects, paths = [], [], [], []
    names = list(vocab) if vocab is not None else []
    shape = None
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            problems.append(f"row {lineno}: expected 3 fields, got {len(row)}")
            continue
        rel, subject, label = (c.strip() for c in row)
        if rel in seen:
            problems.append(f"row {lineno}: duplicate entry {rel!r} (first at row {seen[rel]})")
            continue
        seen[rel] = lineno
        if label not in names:
            if vocab is not None:
                problems.append(f"row {lineno}: unknown label {label!r}")
                continue
            names.append(label)
        path = manifest_path.parent / rel
        if not path.is_file():
            problems.append(f"row {lineno}: missing file {rel}")
            continue
        try:
            img = read_image(path)
        except (FormatError, OSError, ValueError) as exc:
            problems.append(f"row {lineno}: {exc}")
            continue
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            problems.append(f"row {lineno}: image {rel} has dims {img.shape}, expected {shape}")
            continue
        if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
            problems.append(f"row {lineno}: pixel values of {rel} fall outside [0, 1]")
            continue
        images.append(img)
        labels.append(names.index(label))
        subjects.append(subject)
        paths.append(rel)
    if problems:
        raise DataError(f"{manifest_path}: {len(problems)} bad row(s)", problems)
    if not images:
        raise DataError(f"{manifest_path}: manifest lists no images")
    mean = float(meta.get("mean", 0.0))
    return Dataset(np.stack(images), labels, _normalise_subjects(subjects), names, paths, mean)


def write_dataset(dataset, directory, manifest_name="manifest.csv"):
    """Write FNIM images plus a manifest whose header carries the label vocabulary."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = [f"# labels = {','.join(dataset.class_names)}"]
    if dataset.pixel_mean:
        lines.append(f"# mean = {dataset.pixel_mean!r}")
    lines.append("path,subject,label")
    for i in range(len(dataset)):
        rel = f"images/{i:05d}.fnim"
        write_fnim(directory / rel, dataset.images[i])
        lines.append(f"{rel},{dataset.subjects[i]},{dataset.class_names[dataset._labels[i]]}")
    path = directory / manifest_name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# -- folds ----------------------------------------------------------------------
@dataclass
class FoldSplit:
    k: int
    fold_subjects: list
    fold_indices: list

    def test_indices(self, fold):
        return self.fold_indices[fold]

    def train_indices(self, fold):
        rest = [idx for f, idx in enumerate(self.fold_indices) if f != fold]
        return np.sort(np.concatenate(rest)) if rest else np.array([], dtype=np.int64)

    def fold_of_subject(self, subject):
        for f, subjects in enumerate(self.fold_subjects):
            if subject in subjects:
                return f
        raise KeyError(subject)


def make_folds(data, k):
    """Deal subjects, sorted ascending, into ``k`` contiguous near-equal groups.

    ``data`` is a :class:`Dataset` or the per-image subject ids.
    """
    subjects = data.subjects if isinstance(data, Dataset) else np.asarray(data)
    unique = sorted(set(subjects.tolist()), key=_subject_key)
    if not isinstance(k, (int, np.integer)) or k <= 0 or k > len(unique):
        raise ConfigError(f"k must lie in [1, {len(unique)}] (number of subjects), got {k}")
    groups = [list(g) for g in np.array_split(np.array(unique, dtype=object), k)]
    indices = []
    for group in groups:
        members = set(group)
        indices.append(np.array([i for i, s in enumerate(subjects.tolist()) if s in members], dtype=np.int64))
    return FoldSplit(int(k), groups, indices)


# -- augmentation ---------------------------------------------------------------
@dataclass(frozen=True)
class AugmentPolicy:
    canonical_size: int = 256
    crop_size: int = 224
    random_crop: bool = True
    horizontal_flip: bool = True
    eval_center_crop: bool = True

    def __post_init__(self):
        if self.crop_size < 1 or self.crop_size > self.canonical_size:
            raise ConfigError(f"crop size {self.crop_size} must lie in [1, {self.canonical_size}]")


def augment(image, policy, rng=None, train=False):
    """Crop (random at train time, centred at eval time) and maybe mirror one C x H x W image."""
    _, h, w = image.shape
    size = policy.crop_size
    if size > h or size > w:
        raise ConfigError(f"crop size {size} exceeds image size {h}x{w}")
    top, left, flip = (h - size) // 2, (w - size) // 2, False
    if train:
        if policy.random_crop:
            top = int(rng.integers(0, h - size + 1))
            left = int(rng.integers(0, w - size + 1))
        if policy.horizontal_flip:
            flip = bool(rng.random() < 0.5)
    elif not policy.eval_center_crop:
        top, left = 0, 0
    out = image[:, top : top + size, left : left + size]
    return np.ascontiguousarray(out[:, :, ::-1] if flip else out)


def augment_batch(images, policy, rng=None, train=False):
    return np.stack([augment(img, policy, rng, train) for img in images])


# -- toy corpus -----------------------------------------------------------------
def _stroke_templates(size):
    """Left-right symmetric masks, one per class, so mirroring preserves the label."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    t = 0.07

    def hbar(y, half=0.28):
        return (np.abs(yy - y) < t) & (np.abs(xx - 0.5) < half)

    def vbar(x=0.5, half=0.28):
        return (np.abs(xx - x) < t) & (np.abs(yy - 0.5) < half)

    def dots(y, dx=0.22, r=0.1):
        return ((yy - y) ** 2 + (xx - 0.5 - dx) ** 2 < r**2) | ((yy - y) ** 2 + (xx - 0.5 + dx) ** 2 < r**2)

    ring = np.abs(np.hypot(yy - 0.5, xx - 0.5) - 0.3) < t
    cross = (np.abs((yy - 0.5) - (xx - 0.5)) < t) | (np.abs((yy - 0.5) + (xx - 0.5)) < t)
    cross &= np.abs(xx - 0.5) < 0.3
    return [
        hbar(0.28),
        hbar(0.72),
        vbar(),
        dots(0.4),
        ring,
        cross,
        hbar(0.28) | hbar(0.72),
        hbar(0.5) | vbar(),
    ]


def synth_toy_dataset(num_classes=4, per_class=60, image_size=32, subject_count=20, seed=0,
                      channels=3, noise=0.05):
    """Face-like toy images where both subject identity and class are learnable.

    Each subject owns a tint and a smooth, mirror-symmetric low-frequency
    texture inside an oval; each class adds its own bright stroke pattern, jittered by up to
    one pixel per image, and Gaussian noise is added on top.  Image ``j``
    of every class belongs to subject ``j % subject_count + 1``.
    """
    if min(num_classes, per_class, image_size, subject_count, channels) < 1:
        raise ConfigError("all toy dataset counts must be positive")
    templates = _stroke_templates(image_size)
    if num_classes > len(templates):
        raise ConfigError(f"at most {len(templates)} toy classes are available")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size] / (image_size - 1)
    oval = (((yy - 0.5) / 0.46) ** 2 + ((xx - 0.5) / 0.38) ** 2 < 1.0).astype(np.float32)

    cells = 4
    rep = -(-image_size // cells)
    appearance = []
    for _ in range(subject_count):
        tint = rng.uniform(0.3, 1.0, size=(channels, 1, 1))
        coarse = rng.uniform(-1.0, 1.0, size=(cells, cells))
        coarse = (coarse + coarse[:, ::-1]) / 2
        texture = np.kron(coarse, np.ones((rep, rep)))[:image_size, :image_size]
        base = 0.25 + rng.uniform(0.0, 0.15)
        appearance.append(np.clip((base + 0.2 * texture) * oval * tint, 0.0, 1.0))

    class_names = list(EXPRESSIONS[:num_classes]) if num_classes <= len(EXPRESSIONS) else [
        f"c{i}" for i in range(num_classes)
    ]
    images, labels, subjects = [], [], []
    for c in range(num_classes):
        for j in range(per_class):
            s = j % subject_count
            dy, dx = rng.integers(-1, 2, size=2)
            stroke = np.roll(templates[c], (int(dy), int(dx)), axis=(0, 1)).astype(np.float32)
            strength = rng.uniform(0.4, 0.55)
            img = appearance[s] + strength * stroke[None] + rng.normal(0.0, noise, size=(channels, image_size, image_size))
            images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
            labels.append(c)
            subjects.append(s + 1)
    return Dataset(np.stack(images), labels, np.asarray(subjects, dtype=np.int64), class_names)

