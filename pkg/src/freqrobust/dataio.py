"""CIFAR-format datasets, the filtered test grid and training-set augmentation."""
from __future__ import annotations

import configparser
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .imgfreq import FilterKind, FilterSpec, apply_filter, from_display_u8, to_display_u8

log = logging.getLogger(__name__)

IMAGE_SHAPE = (32, 32, 3)
RECORD_BYTES = 1 + 32 * 32 * 3
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]

# filtering a whole split at once in float64 costs ~24 KB per image
_CHUNK = 1000


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Images ``(N, H, W, C)`` float32 with integer labels in ``[0, num_classes)``."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        return self.images[i], int(self.labels[i])

    def head(self, limit: int | None) -> LabeledDataset:
        if limit is None or limit >= len(self):
            return self
        return LabeledDataset(self.images[:limit], self.labels[:limit], self.num_classes, self.name)


# ---------------------------------------------------------------------------
# binary records


def decode_records(raw: bytes, num_classes: int = 10, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Split CIFAR binary records into ``(labels, uint8 images (N, 32, 32, 3))``."""
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise DataFormatError(
            f"{source}: length {len(raw)} is not a positive multiple of {RECORD_BYTES}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise DataFormatError(
            f"{source}: record {bad[0]} has label {labels[bad[0]]} >= {num_classes}"
        )
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return labels, np.ascontiguousarray(pixels)


def encode_records(labels: np.ndarray, pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"record format needs 32x32x3 images, got {pixels.shape[1:]}")
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("labels must fit in one byte")
    planes = pixels.transpose(0, 3, 1, 2).reshape(len(pixels), -1)
    return np.concatenate([labels.astype(np.uint8)[:, None], planes], axis=1).tobytes()


def _signed_mask(signed: bool | np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(signed, dtype=bool)
    return np.broadcast_to(mask, (n,)) if mask.ndim == 0 else mask


def read_records(
    path: str | Path,
    num_classes: int = 10,
    signed: bool | np.ndarray = False,
    name: str | None = None,
) -> LabeledDataset:
    """Load one record file; ``signed`` (scalar or per-record) selects the high-pass decoding."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such record file: {path}")
    labels, pixels = decode_records(path.read_bytes(), num_classes, str(path))
    mask = _signed_mask(signed, len(labels))
    images = np.empty(pixels.shape, dtype=np.float32)
    images[~mask] = from_display_u8(pixels[~mask])
    images[mask] = from_display_u8(pixels[mask], signed=True)
    return LabeledDataset(images, labels, num_classes, name or path.stem)


def write_records(path: str | Path, ds: LabeledDataset, signed: bool | np.ndarray = False) -> None:
    mask = _signed_mask(signed, len(ds))
    pixels = np.empty(ds.images.shape, dtype=np.uint8)
    pixels[~mask] = to_display_u8(ds.images[~mask])
    pixels[mask] = to_display_u8(ds.images[mask], signed=True)
    Path(path).write_bytes(encode_records(ds.labels, pixels))


def load_cifar10(path: str | Path, split: str, num_classes: int = 10) -> LabeledDataset:
    """Read the binary CIFAR-10 batches of ``split`` ("train" or "test") from ``path``."""
    files = {"train": TRAIN_FILES, "test": TEST_FILES}.get(split)
    if files is None:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(path)
    labels, pixels = [], []
    for fname in files:
        f = root / fname
        if not f.is_file():
            raise FileNotFoundError(f"missing CIFAR batch file: {f}")
        lab, pix = decode_records(f.read_bytes(), num_classes, str(f))
        labels.append(lab)
        pixels.append(pix)
    pix = np.concatenate(pixels)
    return LabeledDataset(
        from_display_u8(pix).astype(np.float32), np.concatenate(labels), num_classes, f"cifar10-{split}"
    )


# ---------------------------------------------------------------------------
# filtering whole datasets


def filter_images(images: np.ndarray, spec: FilterSpec) -> np.ndarray:
    out = np.empty(images.shape, dtype=np.float32)
    for start in range(0, len(images), _CHUNK):
        stop = start + _CHUNK
        out[start:stop] = apply_filter(images[start:stop].astype(np.float64), spec)
    return out


def filter_dataset(ds: LabeledDataset, spec: FilterSpec) -> LabeledDataset:
    return LabeledDataset(filter_images(ds.images, spec), ds.labels.copy(), ds.num_classes, spec.label)


@dataclass
class GridSpec:
    sigmas: list[float] = field(default_factory=lambda: [0.5, 1.0, 1.5])
    widths: list[int] = field(default_factory=lambda: [2, 3, 4, 5, 6, 7])
    kinds: list[FilterKind] = field(default_factory=lambda: [FilterKind.HIGH, FilterKind.LOW])

    def __post_init__(self):
        self.kinds = [FilterKind.parse(k) for k in self.kinds]
        self.sigmas = [float(s) for s in self.sigmas]
        self.widths = [int(w) for w in self.widths]
        if not (self.sigmas and self.widths and self.kinds):
            raise ValueError("grid needs at least one sigma, width and kind")

    def cells(self) -> list[FilterSpec]:
        return [FilterSpec(k, s, w) for k in self.kinds for s in self.sigmas for w in self.widths]


@dataclass
class ManifestEntry:
    path: Path
    count: int
    encoding: str
    spec: FilterSpec | None = None  # None for the clean set

    @property
    def signed(self) -> bool:
        return self.encoding == "signed"


@dataclass
class Manifest:
    clean: ManifestEntry | None
    cells: list[ManifestEntry]
    num_classes: int = 10

    def write(self, path: str | Path) -> None:
        path = Path(path)
        cp = configparser.ConfigParser(interpolation=None)
        cp["dataset"] = {"num_classes": str(self.num_classes)}
        if self.clean is not None:
            cp["clean"] = _entry_fields(self.clean, path.parent)
        for e in self.cells:
            cp[f"cell {e.spec.label}"] = _entry_fields(e, path.parent)
        with path.open("w") as fh:
            cp.write(fh)

    @classmethod
    def read(cls, path: str | Path) -> Manifest:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no such manifest: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        cp.read(path)
        clean, cells = None, []
        for name in cp.sections():
            sec = cp[name]
            if name == "dataset":
                continue
            entry = ManifestEntry(
                path=path.parent / sec["path"], count=int(sec["count"]), encoding=sec["encoding"]
            )
            if name == "clean":
                clean = entry
            else:
                entry.spec = FilterSpec(sec["kind"], float(sec["sigma"]), int(sec["width"]))
                cells.append(entry)
        num_classes = cp.getint("dataset", "num_classes", fallback=10)
        return cls(clean, cells, num_classes)

    def load(self, entry: ManifestEntry) -> LabeledDataset:
        name = entry.spec.label if entry.spec else "clean"
        ds = read_records(entry.path, self.num_classes, entry.signed, name)
        if len(ds) != entry.count:
            raise DataFormatError(f"{entry.path}: {len(ds)} records, manifest says {entry.count}")
        return ds


def _entry_fields(e: ManifestEntry, root: Path) -> dict[str, str]:
    fields = {}
    if e.spec is not None:
        fields.update(kind=e.spec.kind.value, sigma=repr(e.spec.sigma), width=str(e.spec.width))
    try:
        rel = e.path.relative_to(root)
    except ValueError:
        rel = e.path
    fields.update(count=str(e.count), path=rel.as_posix(), encoding=e.encoding)
    return fields


def generate_test_grid(
    test: LabeledDataset, grid: GridSpec, out: str | Path, threads: int = 1
) -> Manifest:
    """Write the clean set and one filtered copy per grid cell, plus ``manifest.ini``."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    clean_path = out / "clean.bin"
    write_records(clean_path, test)
    clean = ManifestEntry(clean_path, len(test), "unsigned")

    def one(spec: FilterSpec) -> ManifestEntry:
        signed = spec.kind is FilterKind.HIGH
        p = out / f"{spec.label}.bin"
        write_records(p, filter_dataset(test, spec), signed=signed)
        log.debug("wrote %s", p)
        return ManifestEntry(p, len(test), "signed" if signed else "unsigned", spec)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        cells = list(pool.map(one, grid.cells()))
    manifest = Manifest(clean, cells, test.num_classes)
    manifest.write(out / "manifest.ini")
    return manifest


# ---------------------------------------------------------------------------
# stochastic filtering augmentation


@dataclass
class AugmentPolicy:
    sigma_min: float = 0.25
    sigma_max: float = 1.75
    width_choices: list[int] = field(default_factory=lambda: [2, 3, 4, 5, 6, 7])
    seed: int = 0

    def __post_init__(self):
        self.width_choices = [int(w) for w in self.width_choices]
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not self.width_choices or min(self.width_choices) < 1:
            raise ValueError("width_choices must be non-empty positive integers")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a non-negative 64-bit integer")

    def draw(self, index: int) -> FilterSpec:
        """Filter for the copy of item ``index``; depends only on (seed, index)."""
        rng = np.random.default_rng([self.seed, index])
        kind = (FilterKind.HIGH, FilterKind.LOW)[int(rng.integers(2))]
        sigma = float(rng.uniform(self.sigma_min, self.sigma_max))
        width = int(self.width_choices[int(rng.integers(len(self.width_choices)))])
        return FilterSpec(kind, sigma, width)


def stochastic_augment(train: LabeledDataset, policy: AugmentPolicy, threads: int = 1) -> LabeledDataset:
    """Originals followed by one randomly high- or low-pass filtered copy of each."""
    n = len(train)

    def one(i: int) -> np.ndarray:
        img = train.images[i].astype(np.float64)
        return apply_filter(img, policy.draw(i)).astype(np.float32)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        copies = np.stack(list(pool.map(one, range(n)))) if n else train.images[:0]
    images = np.concatenate([train.images, copies])
    labels = np.concatenate([train.labels, train.labels])
    return LabeledDataset(images, labels, train.num_classes, f"{train.name}+stochastic")


def augment_provenance(n: int, policy: AugmentPolicy) -> list[tuple[int, FilterSpec]]:
    return [(i, policy.draw(i)) for i in range(n)]


def write_provenance(path: str | Path, records: Iterable[tuple[int, FilterSpec]], offset: int) -> None:
    """One CSV row per generated item: its index in the augmented set and its source."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "source", "kind", "sigma", "width"])
        for src, spec in records:
            w.writerow([offset + src, src, spec.kind.value, repr(spec.sigma), spec.width])


def read_provenance(path: str | Path) -> list[tuple[int, FilterSpec]]:
    with Path(path).open(newline="") as fh:
        return [
            (int(r["source"]), FilterSpec(r["kind"], float(r["sigma"]), int(r["width"])))
            for r in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------------------
# standard augmentation and normalization


def crop_flip(img: np.ndarray, dy: int, dx: int, flip: bool, pad: int = 4) -> np.ndarray:
    h, w = img.shape[:2]
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    out = padded[dy : dy + h, dx : dx + w]
    return out[:, ::-1] if flip else out


def standard_augment(img: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop from the replicate-padded image, then a coin-flip horizontal mirror."""
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    flip = bool(rng.random() < 0.5)
    return crop_flip(img, int(dy), int(dx), flip, pad)


def standard_augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Batched :func:`standard_augment` for ``(N, H, W, C)``; draws per sample in order."""
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        crop = padded[i, dy : dy + h, dx : dx + w]
        out[i] = crop[:, ::-1] if rng.random() < 0.5 else crop
    return out


def channel_stats(ds: LabeledDataset) -> tuple[list[float], list[float]]:
    x = ds.images.astype(np.float64)
    return x.mean(axis=(0, 1, 2)).tolist(), x.std(axis=(0, 1, 2)).tolist()


def _check_std(std: Sequence[float]) -> np.ndarray:
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("normalization std must be positive")
    return std


def normalize(img: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """Per-channel ``(x - mean) / std`` over the last axis."""
    std = _check_std(std)
    return (np.asarray(img) - np.asarray(mean)) / std


def denormalize(img: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    std = _check_std(std)
    return np.asarray(img) * std + np.asarray(mean)
