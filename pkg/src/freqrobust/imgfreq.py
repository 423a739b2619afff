"""Gaussian kernels and separable low/high-pass filtering.

Images are ``numpy`` arrays laid out ``(H, W, C)``; every filtering function
also accepts a leading batch axis ``(N, H, W, C)`` since rows and columns are
addressed from the end. Filtering runs in float64.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "FilterKind",
    "FilterSpec",
    "Kernel1D",
    "gaussian_kernel",
    "pad_replicate",
    "convolve_separable",
    "filter_lowpass",
    "filter_highpass",
    "apply_filter",
    "to_display_u8",
    "from_display_u8",
    "save_image",
    "load_image",
]


class FilterKind(str, enum.Enum):
    HIGH = "HighPass"
    LOW = "LowPass"

    @classmethod
    def parse(cls, value: str | FilterKind) -> FilterKind:
        if isinstance(value, FilterKind):
            return value
        key = str(value).strip().lower()
        for kind in cls:
            if key in (kind.value.lower(), kind.name.lower()):
                return kind
        raise ValueError(f"unknown filter kind {value!r} (expected HighPass or LowPass)")


@dataclass(frozen=True)
class FilterSpec:
    kind: FilterKind
    sigma: float
    width: int

    def __post_init__(self):
        object.__setattr__(self, "kind", FilterKind.parse(self.kind))
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if int(self.width) != self.width or self.width < 1:
            raise ValueError(f"width must be an integer >= 1, got {self.width}")
        object.__setattr__(self, "width", int(self.width))

    @property
    def label(self) -> str:
        return f"{self.kind.value}_s{self.sigma:g}_w{self.width}"


@dataclass(frozen=True)
class Kernel1D:
    taps: np.ndarray
    sigma: float

    @property
    def width(self) -> int:
        return len(self.taps)

    def outer(self) -> np.ndarray:
        return np.outer(self.taps, self.taps)


def gaussian_kernel(sigma: float, width: int) -> Kernel1D:
    """Sampled, normalized 1-D Gaussian with ``width`` taps.

    Taps sit at offsets ``i - (width - 1) / 2``, so even widths are sampled at
    half-integer positions and stay symmetric about the true center.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if int(width) != width or width < 1:
        raise ValueError(f"width must be an integer >= 1, got {width}")
    width = int(width)
    offsets = np.arange(width, dtype=np.float64) - (width - 1) / 2.0
    taps = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    taps /= taps.sum()
    taps.setflags(write=False)
    return Kernel1D(taps=taps, sigma=float(sigma))


def _split_padding(width: int) -> tuple[int, int]:
    total = width - 1
    return total // 2, total - total // 2


def pad_replicate(img: np.ndarray, before: int, after: int, axis: str) -> np.ndarray:
    """Extend ``img`` along ``axis`` ("rows" or "cols") by repeating edge pixels."""
    if before < 0 or after < 0:
        raise ValueError("padding amounts must be non-negative")
    img = np.asarray(img)
    if img.ndim < 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {img.shape}")
    try:
        ax = {"rows": img.ndim - 3, "cols": img.ndim - 2}[axis]
    except KeyError:
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}") from None
    pad = [(0, 0)] * img.ndim
    pad[ax] = (before, after)
    return np.pad(img, pad, mode="edge")


def _correlate_axis(img: np.ndarray, taps: np.ndarray, axis: str) -> np.ndarray:
    before, after = _split_padding(len(taps))
    padded = pad_replicate(img, before, after, axis)
    ax = img.ndim - 3 if axis == "rows" else img.ndim - 2
    n = img.shape[ax]
    out = np.zeros(img.shape, dtype=np.float64)
    for i, t in enumerate(taps):
        out += t * padded.take(np.arange(i, i + n), axis=ax)
    return out


def convolve_separable(img: np.ndarray, kernel: Kernel1D) -> np.ndarray:
    """Filter each channel with the outer product of ``kernel`` (same output size).

    Pads with replicated edges, floor((w-1)/2) before and ceil((w-1)/2) after,
    first down the columns then along the rows.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if kernel.width == 1:
        return img * kernel.taps[0]
    out = _correlate_axis(img, kernel.taps, "rows")
    return _correlate_axis(out, kernel.taps, "cols")


def filter_lowpass(img: np.ndarray, sigma: float, width: int) -> np.ndarray:
    return convolve_separable(img, gaussian_kernel(sigma, width))


def filter_highpass(img: np.ndarray, sigma: float, width: int) -> np.ndarray:
    """Image minus its Gaussian blur. The result is signed."""
    img = np.asarray(img, dtype=np.float64)
    return img - filter_lowpass(img, sigma, width)


def apply_filter(img: np.ndarray, spec: FilterSpec) -> np.ndarray:
    if spec.kind is FilterKind.HIGH:
        return filter_highpass(img, spec.sigma, spec.width)
    return filter_lowpass(img, spec.sigma, spec.width)


def to_display_u8(img: np.ndarray, signed: bool = False) -> np.ndarray:
    """Quantize to bytes; signed mode renders zero as mid-grey (128)."""
    v = np.asarray(img, dtype=np.float64)
    if signed:
        v = v * 0.5 + 0.5
    v = np.clip(v, 0.0, 1.0) * 255.0
    # round half up, np.round would send 127.5 to 128 but 126.5 to 126
    return np.floor(v + 0.5).astype(np.uint8)


def from_display_u8(data: np.ndarray, signed: bool = False) -> np.ndarray:
    """Inverse of :func:`to_display_u8` up to quantization."""
    v = np.asarray(data, dtype=np.float64) / 255.0
    if signed:
        v = v * 2.0 - 1.0
    return v


def save_image(path: str | Path, img: np.ndarray, signed: bool = False) -> None:
    """Write an 8-bit PNG or binary PPM, chosen by the file extension."""
    from PIL import Image

    path = Path(path)
    if path.suffix.lower() not in (".png", ".ppm"):
        raise ValueError(f"unsupported image extension {path.suffix!r}; use .png or .ppm")
    data = to_display_u8(img, signed=signed)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
        if path.suffix.lower() == ".ppm":
            data = np.repeat(data[:, :, None], 3, axis=2)
    Image.fromarray(data).save(path)


def load_image(path: str | Path) -> np.ndarray:
    """Read any Pillow-supported image as RGB floats in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return from_display_u8(data)
