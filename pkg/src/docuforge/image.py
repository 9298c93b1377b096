"""Image container, PNG I/O, range conversion, patching and PSNR/MSE metrics."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, InvalidArgument, IoError, NotFound

#: value interval for each declared range
RANGES = {
    "uint8": (0.0, 255.0),
    "unit": (0.0, 1.0),
    "signed": (-1.0, 1.0),
}


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """An H x W x C pixel array together with the value range it lives in.

    ``uint8`` images are stored as ``np.uint8``; the other ranges are stored
    as float arrays. The array is copied and marked read-only on construction.
    """

    values: np.ndarray
    range: str = "uint8"

    def __post_init__(self):
        if self.range not in RANGES:
            raise InvalidArgument(f"unknown range {self.range!r}")
        v = np.array(self.values, copy=True)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[0] < 1 or v.shape[1] < 1 or v.shape[2] not in (1, 3):
            raise InvalidArgument(f"bad image shape {v.shape}")
        if self.range == "uint8":
            if v.dtype != np.uint8:
                if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 255 or np.any(v != np.round(v)):
                    raise InvalidArgument("uint8 image needs integer values in [0, 255]")
                v = v.astype(np.uint8)
        else:
            v = v.astype(np.float64) if not np.issubdtype(v.dtype, np.floating) else v
            lo, hi = RANGES[self.range]
            if not np.all(np.isfinite(v)) or v.min() < lo or v.max() > hi:
                raise InvalidArgument(f"values outside the {self.range} range [{lo}, {hi}]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def peak(self) -> float:
        lo, hi = RANGES[self.range]
        return hi - lo

    def as_float(self) -> np.ndarray:
        return self.values.astype(np.float64)

    def __repr__(self):
        return f"ImageTensor({self.height}, {self.width}, {self.channels}, range={self.range})"


def load_image(path) -> ImageTensor:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise NotFound(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("1", "LA"):
                im = im.convert("L")
            elif mode in ("P", "RGBA", "CMYK", "YCbCr"):
                im = im.convert("RGB")
            elif mode not in ("L", "RGB"):
                raise DecodeError(f"{path}: unsupported pixel mode {mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    return ImageTensor(arr, "uint8")


def to_uint8(img: ImageTensor) -> np.ndarray:
    return normalize(img, "uint8").values


def save_image(img: ImageTensor, path) -> None:
    """Write ``img`` as an 8-bit PNG; non-uint8 ranges are scaled and rounded."""
    arr = to_uint8(img)
    mode = "L" if arr.shape[2] == 1 else "RGB"
    data = arr[:, :, 0] if mode == "L" else arr
    try:
        Image.fromarray(np.ascontiguousarray(data), mode=mode).save(os.fspath(path), format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def normalize(img: ImageTensor, target: str) -> ImageTensor:
    """Affinely map ``img`` onto the ``target`` range.

    Conversions into ``uint8`` round to the nearest level.
    """
    if target not in RANGES:
        raise InvalidArgument(f"unknown range {target!r}")
    if target == img.range:
        return img
    lo, hi = RANGES[img.range]
    unit = (img.as_float() - lo) / (hi - lo)
    tlo, thi = RANGES[target]
    out = tlo + unit * (thi - tlo)
    if target == "uint8":
        out = np.clip(np.round(out), 0, 255).astype(np.uint8)
    else:
        out = np.clip(out, tlo, thi)
    return ImageTensor(out, target)


class Patch(NamedTuple):
    image: ImageTensor
    origin: tuple[int, int]


def window_origins(length: int, size: int, stride: int) -> list[int]:
    """Window starts along one axis, with a final edge-flush window if needed."""
    if size > length or size < 1 or stride < 1:
        raise InvalidArgument(f"window {size} (stride {stride}) does not fit length {length}")
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] != length - size:
        starts.append(length - size)
    return starts


def extract_patches(img: ImageTensor, size: int, stride: int) -> list[Patch]:
    if size < 1 or stride < 1:
        raise InvalidArgument("size and stride must be positive")
    if size > min(img.height, img.width):
        raise InvalidArgument(f"patch size {size} exceeds image {img.height}x{img.width}")
    patches = []
    for y in window_origins(img.height, size, stride):
        for x in window_origins(img.width, size, stride):
            patches.append(Patch(ImageTensor(img.values[y:y + size, x:x + size], img.range), (y, x)))
    return patches


def reassemble(patches: Sequence[Patch], height: int, width: int) -> ImageTensor:
    """Average patches back into a full image by their origins."""
    if not patches:
        raise InvalidArgument("no patches")
    ch = patches[0].image.channels
    acc = np.zeros((height, width, ch))
    count = np.zeros((height, width, 1))
    for p in patches:
        y, x = p.origin
        h, w = p.image.height, p.image.width
        acc[y:y + h, x:x + w] += p.image.as_float()
        count[y:y + h, x:x + w] += 1
    if np.any(count == 0):
        raise InvalidArgument("patches do not cover the image")
    out = acc / count
    rng = patches[0].image.range
    if rng == "uint8":
        out = np.round(out)
    return ImageTensor(out, rng)


def _check_pair(a: ImageTensor, b: ImageTensor):
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    if a.range != b.range:
        raise InvalidArgument(f"range mismatch {a.range} vs {b.range}")


def mse(a: ImageTensor, b: ImageTensor) -> float:
    _check_pair(a, b)
    d = a.as_float() - b.as_float()
    return float(np.mean(d * d))


@dataclass(frozen=True)
class PsnrResult:
    mse: float
    peak: float
    psnr_db: float
    mode: str = "standard"

    def to_record(self, path=None) -> dict:
        return {
            "path": None if path is None else os.fspath(path),
            "mse": self.mse,
            "peak": self.peak,
            "psnr_db": self.psnr_db if math.isfinite(self.psnr_db) else None,
            "mode": self.mode,
        }


def psnr_from_mse(err: float, peak: float, mode: str = "standard") -> float:
    if err == 0:
        return math.inf
    if mode == "standard":
        return 10.0 * math.log10(peak * peak / err)
    if mode == "paper-eq1":
        # 20*log10(peak/mse), kept verbatim for comparison with the printed formula
        return 20.0 * math.log10(peak / err)
    raise InvalidArgument(f"unknown psnr mode {mode!r}")


def psnr(clean: ImageTensor, test: ImageTensor, mode: str = "standard", peak: float | None = None) -> PsnrResult:
    """Peak signal-to-noise ratio of ``test`` against ``clean`` in dB.

    ``peak`` defaults to the span of the declared range (255 for uint8,
    1 for unit, 2 for signed) so values agree across range conversions.
    Identical images give ``+inf``.
    """
    err = mse(clean, test)
    peak = clean.peak if peak is None else float(peak)
    if peak <= 0:
        raise InvalidArgument("peak must be positive")
    return PsnrResult(err, peak, psnr_from_mse(err, peak, mode), mode)
