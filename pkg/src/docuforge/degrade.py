"""Synthetic document pages, the four corruption families and dataset building."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .errors import InvalidArgument
from .image import ImageTensor, load_image, normalize, save_image

TASKS = ("background", "blur", "watermark", "fade")
IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm", ".gif")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DOCUFORGE_THREADS", "1")))
    except ValueError:
        return 1


# -- helpers ---------------------------------------------------------------


def _unit(img: ImageTensor) -> np.ndarray:
    return normalize(img, "unit").as_float()


def _restore(values: np.ndarray, like: ImageTensor) -> ImageTensor:
    """Put unit-range float values back into the range of ``like``."""
    return normalize(ImageTensor(np.clip(values, 0.0, 1.0), "unit"), like.range)


def _check_range(name, value, lo, hi):
    if not (lo <= value <= hi):
        raise InvalidArgument(f"{name}={value} outside [{lo}, {hi}]")


# -- clean pages -----------------------------------------------------------


def _glyph(draw, x, y, cw, ch, rng, width, ink):
    # anchor grid: 3 columns x 4 rows inside the character cell
    xs = [x, x + cw / 2, x + cw]
    ys = [y, y + ch / 3, y + 2 * ch / 3, y + ch]
    for _ in range(int(rng.integers(1, 4))):
        a = (xs[rng.integers(3)], ys[rng.integers(4)])
        b = (xs[rng.integers(3)], ys[rng.integers(4)])
        if a == b:
            b = (a[0], ys[3] if a[1] != ys[3] else ys[0])
        draw.line([a, b], fill=ink, width=width)


def render_page(seed: int, height: int = 200, width: int = 200, stroke: tuple[int, int] = (3, 4)) -> ImageTensor:
    """Render a clean grayscale page of paragraph-like lines of pseudo-glyphs."""
    rng = np.random.default_rng([int(seed), 0x9A6E])
    im = Image.new("L", (width, height), 255)
    draw = ImageDraw.Draw(im)
    margin = max(4, min(height, width) // 16)
    cw = int(rng.integers(6, 9))
    ch = int(round(cw * 1.4))
    line_h = ch + int(rng.integers(5, 9))
    y = margin
    while y + ch <= height - margin:
        x = margin
        right = width - margin - (int(rng.integers(0, width // 3)) if rng.random() < 0.2 else 0)
        while x + cw <= right:
            for _ in range(int(rng.integers(2, 8))):
                if x + cw > right:
                    break
                sw = int(rng.integers(stroke[0], stroke[1] + 1))
                _glyph(draw, x, y, cw, ch, rng, sw, int(rng.integers(0, 50)))
                x += cw + sw + 1
            x += cw
        y += line_h
    return ImageTensor(np.asarray(im), "uint8")


def synth_corpus(out_dir, n_pages: int, height: int = 200, width: int = 200, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_pages):
        p = out_dir / f"page_{i:04d}.png"
        save_image(render_page(seed * 100003 + i, height, width), p)
        paths.append(p)
    return paths


# -- blur ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BlurKernel:
    kind: str
    weights: np.ndarray
    length: int | None = None
    angle: float | None = None
    radius: float | None = None

    @property
    def tag(self) -> str:
        if self.kind == "motion":
            return f"motion_L{self.length}_A{self.angle:g}"
        return f"defocus_R{self.radius:g}"


def _motion_weights(length: int, angle: float) -> np.ndarray:
    if length == 1:
        return np.ones((1, 1))
    theta = math.radians(angle)
    t = np.linspace(-(length - 1) / 2, (length - 1) / 2, 8 * length)
    xs = np.round(t * math.cos(theta)).astype(int)
    ys = np.round(-t * math.sin(theta)).astype(int)
    ry, rx = int(np.abs(ys).max()), int(np.abs(xs).max())
    w = np.zeros((2 * ry + 1, 2 * rx + 1))
    w[ys + ry, xs + rx] = 1.0
    return w / w.sum()


def _disk_weights(radius: float) -> np.ndarray:
    r = int(math.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    w = (yy * yy + xx * xx <= radius * radius).astype(float)
    return w / w.sum()


def make_blur_kernel(kind: str, params: Mapping[str, Any] | None = None, seed: int = 0) -> BlurKernel:
    """Build a normalized motion (line) or defocus (disk) kernel.

    Parameters missing from ``params`` are drawn from ``seed``: motion length
    in [3, 31] and angle in [0, 180), defocus radius in [1, 8].
    """
    params = dict(params or {})
    rng = np.random.default_rng([int(seed), 0xB1])
    if kind == "motion":
        length = int(params.get("length", rng.integers(3, 32)))
        angle = float(params.get("angle", rng.uniform(0, 180)))
        _check_range("length", length, 1, 31)
        if not 0 <= angle < 180:
            raise InvalidArgument(f"angle={angle} outside [0, 180)")
        return BlurKernel("motion", _motion_weights(length, angle), length=length, angle=angle)
    if kind == "defocus":
        radius = float(params.get("radius", rng.uniform(1, 8)))
        _check_range("radius", radius, 0.5, 8)
        return BlurKernel("defocus", _disk_weights(radius), radius=radius)
    raise InvalidArgument(f"unknown blur kind {kind!r}")


def kernel_bank() -> list[BlurKernel]:
    """The fixed 16-kernel test bank: 8 motion kernels then 8 defocus kernels."""
    bank = [
        make_blur_kernel("motion", {"length": 3 + 2 * i, "angle": 22.5 * i}) for i in range(8)
    ]
    bank += [make_blur_kernel("defocus", {"radius": 1.0 + 0.5 * i}) for i in range(8)]
    return bank


def bank_tag(index: int) -> str:
    return f"k{index:02d}"


def apply_blur(doc: ImageTensor, kernel: BlurKernel) -> ImageTensor:
    w = kernel.weights
    vals = doc.as_float()
    out = np.empty_like(vals)
    for c in range(doc.channels):
        out[:, :, c] = ndimage.convolve(vals[:, :, c], w, mode="nearest")
    lo, hi = (0, 255) if doc.range == "uint8" else (-1.0, 1.0) if doc.range == "signed" else (0.0, 1.0)
    out = np.clip(out, lo, hi)
    if doc.range == "uint8":
        out = np.round(out)
    return ImageTensor(out, doc.range)


def rotate_page(doc: ImageTensor, degrees: float) -> ImageTensor:
    """Small rotation about the page centre; uncovered corners become white."""
    if degrees == 0:
        return doc
    v = _unit(doc)
    out = np.stack(
        [ndimage.rotate(v[:, :, c], degrees, reshape=False, order=1, mode="constant", cval=1.0)
         for c in range(doc.channels)], axis=2)
    return _restore(out, doc)


# -- background noise ------------------------------------------------------


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    s = f.std()
    return f / s if s > 0 else f


def apply_background_noise(doc: ImageTensor, params: Mapping[str, Any] | None = None, seed: int = 0) -> ImageTensor:
    """Darken the page with stains, sun-spot gradients, dog-eared corners and wrinkles.

    Every effect multiplies intensities by a factor in (0, 1], so dark strokes
    are never lightened.

    params: ``stain_count`` in [0, 10], ``stain_opacity`` in [0.1, 0.6],
    ``wrinkle_amplitude`` in [0, 0.3], ``sunspot`` in [0, 0.3] and
    ``dogear`` in [0, 0.5] (the last two default to 0).
    """
    p = {"stain_count": 3, "stain_opacity": 0.3, "wrinkle_amplitude": 0.1, "sunspot": 0.0, "dogear": 0.0}
    p.update(params or {})
    count = p["stain_count"]
    if int(count) != count:
        raise InvalidArgument("stain_count must be an integer")
    _check_range("stain_count", count, 0, 10)
    _check_range("stain_opacity", p["stain_opacity"], 0.1, 0.6)
    _check_range("wrinkle_amplitude", p["wrinkle_amplitude"], 0, 0.3)
    _check_range("sunspot", p["sunspot"], 0, 0.3)
    _check_range("dogear", p["dogear"], 0, 0.5)

    h, w = doc.height, doc.width
    rng = np.random.default_rng([int(seed), 0xBA])
    factor = np.ones((h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    side = min(h, w)

    for _ in range(int(count)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(0.08, 0.3) * side
        envelope = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
        field_ = _smooth_field(rng, (h, w), max(1.0, radius / 4))
        blob = envelope + 0.25 * field_ * envelope
        mask = ndimage.gaussian_filter((blob > 0.5).astype(float), 1.5)
        # darker rim, as left by dried coffee
        rim = np.clip(mask * (1 - mask) * 4, 0, 1) * 0.5
        factor *= 1 - p["stain_opacity"] * np.clip(mask * (0.7 + 0.3 * rng.random()) + rim * mask, 0, 1)

    if p["sunspot"] > 0:
        ang = rng.uniform(0, 2 * math.pi)
        ramp = (math.cos(ang) * xx / max(w - 1, 1) + math.sin(ang) * yy / max(h - 1, 1))
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
        factor *= 1 - p["sunspot"] * ramp

    if p["dogear"] > 0:
        corner = int(rng.integers(4))
        size = rng.uniform(0.1, 0.25) * side
        cy = 0 if corner < 2 else h - 1
        cx = 0 if corner % 2 == 0 else w - 1
        fold = (np.abs(yy - cy) + np.abs(xx - cx)) < size
        shade = ndimage.gaussian_filter(fold.astype(float), 1.0)
        factor *= 1 - p["dogear"] * shade

    if p["wrinkle_amplitude"] > 0:
        fine = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.5, mode="wrap")
        coarse = ndimage.gaussian_filter(fine, 4.0, mode="wrap")
        ripple = np.abs(fine - coarse)
        ripple = (ripple - ripple.min()) / max(np.ptp(ripple), 1e-12)
        factor *= 1 - p["wrinkle_amplitude"] * ripple

    return _restore(_unit(doc) * factor[:, :, None], doc)


# -- watermarks ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Logo:
    """Grayscale mark plus per-pixel opacity in [0, 1]."""

    luma: ImageTensor
    alpha: np.ndarray

    @property
    def size(self):
        return self.alpha.shape


def make_logo(seed: int) -> Logo:
    rng = np.random.default_rng([int(seed), 0x10C0])
    side = int(rng.integers(64, 257))
    hgt = int(round(side * rng.uniform(0.6, 1.0)))
    luma = Image.new("L", (side, hgt), 255)
    alpha = Image.new("L", (side, hgt), 0)
    dl, da = ImageDraw.Draw(luma), ImageDraw.Draw(alpha)

    def box():
        x0, y0 = rng.uniform(0, 0.5) * side, rng.uniform(0, 0.5) * hgt
        x1 = x0 + rng.uniform(0.3, 0.5) * side
        y1 = y0 + rng.uniform(0.3, 0.5) * hgt
        return [x0, y0, x1, y1]

    for _ in range(int(rng.integers(2, 5))):
        shade = int(rng.integers(0, 140))
        kind = int(rng.integers(4))
        b = box()
        if kind == 0:
            dl.ellipse(b, fill=shade), da.ellipse(b, fill=255)
        elif kind == 1:
            dl.rectangle(b, fill=shade), da.rectangle(b, fill=255)
        elif kind == 2:
            pts = [(b[0], b[3]), (b[2], b[3]), ((b[0] + b[2]) / 2, b[1])]
            dl.polygon(pts, fill=shade), da.polygon(pts, fill=255)
        else:
            wd = max(2, side // 20)
            dl.ellipse(b, outline=shade, width=wd), da.ellipse(b, outline=255, width=wd)
    # a few glyph strokes across the bottom band, like a wordmark
    x = side * 0.1
    while x < side * 0.85:
        shade = int(rng.integers(0, 100))
        cw = side * 0.08
        wd = max(2, side // 40)
        for d in (dl, da):
            sub = np.random.default_rng([int(seed), int(x)])
            _glyph(d, x, hgt * 0.72, cw, hgt * 0.2, sub, wd, shade if d is dl else 255)
        x += cw * 1.5
    return Logo(ImageTensor(np.asarray(luma), "uint8"), np.asarray(alpha, dtype=np.float64) / 255.0)


def logo_bank(count: int = 21) -> list[Logo]:
    return [make_logo(s) for s in range(count)]


def apply_watermark(doc: ImageTensor, logo: Logo, params: Mapping[str, Any] | None = None, seed: int = 0) -> ImageTensor:
    """Alpha-composite ``logo`` onto ``doc``: out = (1 - a*m)*doc + a*m*logo.

    ``m`` is the logo's own opacity. Unpinned params are drawn from ``seed``:
    ``alpha`` in [0.15, 0.6], ``scale`` (longest logo side as a fraction of
    the page's shorter side) in [0.2, 0.8], and ``position`` (top, left)
    uniform over placements that keep the logo on the page.
    """
    params = dict(params or {})
    rng = np.random.default_rng([int(seed), 0xAA])
    alpha = float(params.get("alpha", rng.uniform(0.15, 0.6)))
    scale = float(params.get("scale", rng.uniform(0.2, 0.8)))
    _check_range("alpha", alpha, 0.0, 1.0)
    if scale <= 0:
        raise InvalidArgument("scale must be positive")
    lh, lw = logo.size
    target = max(1, int(round(scale * min(doc.height, doc.width))))
    f = target / max(lh, lw)
    nh, nw = max(1, int(round(lh * f))), max(1, int(round(lw * f)))
    if nh > doc.height or nw > doc.width:
        raise InvalidArgument(f"scaled logo {nh}x{nw} larger than page {doc.height}x{doc.width}")
    if "position" in params:
        top, left = (int(v) for v in params["position"])
        if not (0 <= top <= doc.height - nh and 0 <= left <= doc.width - nw):
            raise InvalidArgument("logo position falls outside the page")
    else:
        top = int(rng.integers(0, doc.height - nh + 1))
        left = int(rng.integers(0, doc.width - nw + 1))
    if alpha == 0:
        return doc

    if (nh, nw) == (lh, lw):
        luma = logo.luma.as_float()[:, :, 0] / 255.0
        opacity = logo.alpha
    else:
        luma = np.asarray(Image.fromarray(logo.luma.values[:, :, 0]).resize((nw, nh), Image.BILINEAR), float) / 255.0
        a8 = Image.fromarray(np.round(logo.alpha * 255).astype(np.uint8))
        opacity = np.asarray(a8.resize((nw, nh), Image.BILINEAR), float) / 255.0

    v = _unit(doc).copy()
    region = v[top:top + nh, left:left + nw]
    m = (alpha * opacity)[:, :, None]
    v[top:top + nh, left:left + nw] = (1 - m) * region + m * luma[:, :, None]
    return _restore(v, doc)


# -- fading ----------------------------------------------------------------


def apply_fade(doc: ImageTensor, params: Mapping[str, Any] | None = None, seed: int = 0) -> ImageTensor:
    """Thin strokes with a grey dilation (max filter) then lift intensities toward white.

    params: ``kernel_size`` odd in {3, 5, 7}; ``lift`` in [0, 0.5]. Missing
    values are drawn from ``seed``.
    """
    params = dict(params or {})
    rng = np.random.default_rng([int(seed), 0xFA])
    k = params.get("kernel_size", int(rng.choice([3, 5, 7])))
    lift = float(params.get("lift", rng.uniform(0.0, 0.5)))
    if int(k) != k or k % 2 == 0 or k not in (3, 5, 7):
        raise InvalidArgument(f"kernel_size must be odd in {{3, 5, 7}}, got {k}")
    _check_range("lift", lift, 0.0, 0.5)
    v = _unit(doc)
    dil = ndimage.grey_dilation(v, size=(int(k), int(k), 1), mode="nearest")
    return _restore(dil + lift * (1.0 - dil), doc)


# -- datasets --------------------------------------------------------------


@dataclass
class Record:
    noisy: str | None
    clean: str | None
    group: str | None = None
    source: str | None = None

    def to_json(self) -> dict:
        return {"noisy": self.noisy, "clean": self.clean, "group": self.group, "source": self.source}


@dataclass
class DatasetManifest:
    """Records of one split; paths are relative to ``root`` (the manifest's directory)."""

    task: str
    split: str
    pairing: str
    records: list[Record] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidArgument(f"unknown task {self.task!r}")
        if self.pairing not in ("paired", "unpaired"):
            raise InvalidArgument(f"unknown pairing {self.pairing!r}")
        if self.pairing == "paired":
            if any(r.noisy is None or r.clean is None for r in self.records):
                raise InvalidArgument("paired manifest records need both noisy and clean paths")
        elif any((r.noisy is None) == (r.clean is None) for r in self.records):
            raise InvalidArgument("unpaired manifest records carry exactly one of noisy / clean")

    def resolve(self, rel: str) -> Path:
        return (self.root / rel) if self.root is not None else Path(rel)

    def noisy_pool(self) -> list[Path]:
        return [self.resolve(r.noisy) for r in self.records if r.noisy is not None]

    def clean_pool(self) -> list[Path]:
        return [self.resolve(r.clean) for r in self.records if r.clean is not None]

    def pairs(self) -> list[tuple[Path, Path, str | None]]:
        if self.pairing != "paired":
            raise InvalidArgument("manifest is unpaired")
        return [(self.resolve(r.noisy), self.resolve(r.clean), r.group) for r in self.records]

    @property
    def path(self) -> Path | None:
        return None if self.root is None else self.root / "manifest.jsonl"

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.path
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
        return path


def read_manifest(path, task: str | None = None, split: str | None = None) -> DatasetManifest:
    """Load a JSON Lines manifest; task/split default to the <task>/<split>/ directory names."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                records.append(Record(d.get("noisy"), d.get("clean"), d.get("group"), d.get("source")))
    paired = all(r.noisy is not None and r.clean is not None for r in records)
    return DatasetManifest(
        task=task or path.parent.parent.name,
        split=split or path.parent.name,
        pairing="paired" if paired else "unpaired",
        records=records,
        root=path.parent,
    )


DEFAULT_SYNTH = {
    "train": 20,
    "test": 10,
    "pairing": "unpaired",
    "channels": 1,
    "test_groups": 16,
    "group_size": 2,
    "rotation": 2.0,
    "logos": 21,
    "params": {
        "background": {"stain_count": [1, 5], "stain_opacity": [0.1, 0.6], "wrinkle_amplitude": [0.0, 0.3],
                       "sunspot": [0.0, 0.3], "dogear": [0.0, 0.5]},
        "watermark": {"alpha": [0.15, 0.6], "scale": [0.2, 0.8]},
        "fade": {"kernel_size": [3], "lift": [0.1, 0.4]},
        "blur": {},
    },
}

_INT_PARAMS = {"stain_count"}
_CHOICE_PARAMS = {"kernel_size"}


def sample_params(ranges: Mapping[str, Any], rng: np.random.Generator) -> dict:
    """Draw one parameter record: scalars are pinned, [lo, hi] drawn uniformly, choices for listed params."""
    out = {}
    for name in sorted(ranges):
        spec = ranges[name]
        if not isinstance(spec, (list, tuple)):
            out[name] = spec
        elif name in _CHOICE_PARAMS:
            out[name] = int(spec[int(rng.integers(len(spec)))])
        elif name in _INT_PARAMS:
            out[name] = int(rng.integers(int(spec[0]), int(spec[1]) + 1))
        else:
            out[name] = float(rng.uniform(spec[0], spec[1]))
    return out


def merge_config(base: Mapping, override: Mapping | None) -> dict:
    out = json.loads(json.dumps(base))
    for k, v in (override or {}).items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = v
    return out


def _to_channels(img: ImageTensor, channels: int) -> ImageTensor:
    if img.channels == channels:
        return img
    v = img.as_float()
    if channels == 1:
        g = v @ np.array([0.299, 0.587, 0.114])
        return ImageTensor(np.round(g)[:, :, None], "uint8")
    return ImageTensor(np.repeat(v, 3, axis=2), "uint8")


def list_corpus(corpus) -> list[Path]:
    corpus = Path(corpus)
    if not corpus.is_dir():
        raise InvalidArgument(f"corpus directory {corpus} does not exist")
    return sorted(p for p in corpus.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


class _Degrader:
    def __init__(self, task, cfg, seed):
        self.task, self.cfg, self.seed = task, cfg, seed
        self.ranges = cfg["params"].get(task, {})
        self.bank = kernel_bank() if task == "blur" else None
        self.logos = logo_bank(cfg["logos"]) if task == "watermark" else None

    def __call__(self, page: ImageTensor, rng: np.random.Generator, group: int | None = None):
        """Return (clean target, noisy image, group tag) for one page."""
        sub = int(rng.integers(2 ** 63))
        if self.task == "background":
            return page, apply_background_noise(page, sample_params(self.ranges, rng), sub), None
        if self.task == "fade":
            return page, apply_fade(page, sample_params(self.ranges, rng), sub), None
        if self.task == "watermark":
            logo = self.logos[int(rng.integers(len(self.logos)))]
            return page, apply_watermark(page, logo, sample_params(self.ranges, rng), sub), None
        k = int(rng.integers(len(self.bank))) if group is None else group
        rot = float(rng.uniform(-1, 1)) * self.cfg["rotation"]
        target = rotate_page(page, rot)
        return target, apply_blur(target, self.bank[k]), bank_tag(k)


def build_dataset(clean_corpus, task: str, config: Mapping | None, seed: int, out_root) -> dict[str, DatasetManifest]:
    """Degrade a clean corpus into train/test splits under ``out_root/<task>/<split>/``.

    The test split is always paired. An unpaired train split partitions its
    pages into a noisy-source pool and a clean pool with no page in common.
    For the blur task the test split holds ``test_groups`` groups of
    ``group_size`` images, one group per kernel of the fixed bank.

    Returns ``{"train": manifest, "test": manifest}``.
    """
    if task not in TASKS:
        raise InvalidArgument(f"unknown task {task!r}")
    cfg = merge_config(DEFAULT_SYNTH, config)
    if cfg["pairing"] not in ("paired", "unpaired"):
        raise InvalidArgument(f"unknown pairing {cfg['pairing']!r}")
    pages = list_corpus(clean_corpus)
    if len(pages) < 2:
        raise InvalidArgument(f"corpus {clean_corpus} needs at least 2 page images, found {len(pages)}")
    n_train, n_test = int(cfg["train"]), int(cfg["test"])
    if task == "blur":
        if not 1 <= cfg["test_groups"] <= 16:
            raise InvalidArgument("test_groups must be in [1, 16]")
        n_test = int(cfg["test_groups"]) * int(cfg["group_size"])
    unpaired = cfg["pairing"] == "unpaired"
    if n_train < 1 or n_test < 1:
        raise InvalidArgument("train and test counts must be positive")

    order = np.random.default_rng([int(seed), 0x5E]).permutation(len(pages))
    shuffled = [pages[i] for i in order]
    min_train = 2 if unpaired else 1
    n_test_pages = max(1, int(round(len(pages) * n_test / (n_train + n_test))))
    n_test_pages = min(n_test_pages, len(pages) - min_train)
    if n_test_pages < 1:
        raise InvalidArgument(f"corpus too small for {cfg['pairing']} train split plus a test split")
    test_pages, train_pages = shuffled[:n_test_pages], shuffled[n_test_pages:]

    channels = int(cfg["channels"])
    degrader = _Degrader(task, cfg, seed)
    out_root = Path(out_root)
    cache: dict[Path, ImageTensor] = {}

    def page(p):
        if p not in cache:
            cache[p] = _to_channels(load_image(p), channels)
        return cache[p]

    jobs = []  # (split_dir, index, kind, source page, group, rng key)
    train_dir = out_root / task / "train"
    test_dir = out_root / task / "test"
    if unpaired:
        half = (len(train_pages) + 1) // 2
        noisy_src, clean_src = train_pages[:half], train_pages[half:]
        jobs += [(train_dir, i, "noisy", noisy_src[i % len(noisy_src)], None, (1, i)) for i in range(n_train)]
        jobs += [(train_dir, n_train + i, "clean", clean_src[i % len(clean_src)], None, (2, i)) for i in range(n_train)]
    else:
        jobs += [(train_dir, i, "pair", train_pages[i % len(train_pages)], None, (1, i)) for i in range(n_train)]
    for i in range(n_test):
        group = i // int(cfg["group_size"]) if task == "blur" else None
        jobs.append((test_dir, i, "pair", test_pages[i % len(test_pages)], group, (3, i)))
    for src in set(j[3] for j in jobs):
        page(src)

    def run(job):
        split_dir, idx, kind, src, group, key = job
        rng = np.random.default_rng([int(seed), *key])
        clean, noisy, tag = degrader(page(src), rng, group)
        name = f"{idx:04d}.png"
        rec = Record(None, None, tag, src.name)
        if kind in ("noisy", "pair"):
            (split_dir / "noisy").mkdir(parents=True, exist_ok=True)
            save_image(noisy, split_dir / "noisy" / name)
            rec.noisy = f"noisy/{name}"
        if kind in ("clean", "pair"):
            (split_dir / "clean").mkdir(parents=True, exist_ok=True)
            save_image(clean, split_dir / "clean" / name)
            rec.clean = f"clean/{name}"
        if kind == "clean":
            rec.group = None
        return split_dir, rec

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(run, jobs))

    manifests = {
        "train": DatasetManifest(task, "train", cfg["pairing"], [r for d, r in results if d == train_dir], train_dir),
        "test": DatasetManifest(task, "test", "paired", [r for d, r in results if d == test_dir], test_dir),
    }
    for m in manifests.values():
        m.write()
    return manifests
