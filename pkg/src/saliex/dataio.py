"""Netpbm I/O, tensor conversion, synthetic shape scenes, augmentation and
diverging heatmaps.

Images are ``uint8`` arrays shaped ``(H, W)`` (grey) or ``(H, W, 3)`` (colour);
masks are ``bool`` arrays shaped ``(H, W)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .nn import Tensor, interpolation_matrix

SHAPE_KINDS = ("rectangle", "ellipse", "triangle")


class NetpbmError(DataError):
    def __init__(self, msg: str, offset: int, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{msg} (byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# netpbm


def _parse_netpbm(buf: bytes, path=None) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}, expected P5 or P6", 0, path)
    channels = 1 if magic == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise NetpbmError("truncated header", pos, path)
        c = buf[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise NetpbmError("unterminated comment in header", pos, path)
            pos = nl + 1
        else:
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            if start == pos:
                raise NetpbmError(f"unexpected byte {c!r} in header", pos, path)
            fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise NetpbmError("missing whitespace after header", pos, path)
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise NetpbmError(f"invalid dimensions {width}x{height}", pos, path)
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval} (only 255)", pos, path)
    n = width * height * channels
    if len(buf) - pos < n:
        raise NetpbmError(f"truncated payload: need {n} bytes, have {len(buf) - pos}", len(buf), path)
    data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return data.reshape(shape).copy()


def load_netpbm(path) -> np.ndarray:
    """Load a binary P5 or P6 file."""
    return _parse_netpbm(Path(path).read_bytes(), path)


def load_pgm(path) -> np.ndarray:
    img = load_netpbm(path)
    if img.ndim != 2:
        raise DataError(f"{path}: expected a P5 (greyscale) file")
    return img


def load_ppm(path) -> np.ndarray:
    img = load_netpbm(path)
    if img.ndim != 3:
        raise DataError(f"{path}: expected a P6 (colour) file")
    return img


def quantize(values) -> np.ndarray:
    """Map reals in [0,1] to bytes with round-half-up; bools go to 0/255."""
    arr = np.asarray(values)
    if arr.dtype == bool:
        return np.where(arr, 255, 0).astype(np.uint8)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.floor(arr.astype(np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_pgm(path, image) -> None:
    img = quantize(image)
    if img.ndim != 2:
        raise DataError(f"save_pgm needs an HxW array, got shape {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def save_ppm(path, image) -> None:
    img = quantize(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"save_ppm needs an HxWx3 array, got shape {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def load_mask(path) -> np.ndarray:
    img = load_netpbm(path)
    if img.ndim == 3:
        img = img[:, :, 0]
    return img > 127


def load_map(path) -> np.ndarray:
    """A saved saliency map as floats in [0,1]."""
    img = load_netpbm(path)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return img.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, pairs: Iterable[tuple[str, str]]) -> None:
    lines = [f"{a}\t{b}" for a, b in pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple[Path, Path]]:
    """Parse ``image<TAB>mask`` lines; relative paths resolve against the manifest's dir."""
    path = Path(path)
    base = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'image<TAB>mask'")
        pairs.append((base / parts[0], base / parts[1]))
    return pairs


def load_manifest(path) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(load_netpbm(img), load_mask(mask)) for img, mask in read_manifest(path)]


# ---------------------------------------------------------------------------
# tensors


def to_tensor(image) -> Tensor:
    """uint8 image -> [3,H,W] tensor in [-0.5, 0.5]; grey is replicated."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DataError(f"to_tensor expects HxW or HxWx3, got {img.shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return Tensor(img.transpose(2, 0, 1).astype(np.float64) / 255.0 - 0.5)


def from_tensor(t) -> np.ndarray:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return quantize(data.transpose(1, 2, 0) + 0.5)


# ---------------------------------------------------------------------------
# resampling


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    mh = interpolation_matrix(height, image.shape[0])
    mw = interpolation_matrix(width, image.shape[1])
    arr = image.astype(np.float64)
    if arr.ndim == 2:
        out = mh @ arr @ mw.T
    else:
        out = np.einsum("lk,ikc->ilc", mw, np.einsum("ij,jkc->ikc", mh, arr))
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8) if image.dtype == np.uint8 else out


def resize_nearest(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = mask.shape[:2]
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(int), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(int), w - 1)
    return mask[rows][:, cols]


def _fit(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Centre-crop or zero-pad the two leading axes to ``height x width``."""
    out = np.zeros((height, width) + arr.shape[2:], dtype=arr.dtype)
    h, w = arr.shape[:2]

    def span(src, dst):
        if src >= dst:
            off = (src - dst) // 2
            return slice(off, off + dst), slice(0, dst)
        off = (dst - src) // 2
        return slice(0, src), slice(off, off + src)

    sr, dr = span(h, height)
    sc, dc = span(w, width)
    out[dr, dc] = arr[sr, sc]
    return out


def augment_with(image: np.ndarray, mask: np.ndarray, mirror: bool, scale: float):
    """Deterministic core of :func:`augment`."""
    h, w = mask.shape
    if mirror:
        image, mask = image[:, ::-1], mask[:, ::-1]
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) != (h, w):
        image = resize_bilinear(image, nh, nw)
        mask = resize_nearest(mask, nh, nw)
        image, mask = _fit(image, h, w), _fit(mask, h, w)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def augment(image, mask, rng: np.random.Generator, scale_range=(0.5, 1.5)):
    """Random horizontal mirror (p=0.5) and random rescale, fit back to the input size."""
    mirror = bool(rng.random() < 0.5)
    scale = float(rng.uniform(*scale_range))
    return augment_with(np.asarray(image), np.asarray(mask, dtype=bool), mirror, scale)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    count: int = 100
    size: tuple[int, int] = (64, 64)
    kinds: tuple[str, ...] = SHAPE_KINDS
    gap_range: tuple[float, float] = (0.2, 0.45)
    noise_radius: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "gap_range", tuple(float(v) for v in self.gap_range))
        lo, hi = self.gap_range
        if not 0 < lo <= hi:
            raise ConfigError(f"gap_range must satisfy 0 < lo <= hi, got {self.gap_range}")
        if self.count < 1 or min(self.size) < 8:
            raise ConfigError("count must be >= 1 and both image sides >= 8")
        bad = [k for k in self.kinds if k not in SHAPE_KINDS]
        if bad or not self.kinds:
            raise ConfigError(f"unknown shape kinds {bad}; choose from {SHAPE_KINDS}")
        if self.noise_radius < 0:
            raise ConfigError("noise_radius must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


def value_noise(shape: tuple[int, ...], radius: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform noise box-filtered over a (2r+1)^2 window, per channel."""
    noise = rng.random(shape)
    if radius == 0:
        return noise
    size = (2 * radius + 1, 2 * radius + 1) + (1,) * (len(shape) - 2)
    return ndimage.uniform_filter(noise, size=size, mode="reflect")


def raster_shape(kind: str, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """One random shape of ``kind`` rasterised at pixel centres, fully inside the image."""
    bh = int(rng.integers(max(2, height // 5), int(height * 0.8) + 1))
    bw = int(rng.integers(max(2, width // 5), int(width * 0.8) + 1))
    top = int(rng.integers(0, height - bh + 1))
    left = int(rng.integers(0, width - bw + 1))
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    if kind == "rectangle":
        return (yy >= top) & (yy < top + bh) & (xx >= left) & (xx < left + bw)
    if kind == "ellipse":
        cy, cx = top + bh / 2, left + bw / 2
        return ((yy - cy) / (bh / 2)) ** 2 + ((xx - cx) / (bw / 2)) ** 2 <= 1.0
    if kind == "triangle":
        pts = np.column_stack(
            [top + rng.random(3) * bh, left + rng.random(3) * bw]
        )

        def edge(a, b):
            return (b[1] - a[1]) * (yy - a[0]) - (b[0] - a[0]) * (xx - a[1])

        e = [edge(pts[i], pts[(i + 1) % 3]) for i in range(3)]
        return ((e[0] >= 0) & (e[1] >= 0) & (e[2] >= 0)) | ((e[0] <= 0) & (e[1] <= 0) & (e[2] <= 0))
    raise ConfigError(f"unknown shape kind {kind!r}")


def synth_sample(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    h, w = spec.size
    kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
    for _ in range(10_000):
        mask = raster_shape(kind, h, w, rng)
        frac = mask.mean()
        if 0.05 <= frac <= 0.40:
            break
    else:  # pragma: no cover - geometry makes this practically unreachable
        raise ConfigError(f"could not place a {kind} with area in [5%, 40%]")
    gap = float(rng.uniform(*spec.gap_range))
    level = float(rng.uniform(0.2, 0.45))
    texture = (value_noise((h, w, 3), spec.noise_radius, rng) - 0.5) * 0.6
    img = level + texture + gap * mask[:, :, None]
    return quantize(img), mask, gap


def synth_dataset(spec: SynthSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """``spec.count`` (image, mask) pairs, a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    return [synth_sample(spec, rng)[:2] for _ in range(spec.count)]


def write_dataset(out_dir, samples: Sequence[tuple[np.ndarray, np.ndarray]], prefix: str = "img") -> Path:
    """Write images/masks plus ``manifest.txt``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, (img, mask) in enumerate(samples):
        name = f"{prefix}_{i:04d}"
        img_rel = os.path.join("images", name + (".ppm" if img.ndim == 3 else ".pgm"))
        mask_rel = os.path.join("masks", name + ".pgm")
        (save_ppm if img.ndim == 3 else save_pgm)(out_dir / img_rel, img)
        save_pgm(out_dir / mask_rel, mask)
        pairs.append((img_rel, mask_rel))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, pairs)
    return manifest


# ---------------------------------------------------------------------------
# heatmaps


def colormap_diverging(values) -> np.ndarray:
    """Signed map -> RGB: white at 0, red at +max|v|, blue at -max|v|."""
    v = np.asarray(values, dtype=np.float64)
    amp = float(np.max(np.abs(v))) if v.size else 0.0
    out = np.full(v.shape + (3,), 255, dtype=np.uint8)
    if amp == 0.0:
        return out
    r = np.clip(v / amp, -1.0, 1.0)
    fade = np.floor(255.0 * (1.0 - np.abs(r)) + 0.5).astype(np.uint8)
    pos, neg = r > 0, r < 0
    out[pos, 1] = fade[pos]
    out[pos, 2] = fade[pos]
    out[neg, 0] = fade[neg]
    out[neg, 1] = fade[neg]
    return out
