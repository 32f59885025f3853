"""Image I/O, resizing, sliding-window patching, synthetic data and splits."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels
from .errors import DataError, ShapeError


@dataclass
class ImageSample:
    image: np.ndarray  # H x W, float in [0, 1]
    mask: np.ndarray  # H x W, {0, 1}
    id: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DataError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} differ")


# ---------------------------------------------------------------------------
# PGM (P2 / P5)
# ---------------------------------------------------------------------------

def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace separated header tokens, skipping comments."""
    tokens: list[bytes] = []
    i, n = 0, len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i >= n:
            raise DataError("malformed PGM header: unexpected end of file")
        if buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
            j += 1
        tokens.append(buf[i:j])
        i = j
    return tokens, i


def parse_pgm(buf: bytes) -> np.ndarray:
    """Decode a P2/P5 graymap into a float array scaled to [0, 1]."""
    tokens, pos = _header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise DataError(f"malformed PGM header: unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise DataError(f"malformed PGM header: {exc}") from None
    if width <= 0 or height <= 0 or not 0 < maxval <= 65535:
        raise DataError(f"malformed PGM header: {width}x{height}, maxval {maxval}")
    npx = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates the header from the raster
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = npx * dtype.itemsize
        payload = buf[pos : pos + need]
        if len(payload) < need:
            raise DataError(f"truncated PGM payload: need {need} bytes, got {len(payload)}")
        values = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    else:
        fields = buf[pos:].split()
        if len(fields) < npx:
            raise DataError(f"truncated PGM payload: need {npx} samples, got {len(fields)}")
        try:
            values = np.array([int(f) for f in fields[:npx]], dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"malformed PGM payload: {exc}") from None
    if values.max(initial=0) > maxval:
        raise DataError("malformed PGM payload: sample exceeds maxval")
    return values.reshape(height, width) / maxval


def load_pgm(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    return parse_pgm(buf)


def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"PGM images are 2-D, got shape {img.shape}")
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = raster.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def save_pgm(image: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_pgm(image))


def load_mask(path) -> np.ndarray:
    return (load_pgm(path) >= 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def crop(image: np.ndarray, rows: tuple[int, int], cols: tuple[int, int]) -> np.ndarray:
    """Half-open crop ``image[r0:r1, c0:c1]`` with bounds checking."""
    (r0, r1), (c0, c1) = rows, cols
    h, w = image.shape[:2]
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ShapeError(f"crop rows {rows} cols {cols} outside image of shape {image.shape}")
    return image[r0:r1, c0:c1]


def _source_coords(out_len: int, in_len: int) -> np.ndarray:
    return (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5


def resize(image: np.ndarray, out_h: int, out_w: int, method: str = "bilinear") -> np.ndarray:
    """Resize a 2-D image using half-pixel-centre sampling."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    if method == "nearest":
        ri = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
        ci = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
        return img[ri[:, None], ci[None, :]]
    if method != "bilinear":
        raise ValueError(f"unknown resize method {method!r}")
    ys = np.clip(_source_coords(out_h, h), 0, h - 1)
    xs = np.clip(_source_coords(out_w, w), 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# sliding-window patches
# ---------------------------------------------------------------------------

class PatchGrid(NamedTuple):
    patch_size: int
    stride: int
    anchors: tuple[tuple[int, int], ...]
    source_shape: tuple[int, int]
    edge_anchored: bool


def axis_anchors(length: int, patch_size: int, stride: int, edge_anchored: bool) -> list[int]:
    if patch_size > length:
        raise ShapeError(f"patch size {patch_size} larger than image extent {length}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    anchors = list(range(0, length - patch_size + 1, stride))
    if edge_anchored and anchors[-1] + patch_size < length:
        anchors.append(length - patch_size)
    return anchors


def patch_grid(shape: tuple[int, int], patch_size: int, stride: int, edge_anchored: bool = False) -> PatchGrid:
    rows = axis_anchors(shape[0], patch_size, stride, edge_anchored)
    cols = axis_anchors(shape[1], patch_size, stride, edge_anchored)
    anchors = tuple((r, c) for r in rows for c in cols)
    return PatchGrid(patch_size, stride, anchors, (int(shape[0]), int(shape[1])), edge_anchored)


def extract_patches(image: np.ndarray, patch_size: int, stride: int, edge_anchored: bool = False):
    """Return ``(grid, patches)`` with patches stacked as [P, size, size]."""
    img = np.asarray(image)
    grid = patch_grid(img.shape[:2], patch_size, stride, edge_anchored)
    patches = np.stack([img[r : r + patch_size, c : c + patch_size] for r, c in grid.anchors])
    return grid, patches


def stitch_patches(predictions, grid: PatchGrid) -> tuple[np.ndarray, np.ndarray]:
    """Average overlapping patch predictions back onto the source canvas.

    Returns ``(image, covered)``; pixels no patch reaches are 0 and marked
    False in ``covered``.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[0] != len(grid.anchors):
        raise ShapeError(f"{preds.shape[0] if preds.ndim else 0} predictions for {len(grid.anchors)} anchors")
    if preds.shape[1:] != (grid.patch_size, grid.patch_size):
        raise ShapeError(f"prediction patches {preds.shape[1:]} do not match patch size {grid.patch_size}")
    h, w = grid.source_shape
    acc, cnt = _kernels.stitch_accumulate(preds, np.asarray(grid.anchors, dtype=np.int64).reshape(-1, 2), h, w)
    covered = cnt > 0
    out = np.zeros_like(acc)
    np.divide(acc, cnt, out=out, where=covered)
    return out, covered


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

_SUPERSAMPLE = 4


def _ellipse_inside(yy, xx, cy, cx, ry, rx, theta):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def synth_sample(seed: int, index: int, size: int) -> ImageSample:
    rng = np.random.default_rng([seed, index])
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    sub = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE - 0.5
    coverage = np.zeros((size, size))
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        ry, rx = rng.uniform(0.09, 0.22, size=2) * size
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        theta = rng.uniform(0, math.pi)
        mask |= _ellipse_inside(yy, xx, cy, cx, ry, rx, theta)
        cov = np.zeros((size, size))
        for dy in sub:
            for dx in sub:
                cov += _ellipse_inside(yy + dy, xx + dx, cy, cx, ry, rx, theta)
        coverage = np.maximum(coverage, cov / _SUPERSAMPLE**2)
    background = rng.uniform(0.15, 0.35)
    foreground = rng.uniform(0.6, 0.85)
    image = background + (foreground - background) * coverage
    image += rng.normal(0.0, 0.04, size=(size, size))
    return ImageSample(np.clip(image, 0.0, 1.0), mask.astype(np.uint8), f"synth_{seed}_{index:03d}")


def synth_dataset(seed: int, count: int, size: int) -> list[ImageSample]:
    """Bright anti-aliased ellipses (1 to 3) on a noisy darker background."""
    if size % 16:
        raise ShapeError(f"synthetic image size must be divisible by 16, got {size}")
    return [synth_sample(seed, i, size) for i in range(count)]


# ---------------------------------------------------------------------------
# splits and manifests
# ---------------------------------------------------------------------------

def split(samples: Sequence, fractions: Sequence[float], seed: int):
    """Shuffle and partition into (train, val, test).

    val and test get ``floor(fraction * n)`` items; train takes the rest.
    """
    if not samples:
        raise DataError("cannot split an empty sample list")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    n_test = int(math.floor(fractions[2] * n + 1e-9))
    n_train = n - n_val - n_test
    pick = [samples[i] for i in order]
    return pick[:n_train], pick[n_train : n_train + n_val], pick[n_train + n_val :]


class ManifestEntry(NamedTuple):
    id: str
    image_path: Path
    mask_path: Path


def read_manifest(path) -> list[ManifestEntry]:
    """Parse ``id<TAB>image<TAB>mask`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    base = path.parent
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        sid, img, msk = parts
        entries.append(ManifestEntry(sid, base / img, base / msk))
    if not entries:
        raise DataError(f"manifest {path} lists no samples")
    return entries


def write_manifest(path, entries: Sequence[tuple[str, str, str]]) -> None:
    lines = ["\t".join(map(str, e)) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load_samples(manifest_path, crop_box=None, resize_to=None) -> list[ImageSample]:
    samples = []
    for e in read_manifest(manifest_path):
        img, msk = load_pgm(e.image_path), load_mask(e.mask_path)
        if crop_box is not None:
            r0, r1, c0, c1 = crop_box
            img, msk = crop(img, (r0, r1), (c0, c1)), crop(msk, (r0, r1), (c0, c1))
        if resize_to is not None:
            img = resize(img, resize_to[0], resize_to[1], "bilinear")
            msk = resize(msk, resize_to[0], resize_to[1], "nearest").astype(np.uint8)
        samples.append(ImageSample(img, msk, e.id))
    return samples


def write_samples(out_dir, samples: Sequence[ImageSample]) -> Path:
    """Write image/mask PGM pairs and ``manifest.tsv`` into ``out_dir``."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    rows = []
    for s in samples:
        img_name, mask_name = f"{s.id}_image.pgm", f"{s.id}_mask.pgm"
        save_pgm(s.image, out / img_name)
        save_pgm(s.mask.astype(np.float64), out / mask_name)
        rows.append((s.id, img_name, mask_name))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, rows)
    return manifest
