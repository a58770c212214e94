"""Synthetic "shapes" detection dataset and its on-disk format.

Layout::

    images/NNNNN.ppm     binary P6, 8-bit RGB
    labels/NNNNN.txt     one object per line: ``class cx cy w h`` (relative)
    manifest.json        class names, histograms, split, provenance

Every image is rendered from its own RNG stream ``(seed, index)`` so output
does not depend on generation order.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import DatasetSpec
from .detector import BoxLabel

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "hexagon", "ring", "bar")


class DatasetFormatError(ValueError):
    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _rot(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return points @ np.array([[c, s], [-s, c]])


def _shape_polygons(kind: str, radius: float, angle: float) -> list[np.ndarray]:
    """Convex polygons (vertices relative to the centre) whose union is the shape."""
    r = radius
    if kind == "square":
        polys = [np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * r * 0.8]
    elif kind == "triangle":
        polys = [np.array([[0, -1], [0.95, 0.75], [-0.95, 0.75]]) * r]
    elif kind == "cross":
        a, b = 1.0, 0.33
        polys = [np.array([[-a, -b], [a, -b], [a, b], [-a, b]]) * r,
                 np.array([[-b, -a], [b, -a], [b, a], [-b, a]]) * r]
    elif kind == "diamond":
        polys = [np.array([[0, -1], [0.6, 0], [0, 1], [-0.6, 0]]) * r]
    elif kind == "hexagon":
        t = np.arange(6) * math.pi / 3
        polys = [np.stack([np.cos(t), np.sin(t)], axis=1) * r]
    elif kind == "bar":
        polys = [np.array([[-1, -0.35], [1, -0.35], [1, 0.35], [-1, 0.35]]) * r]
    else:
        raise ValueError(f"{kind} is not polygonal")
    return [_rot(p.astype(np.float64), angle) for p in polys]


def shape_extent(kind: str, radius: float, angle: float) -> tuple[float, float, float, float]:
    """Analytic bounding box (x1, y1, x2, y2) relative to the shape centre."""
    if kind in ("circle", "ring"):
        return -radius, -radius, radius, radius
    pts = np.concatenate(_shape_polygons(kind, radius, angle))
    return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()


def _inside_convex(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    n = len(poly)
    # orientation-agnostic: all cross products share one sign
    signs = []
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        signs.append((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0))
    pos = np.all([s >= 0 for s in signs], axis=0)
    neg = np.all([s <= 0 for s in signs], axis=0)
    return pos | neg


def shape_coverage(kind: str, cx: float, cy: float, radius: float, angle: float, size: int,
                   supersample: int = 4) -> np.ndarray:
    """Fraction of each pixel covered by the shape, from a regular sub-pixel grid."""
    k = supersample
    sub = (np.arange(size * k, dtype=np.float64) + 0.5) / k
    ys, xs = np.meshgrid(sub, sub, indexing="ij")
    dx, dy = xs - cx, ys - cy
    if kind == "circle":
        hit = dx * dx + dy * dy <= radius * radius
    elif kind == "ring":
        d2 = dx * dx + dy * dy
        hit = (d2 <= radius * radius) & (d2 >= (0.5 * radius) ** 2)
    else:
        hit = np.zeros(dx.shape, dtype=bool)
        for poly in _shape_polygons(kind, radius, angle):
            hit |= _inside_convex(dx, dy, poly)
    return hit.reshape(size, k, size, k).mean(axis=(1, 3))


def shape_mask(kind: str, cx: float, cy: float, radius: float, angle: float, size: int) -> np.ndarray:
    """Pixels touched by the shape."""
    return shape_coverage(kind, cx, cy, radius, angle, size) > 0


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = 0.5 + rng.uniform(-0.15, 0.15, size=(1, 4, 4)) + rng.uniform(-0.04, 0.04, size=(3, 4, 4))
    pos = (np.arange(size) + 0.5) / size * 3.0
    i0 = np.clip(np.floor(pos).astype(int), 0, 2)
    f = pos - i0
    rows = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i0 + 1, :] * f[None, :, None]
    img = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]
    return img + rng.normal(0.0, 0.02, size=(3, size, size))


def class_color(rng: np.random.Generator, class_id: int, num_classes: int) -> np.ndarray:
    hue = (class_id / num_classes + rng.uniform(-0.03, 0.03)) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.65, 1.0), rng.uniform(0.65, 1.0)))


@dataclass
class RenderedImage:
    pixels: np.ndarray  # uint8, 3 x H x W
    labels: list[BoxLabel]
    kinds: list[str] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)


def render_image(spec: DatasetSpec, index: int) -> RenderedImage:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    img = _background(rng, size)
    n_obj = 1 + int(rng.choice(spec.max_objects, p=spec.count_probs))
    placed: list[tuple[float, float, float, float]] = []
    labels, kinds, masks = [], [], []
    for _ in range(n_obj):
        cls = int(rng.choice(spec.num_classes, p=spec.class_weights))
        kind = SHAPES[cls]
        for _attempt in range(30):
            radius = 0.5 * size * rng.uniform(spec.min_size, spec.max_size)
            angle = rng.uniform(-0.35, 0.35)
            ex1, ey1, ex2, ey2 = shape_extent(kind, radius, angle)
            cx = rng.uniform(1.0 - ex1, size - 1.0 - ex2)
            cy = rng.uniform(1.0 - ey1, size - 1.0 - ey2)
            box = (cx + ex1, cy + ey1, cx + ex2, cy + ey2)
            if all(box[2] + 1 < b[0] or b[2] + 1 < box[0] or box[3] + 1 < b[1] or b[3] + 1 < box[1]
                   for b in placed):
                break
        else:
            continue
        alpha = shape_coverage(kind, cx, cy, radius, angle, size)
        mask = alpha > 0
        color = class_color(rng, cls, spec.num_classes)[:, None, None]
        fill = color + rng.normal(0.0, 0.02, size=(3, size, size))
        img = img * (1.0 - alpha) + fill * alpha
        placed.append(box)
        x1, y1, x2, y2 = box
        labels.append(BoxLabel(index, cls, float((x1 + x2) / 2 / size), float((y1 + y2) / 2 / size),
                               float((x2 - x1) / size), float((y2 - y1) / size)))
        kinds.append(kind)
        masks.append(mask)
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return RenderedImage(pixels, labels, kinds, masks)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_image(path, pixels: np.ndarray) -> None:
    """Write a 3 x H x W image as binary PPM. Float input in [0, 1] is quantized to 8 bit."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected 3 x H x W image, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    _, h, w = arr.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes())


def _read_header_token(buf: bytes, pos: int, path) -> tuple[bytes, int]:
    while True:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DatasetFormatError(path, f"truncated PPM header at byte {start}")
    return buf[start:pos], pos


def load_image_bytes(path) -> np.ndarray:
    """Read a binary PPM as uint8, shape 3 x H x W."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetFormatError(path, f"cannot read image: {exc}") from exc
    magic, pos = _read_header_token(buf, 0, path)
    if magic != b"P6":
        raise DatasetFormatError(path, f"bad magic {magic!r} at byte 0 (expected P6)")
    fields = []
    for _ in range(3):
        tok, pos = _read_header_token(buf, pos, path)
        try:
            fields.append(int(tok))
        except ValueError:
            raise DatasetFormatError(path, f"non-integer header field {tok!r} at byte {pos - len(tok)}")
    w, h, maxval = fields
    if maxval != 255 or w <= 0 or h <= 0:
        raise DatasetFormatError(path, f"unsupported header w={w} h={h} maxval={maxval}")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    if len(buf) - pos < need:
        raise DatasetFormatError(path, f"truncated pixel data: need {need} bytes from byte {pos}, "
                                       f"have {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()


def load_image(path) -> np.ndarray:
    """Read a PPM as float64 in [0, 1], shape 3 x H x W."""
    return load_image_bytes(path).astype(np.float64) / 255.0


def format_label(lb: BoxLabel) -> str:
    return " ".join([str(int(lb.class_id))] + [repr(float(v)) for v in (lb.cx, lb.cy, lb.w, lb.h)])


def parse_label_line(line: str, batch_index: int = 0, path="<label>", lineno: int = 1) -> BoxLabel:
    parts = line.split()
    if len(parts) not in (5, 6):
        raise DatasetFormatError(path, f"line {lineno}: expected 5 fields, got {len(parts)}")
    try:
        cls = int(parts[0])
        vals = [float(p) for p in parts[1:]]
    except ValueError:
        raise DatasetFormatError(path, f"line {lineno}: unparsable field in {line.strip()!r}") from None
    conf = vals[4] if len(vals) == 5 else 1.0
    return BoxLabel(batch_index, cls, vals[0], vals[1], vals[2], vals[3], conf)


def save_labels(path, labels: Sequence[BoxLabel]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for lb in labels:
            fh.write(format_label(lb) + "\n")


def load_labels(path, batch_index: int = 0) -> list[BoxLabel]:
    try:
        text = Path(path).read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(path, f"cannot read labels: {exc}") from exc
    return [parse_label_line(line, batch_index, path, i + 1)
            for i, line in enumerate(text.splitlines()) if line.strip()]


# ---------------------------------------------------------------------------
# in-memory dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    pixels: np.ndarray  # uint8, N x 3 x H x W
    labels: list[list[BoxLabel]]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def image_size(self) -> int:
        return int(self.pixels.shape[-1])

    def images(self, indices: Sequence[int] | None = None) -> np.ndarray:
        px = self.pixels if indices is None else self.pixels[np.asarray(indices, dtype=np.int64)]
        return px.astype(np.float64) / 255.0

    def subset(self, indices: Sequence[int]) -> Dataset:
        idx = [int(i) for i in indices]
        labels = [[lb.with_batch(j) for lb in self.labels[i]] for j, i in enumerate(idx)]
        return Dataset(self.pixels[np.asarray(idx, dtype=np.int64)], labels, dict(self.manifest))

    def split(self, name: str) -> Dataset:
        split = self.manifest.get("split")
        if not split:
            return self
        lo, hi = split[name]
        return self.subset(range(lo, hi))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None
                ) -> Iterator[tuple[np.ndarray, list[BoxLabel], np.ndarray]]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            labels = [lb.with_batch(j) for j, i in enumerate(idx) for lb in self.labels[i]]
            yield self.images(idx), labels, idx

    def count_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for lbs in self.labels:
            hist[len(lbs)] = hist.get(len(lbs), 0) + 1
        return dict(sorted(hist.items()))


def class_histogram(labels: Sequence[Sequence[BoxLabel]], num_classes: int) -> list[int]:
    hist = [0] * num_classes
    for lbs in labels:
        for lb in lbs:
            hist[lb.class_id] += 1
    return hist


def write_dataset(root, pixels: np.ndarray, labels: Sequence[Sequence[BoxLabel]], manifest: dict) -> None:
    """Write images, label files, and the manifest; histograms are filled in here."""
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetFormatError(root, f"cannot create dataset directory: {exc}") from exc
    for i, (px, lbs) in enumerate(zip(pixels, labels)):
        save_image(root / "images" / f"{i:05d}.ppm", px)
        save_labels(root / "labels" / f"{i:05d}.txt", lbs)
    num_classes = int(manifest.get("num_classes", 1 + max((lb.class_id for l in labels for lb in l),
                                                          default=0)))
    manifest = dict(manifest)
    manifest["num_images"] = len(pixels)
    manifest["image_size"] = int(np.asarray(pixels).shape[-1])
    manifest["class_histogram"] = class_histogram(labels, num_classes)
    manifest["label_counts"] = [len(l) for l in labels]
    counts: dict[str, int] = {}
    for l in labels:
        counts[str(len(l))] = counts.get(str(len(l)), 0) + 1
    manifest["count_histogram"] = dict(sorted(counts.items(), key=lambda kv: int(kv[0])))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def generate_dataset(spec: DatasetSpec, root) -> Dataset:
    if spec.num_classes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} classes supported")
    rendered = [render_image(spec, i) for i in range(spec.num_images)]
    pixels = np.stack([r.pixels for r in rendered])
    labels = [r.labels for r in rendered]
    n_train = int(round(spec.num_images * (1.0 - spec.val_fraction)))
    manifest = {
        "source": "real",
        "class_names": list(SHAPES[:spec.num_classes]),
        "num_classes": spec.num_classes,
        "class_weights": [float(w) for w in spec.class_weights],
        "split": {"train": [0, n_train], "val": [n_train, spec.num_images]},
        "seed": spec.seed,
    }
    write_dataset(root, pixels, labels, manifest)
    return load_dataset(root)


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as exc:
        raise DatasetFormatError(mpath, f"cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(mpath, f"malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    n = int(manifest["num_images"])
    pixels, labels = [], []
    for i in range(n):
        pixels.append(load_image_bytes(root / "images" / f"{i:05d}.ppm"))
        labels.append(load_labels(root / "labels" / f"{i:05d}.txt", i))
    if n == 0:
        return Dataset(np.zeros((0, 3, 1, 1), dtype=np.uint8), [], manifest)
    return Dataset(np.stack(pixels), labels, manifest)


def dataset_from_arrays(images: np.ndarray, labels: Sequence[Sequence[BoxLabel]], manifest: dict) -> Dataset:
    """Build a dataset from float images in [0, 1], quantized exactly as a save/load would."""
    pixels = np.clip(np.round(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)
    labels = [[lb.with_batch(i) for lb in lbs] for i, lbs in enumerate(labels)]
    return Dataset(pixels, labels, manifest)


def tree_digest(root) -> str:
    """SHA-256 over relative paths and bytes of every file below ``root``."""
    h = hashlib.sha256()
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
