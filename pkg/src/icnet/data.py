"""Synthetic segmentation scenes and PPM/PGM dataset I/O.

Scenes are drawn with integer arithmetic only (integer RNG draws, integer
geometry, integer colours and noise) so the same seed produces the same
bytes on any platform.
"""

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from icnet.errors import DataError, ParseError

IGNORE = 255

# class 0 is background; further classes cycle through this table
PALETTE = np.array(
    [
        [96, 112, 96],
        [200, 60, 50],
        [50, 80, 200],
        [230, 200, 40],
        [60, 190, 90],
        [190, 80, 200],
        [40, 200, 210],
        [240, 140, 40],
    ],
    dtype=np.int64,
)


@dataclass
class SceneSpec:
    height: int = 96
    width: int = 96
    num_classes: int = 5
    rects: int = 2
    disks: int = 3
    poles: int = 3
    blobs: int = 4
    color_jitter: int = 40
    noise: int = 10
    seed: int = 0

    def validate(self):
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            raise DataError(f"scene dims {self.height}x{self.width} must be positive multiples of 32")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2 (background plus one object class)")
        if min(self.rects, self.disks, self.poles, self.blobs) < 0:
            raise DataError("shape counts must be non-negative")
        return self


def _class_color(cls, rng, jitter):
    base = PALETTE[cls % len(PALETTE)]
    if cls >= len(PALETTE):
        base = (base + 97 * (cls // len(PALETTE))) % 256
    return np.clip(base + rng.integers(-jitter, jitter + 1, size=3), 0, 255)


def _disk_mask(h, w, cy, cx, r):
    yy, xx = np.ogrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def gen_synthetic_scene(spec):
    """Returns ``(image float32 (3, H, W) in [0, 1], label uint8 (H, W))``.

    Shapes are painted back to front: large rectangles, disks, small blobs,
    then thin poles. Every object class assigned to a shape is guaranteed a
    visible pixel; whenever any object is requested at least one pole is drawn.
    """
    spec.validate()
    h, w, n = spec.height, spec.width, spec.num_classes
    rng = np.random.default_rng(spec.seed)
    label = np.zeros((h, w), dtype=np.uint8)
    color = np.empty((3, h, w), dtype=np.int64)
    color[:] = _class_color(0, rng, spec.color_jitter)[:, None, None]

    n_obj = spec.rects + spec.disks + spec.poles + spec.blobs
    poles = max(spec.poles, 1) if n_obj else 0
    kinds = ["rect"] * spec.rects + ["disk"] * spec.disks + ["blob"] * spec.blobs + ["pole"] * poles
    start = int(rng.integers(0, n - 1))
    classes = [1 + (start + i) % (n - 1) for i in range(len(kinds))]
    blob_cap = (h * w) // 200  # strictly under 0.5 % of the image

    def paint(mask, cls):
        label[mask] = cls
        color[:, mask] = _class_color(cls, rng, spec.color_jitter)[:, None]

    for kind, cls in zip(kinds, classes):
        if kind == "rect":
            rh = int(rng.integers(h // 5, h // 2 + 1))
            rw = int(rng.integers(w // 5, w // 2 + 1))
            y0, x0 = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
            mask = np.zeros((h, w), bool)
            mask[y0 : y0 + rh, x0 : x0 + rw] = True
        elif kind == "disk":
            r = int(rng.integers(max(3, h // 16), h // 5 + 1))
            mask = _disk_mask(h, w, int(rng.integers(0, h)), int(rng.integers(0, w)), r)
        elif kind == "blob":
            side = int(rng.integers(2, 7))
            while side * side >= blob_cap and side > 1:
                side -= 1
            y0, x0 = int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1))
            mask = np.zeros((h, w), bool)
            mask[y0 : y0 + side, x0 : x0 + side] = True
        else:  # pole: 1-3 px wide, vertical
            pw = int(rng.integers(1, 4))
            ph = int(rng.integers(h // 4, (3 * h) // 4 + 1))
            y0, x0 = int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))
            mask = np.zeros((h, w), bool)
            mask[y0 : y0 + ph, x0 : x0 + pw] = True
        paint(mask, cls)

    # occluded classes get a small stamp in their own grid cell, on top
    missing = sorted(set(classes) - set(np.unique(label).tolist()))
    cell = 8
    cells = rng.permutation((h // cell) * (w // cell))
    for i, cls in enumerate(missing):
        cy, cx = divmod(int(cells[i]), w // cell)
        mask = np.zeros((h, w), bool)
        mask[cy * cell + 2 : cy * cell + 6, cx * cell + 2 : cx * cell + 6] = True
        paint(mask, cls)

    noisy = color + rng.integers(-spec.noise, spec.noise + 1, size=color.shape)
    image = np.clip(noisy, 0, 255).astype(np.uint8)
    return image.astype(np.float32) / np.float32(255), label


def scene_seed(base_seed, index):
    """Independent per-scene seed (generation is order-free)."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, np.uint64)[0] >> 1)


def make_dataset(count, spec, offset=0):
    """``count`` scenes as stacked arrays ``(images (N,3,H,W), labels (N,H,W))``."""
    images = np.empty((count, 3, spec.height, spec.width), np.float32)
    labels = np.empty((count, spec.height, spec.width), np.uint8)
    for i in range(count):
        s = SceneSpec(**{**spec.__dict__, "seed": scene_seed(spec.seed, offset + i)})
        images[i], labels[i] = gen_synthetic_scene(s)
    return images, labels


# ---------------------------------------------------------------------------
# Netpbm I/O


def _to_bytes(image):
    return np.clip(np.rint(np.asarray(image, np.float64) * 255), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """Write a (3, H, W) float image in [0, 1] as binary P6."""
    img = _to_bytes(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"PPM image must be (3, H, W), got {img.shape}")
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def write_pgm(path, label):
    lab = np.asarray(label)
    if lab.ndim != 2 or lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise DataError("PGM label must be a 2-D map with values in 0..255")
    h, w = lab.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(lab.astype(np.uint8).tobytes())


def _parse_header(buf, magic):
    """Returns (width, height, maxval, data offset)."""
    if buf[:2] != magic:
        raise ParseError(f"bad magic {buf[:2]!r}, expected {magic!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and comments
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise ParseError("truncated or malformed header: expected an integer", start)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ParseError("malformed header: missing whitespace before raster", pos)
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise ParseError(f"non-positive dimensions {w}x{h}", 2)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval} (only 255)", pos)
    return w, h, maxval, pos + 1


def read_ppm(path):
    """Read binary P6 into a float32 (3, H, W) tensor scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    w, h, _, off = _parse_header(buf, b"P6")
    need = off + 3 * w * h
    if len(buf) < need:
        raise ParseError(f"raster truncated: need {3 * w * h} bytes, have {len(buf) - off}", len(buf))
    img = np.frombuffer(buf, np.uint8, 3 * w * h, off).reshape(h, w, 3).transpose(2, 0, 1)
    return img.astype(np.float32) / np.float32(255)


def read_pgm(path, num_classes=None):
    """Read binary P5 as a uint8 (H, W) label map; 255 marks ignore."""
    buf = Path(path).read_bytes()
    w, h, _, off = _parse_header(buf, b"P5")
    if len(buf) < off + w * h:
        raise ParseError(f"raster truncated: need {w * h} bytes, have {len(buf) - off}", len(buf))
    lab = np.frombuffer(buf, np.uint8, w * h, off).reshape(h, w).copy()
    if num_classes is not None:
        check_labels(lab, num_classes, path)
    return lab


def check_labels(lab, num_classes, where="label map"):
    bad = (lab != IGNORE) & (lab >= num_classes)
    if bad.any():
        raise DataError(f"{where}: label value {int(lab[bad][0])} >= num_classes {num_classes}")


def write_dataset(root, images, labels):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        write_ppm(root / "images" / f"{i:06d}.ppm", img)
        write_pgm(root / "labels" / f"{i:06d}.pgm", lab)
        lines.append(f"{i:06d} {lab.shape[1]} {lab.shape[0]}\n")
    (root / "manifest.txt").write_text("".join(lines))


def read_manifest(root):
    entries = []
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise DataError(f"{path} not found")
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 'id width height'")
        entries.append((parts[0], int(parts[1]), int(parts[2])))
    return entries


def load_dataset(root, num_classes=None, with_labels=True):
    """Load a dataset directory into stacked arrays."""
    root = Path(root)
    images, labels = [], []
    for sid, w, h in read_manifest(root):
        img = read_ppm(root / "images" / f"{sid}.ppm")
        if img.shape[1:] != (h, w):
            raise DataError(f"image {sid} is {img.shape[2]}x{img.shape[1]}, manifest says {w}x{h}")
        images.append(img)
        if with_labels:
            lab = read_pgm(root / "labels" / f"{sid}.pgm", num_classes)
            if lab.shape != img.shape[1:]:
                raise DataError(f"label {sid} dims {lab.shape} differ from image dims {img.shape[1:]}")
            labels.append(lab)
    if not images:
        raise DataError(f"dataset {root} is empty")
    return np.stack(images), (np.stack(labels) if with_labels else None)


def write_labels(root, ids, labels):
    os.makedirs(root, exist_ok=True)
    for sid, lab in zip(ids, labels):
        write_pgm(Path(root) / f"{sid}.pgm", lab)
