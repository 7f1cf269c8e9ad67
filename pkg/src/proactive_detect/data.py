"""Synthetic generic / camouflaged scenes and their container file.

Pixel convention: a map is indexed ``[row, col]``; in the pseudo-map formula
``m`` is the column (x) and ``n`` the row (y).  Boxes use integer pixel
coordinates and cover pixels ``x1..x2`` and ``y1..y2`` inclusive, so an
object's silhouette is exactly its pseudo-map.

Container layout (all text lines ASCII, payload little-endian)::

    SYNTHDS 1
    spec <json>
    count <n>
    image <H> <W> <C>
    sha256 <hex digest of everything after the blank line>
    <blank line>
    per scene:
      image     H*W*C float32
      n_objects uint32
      n_objects * (x1, y1, x2, y2 float32, class int32)
      seg map   packed bits, ceil(H*W/8) bytes
"""
from __future__ import annotations

import colorsys
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import BBox, iou

FORMAT_MAGIC = "SYNTHDS"
FORMAT_VERSION = 1
MAX_PLACEMENT_ATTEMPTS = 100
CAMOUFLAGE_OFFSET = 0.02


class DatasetFormatError(ValueError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    """Checksum mismatch, or a record count that disagrees with the header."""


class PlacementError(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    image_size: int = 64
    channels: int = 3
    num_classes: int = 3
    objects_per_image: tuple = (1, 3)
    camouflage_level: float = 0.0
    background_noise_sigma: float = 0.04
    count: int = 100
    seed: int = 0
    min_box_frac: float = 0.2
    max_box_frac: float = 0.45

    def __post_init__(self):
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        lo, hi = self.objects_per_image
        if self.image_size <= 0 or self.count <= 0 or self.num_classes <= 0:
            raise ValueError("image_size, count and num_classes must be positive")
        if self.channels != 3:
            raise ValueError("only 3-channel images are supported")
        if not 0 <= lo <= hi:
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        if not 0.0 <= self.camouflage_level <= 1.0:
            raise ValueError(f"camouflage_level must lie in [0, 1], got {self.camouflage_level}")
        if self.background_noise_sigma < 0:
            raise ValueError("background_noise_sigma must be nonnegative")
        if not 0 < self.min_box_frac <= self.max_box_frac < 1:
            raise ValueError("box size fractions must satisfy 0 < min <= max < 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    annotations: list = field(default_factory=list)  # [(BBox, class_id)]
    seg_map: np.ndarray = None  # (H, W) uint8 in {0, 1}

    @property
    def boxes(self):
        return [b for b, _ in self.annotations]

    @property
    def classes(self):
        return [c for _, c in self.annotations]


def pseudo_seg_from_boxes(boxes, height, width):
    """Binary map: 1 where x1 <= col <= x2 and y1 <= row <= y2 for some box."""
    seg = np.zeros((height, width), dtype=np.uint8)
    cols = np.arange(width)
    rows = np.arange(height)
    for b in boxes:
        in_x = (cols >= b.x1) & (cols <= b.x2)
        in_y = (rows >= b.y1) & (rows <= b.y2)
        seg[np.ix_(in_y, in_x)] = 1
    return seg


def class_colors(num_classes):
    # evenly spaced saturated hues
    return np.array([colorsys.hsv_to_rgb(k / num_classes, 0.85, 0.9) for k in range(num_classes)], dtype=np.float64)


def _scene_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _background(rng, size, noise_sigma):
    base = rng.uniform(0.35, 0.65, size=3)
    coarse = rng.normal(0.0, 0.08, size=(4, 4, 3))
    reps = -(-size // 4)
    smooth = np.kron(coarse, np.ones((reps, reps, 1)))[:size, :size]
    # blur the blocky upsampling with a separable box filter
    k = max(reps // 2, 1)
    for axis in (0, 1):
        smooth = sum(np.roll(smooth, s, axis=axis) for s in range(-k, k + 1)) / (2 * k + 1)
    fine = rng.normal(0.0, noise_sigma, size=(size, size, 3))
    return np.clip(base + smooth + fine, 0.0, 1.0)


def _place_boxes(rng, spec, n):
    size = spec.image_size
    lo = max(2, int(round(spec.min_box_frac * size)))
    hi = max(lo, int(round(spec.max_box_frac * size)))
    boxes = []
    for _ in range(n):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            w = int(rng.integers(lo, hi + 1))
            h = int(rng.integers(lo, hi + 1))
            x1 = int(rng.integers(0, size - w))
            y1 = int(rng.integers(0, size - h))
            cand = BBox(x1, y1, x1 + w - 1, y1 + h - 1)
            if all(iou(cand, b) < 0.5 for b in boxes):
                boxes.append(cand)
                break
        else:
            raise PlacementError(f"could not place object {len(boxes) + 1} after {MAX_PLACEMENT_ATTEMPTS} attempts")
    return boxes


def generate_scene(spec: DatasetSpec, index: int) -> Scene:
    """Deterministic scene for (spec.seed, index)."""
    rng = _scene_rng(spec.seed, index)
    size = spec.image_size
    bg = _background(rng, size, spec.background_noise_sigma)
    lo, hi = spec.objects_per_image
    n = int(rng.integers(lo, hi + 1))
    boxes = _place_boxes(rng, spec, n)
    labels = [int(rng.integers(0, spec.num_classes)) for _ in boxes]
    colors = class_colors(spec.num_classes)
    chi = spec.camouflage_level
    image = bg.copy()
    for b, c in zip(boxes, labels):
        ys = slice(int(b.y1), int(b.y2) + 1)
        xs = slice(int(b.x1), int(b.x2) + 1)
        local = np.clip(bg[ys, xs] + CAMOUFLAGE_OFFSET, 0.0, 1.0)
        image[ys, xs] = (1.0 - chi) * colors[c] + chi * local
    seg = pseudo_seg_from_boxes(boxes, size, size)
    return Scene(image.astype(np.float32), list(zip(boxes, labels)), seg)


class Dataset:
    def __init__(self, spec: DatasetSpec, scenes: list):
        self.spec = spec
        self.scenes = scenes

    def __len__(self):
        return len(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    def images(self, idx=None):
        sel = self.scenes if idx is None else [self.scenes[i] for i in idx]
        return np.stack([s.image for s in sel])

    def seg_maps(self, idx=None):
        sel = self.scenes if idx is None else [self.scenes[i] for i in idx]
        return np.stack([s.seg_map for s in sel])


def generate_dataset(spec: DatasetSpec) -> Dataset:
    return Dataset(spec, [generate_scene(spec, i) for i in range(spec.count)])


def _encode_scene(scene):
    buf = io.BytesIO()
    buf.write(np.ascontiguousarray(scene.image, dtype="<f4").tobytes())
    buf.write(struct.pack("<I", len(scene.annotations)))
    for b, c in scene.annotations:
        buf.write(struct.pack("<ffffi", b.x1, b.y1, b.x2, b.y2, c))
    buf.write(np.packbits(scene.seg_map.reshape(-1).astype(np.uint8)).tobytes())
    return buf.getvalue()


def dumps_dataset(ds: Dataset) -> bytes:
    spec = ds.spec
    s = spec.image_size
    body = b"".join(_encode_scene(sc) for sc in ds.scenes)
    header = (
        f"{FORMAT_MAGIC} {FORMAT_VERSION}\n"
        f"spec {spec.to_json()}\n"
        f"count {len(ds.scenes)}\n"
        f"image {s} {s} {spec.channels}\n"
        f"sha256 {hashlib.sha256(body).hexdigest()}\n\n"
    )
    return header.encode("ascii") + body


def write_dataset(ds_or_spec, path):
    ds = ds_or_spec if isinstance(ds_or_spec, Dataset) else generate_dataset(ds_or_spec)
    blob = dumps_dataset(ds)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def loads_dataset(blob: bytes) -> Dataset:
    try:
        sep = blob.index(b"\n\n")
    except ValueError:
        raise TruncatedPayloadError("header terminator missing") from None
    lines = blob[:sep].decode("ascii").split("\n")
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != FORMAT_MAGIC:
        raise DatasetFormatError("not a dataset file")
    if int(magic[1]) != FORMAT_VERSION:
        raise VersionMismatchError(f"dataset format version {magic[1]}, expected {FORMAT_VERSION}")
    fields = dict(line.split(" ", 1) for line in lines[1:])
    spec = DatasetSpec.from_json(fields["spec"])
    count = int(fields["count"])
    h, w, ch = (int(v) for v in fields["image"].split())
    digest = fields["sha256"]
    body = memoryview(blob)[sep + 2:]
    img_bytes = h * w * ch * 4
    seg_bytes = -(-(h * w) // 8)
    scenes, pos = [], 0
    while pos < len(body):
        if len(scenes) == count:
            raise ChecksumError(f"more records than the header count {count}")
        if pos + img_bytes + 4 > len(body):
            raise TruncatedPayloadError(f"record {len(scenes)} truncated")
        image = np.frombuffer(body, dtype="<f4", count=h * w * ch, offset=pos).reshape(h, w, ch).astype(np.float32)
        pos += img_bytes
        (n_obj,) = struct.unpack_from("<I", body, pos)
        pos += 4
        if pos + 20 * n_obj + seg_bytes > len(body):
            raise TruncatedPayloadError(f"record {len(scenes)} truncated")
        ann = []
        for _ in range(n_obj):
            x1, y1, x2, y2, c = struct.unpack_from("<ffffi", body, pos)
            pos += 20
            ann.append((BBox(x1, y1, x2, y2), c))
        bits = np.frombuffer(body, dtype=np.uint8, count=seg_bytes, offset=pos)
        pos += seg_bytes
        seg = np.unpackbits(bits)[: h * w].reshape(h, w)
        scenes.append(Scene(image, ann, seg))
    if len(scenes) != count:
        raise ChecksumError(f"header count {count} but {len(scenes)} records")
    if hashlib.sha256(body).hexdigest() != digest:
        raise ChecksumError("payload checksum mismatch")
    return Dataset(spec, scenes)


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())
