"""Single-scale grid detector with an optional segmentation head.

The trunk is four conv-BN-ReLU blocks; 2x average pools after the leading
blocks bring the feature map down to the ``grid x grid`` cell layout.  The
detection head emits per cell ``[objectness, tx, ty, tw, th, class logits]``
where the box center is ``(col + sigmoid(tx)) * cell`` and the width is
``cell * exp(tw)``.  The segmentation head adds a full-resolution 1x1 conv
on the first block's features to the upsampled coarse logits.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autograd import (
    Conv2d,
    ConvBNReLU,
    Module,
    ShapeError,
    Tensor,
    as_tensor,
    avg_pool2,
    bce_with_logits,
    l2_norm,
    log_softmax,
    upsample2,
)
from .metrics import BBox, Detection, iou

HEADS = ("GOD", "COD", "both")
OFFSET_CLIP = 1e-6
LOG_SCALE_CLIP = 4.0


@dataclass
class DetectorConfig:
    image_size: int = 64
    num_classes: int = 3
    grid: int = 8
    widths: tuple = (16, 32, 32, 32)
    head: str = "both"  # GOD (boxes), COD (segmentation) or both on a shared trunk
    score_threshold: float = 0.3
    nms_iou: float = 0.5

    def __post_init__(self):
        self.widths = tuple(int(v) for v in self.widths)
        if len(self.widths) != 4:
            raise ValueError("the trunk has exactly 4 blocks")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        ratio = self.image_size // self.grid
        if self.image_size % self.grid or ratio & (ratio - 1) or ratio > 8:
            raise ValueError(f"image_size / grid must be 1, 2, 4 or 8 (got {self.image_size}/{self.grid})")

    @property
    def pools(self):
        return int(math.log2(self.image_size // self.grid))

    @property
    def cell(self):
        return self.image_size / self.grid

    @property
    def has_god(self):
        return self.head in ("GOD", "both")

    @property
    def has_cod(self):
        return self.head in ("COD", "both")


class Detector(Module):
    def __init__(self, config: DetectorConfig, seed: int, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(201,)))
        w = config.widths
        self.blocks = [ConvBNReLU(3 if k == 0 else w[k - 1], w[k], rng, dtype=dtype) for k in range(4)]
        self.god = Conv2d(w[3], 5 + config.num_classes, rng, kernel=1, dtype=dtype) if config.has_god else None
        if config.has_cod:
            self.cod_coarse = Conv2d(w[3], 1, rng, kernel=3, dtype=dtype)
            self.cod_fine = Conv2d(w[0], 1, rng, kernel=1, dtype=dtype)
        else:
            self.cod_coarse = self.cod_fine = None

    def forward(self, x):
        """Returns ``{"grid": (B,G,G,5+N), "seg": (B,H,W,1) in [0,1]}`` (heads present only)."""
        x = as_tensor(x)
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.image_size, c.image_size, 3):
            raise ShapeError(f"detector expects (B, {c.image_size}, {c.image_size}, 3), got {x.shape}")
        f0 = self.blocks[0](x)
        h = f0
        for k in range(1, 4):
            if k <= c.pools:
                h = avg_pool2(h)
            h = self.blocks[k](h)
        out = {}
        if self.god is not None:
            out["grid"] = self.god(h)
        if self.cod_coarse is not None:
            coarse = self.cod_coarse(h)
            for _ in range(c.pools):
                coarse = upsample2(coarse)
            out["seg"] = (coarse + self.cod_fine(f0)).sigmoid()
        return out


# -- targets ------------------------------------------------------------------

@dataclass
class GridTargets:
    mask: np.ndarray  # (B, G, G) 1 at responsible cells
    boxes: np.ndarray  # (B, G, G, 4) ground-truth boxes normalized by image size
    classes: np.ndarray  # (B, G, G, N) one-hot
    collisions: np.ndarray  # (B,) bool, scene had two centers in one cell


def box_center_cell(box, cell, grid):
    cx, cy = (box.x1 + box.x2) / 2.0, (box.y1 + box.y2) / 2.0
    col = min(int(math.floor(cx / cell)), grid - 1)
    row = min(int(math.floor(cy / cell)), grid - 1)
    return row, col


def assign_targets(annotations_batch, config: DetectorConfig) -> GridTargets:
    """Center-cell assignment; on a collision the larger box wins and the scene is flagged."""
    b, g, n = len(annotations_batch), config.grid, config.num_classes
    mask = np.zeros((b, g, g), dtype=np.float32)
    boxes = np.zeros((b, g, g, 4), dtype=np.float32)
    classes = np.zeros((b, g, g, n), dtype=np.float32)
    collisions = np.zeros(b, dtype=bool)
    area = np.zeros((b, g, g))
    for i, ann in enumerate(annotations_batch):
        for box, cls in ann:
            r, c = box_center_cell(box, config.cell, g)
            if mask[i, r, c]:
                collisions[i] = True
                if box.area <= area[i, r, c]:
                    continue
            mask[i, r, c] = 1.0
            area[i, r, c] = box.area
            boxes[i, r, c] = np.asarray(box.as_tuple()) / config.image_size
            classes[i, r, c] = 0.0
            classes[i, r, c, int(cls)] = 1.0
    return GridTargets(mask, boxes, classes, collisions)


def encode_box(box, row, col, config: DetectorConfig):
    """Inverse of the decoder: (tx, ty, tw, th) for ``box`` in cell (row, col)."""
    cell = config.cell
    cx, cy = (box.x1 + box.x2) / 2.0, (box.y1 + box.y2) / 2.0
    fx = float(np.clip(cx / cell - col, OFFSET_CLIP, 1 - OFFSET_CLIP))
    fy = float(np.clip(cy / cell - row, OFFSET_CLIP, 1 - OFFSET_CLIP))
    return (
        math.log(fx / (1 - fx)),
        math.log(fy / (1 - fy)),
        math.log((box.x2 - box.x1) / cell),
        math.log((box.y2 - box.y1) / cell),
    )


def _cell_origins(config):
    g = config.grid
    cols = np.broadcast_to(np.arange(g, dtype=np.float32)[None, :], (g, g))
    rows = np.broadcast_to(np.arange(g, dtype=np.float32)[:, None], (g, g))
    return cols[None], rows[None]


def decode_boxes(grid_pred, config: DetectorConfig):
    """Tensor (B, G, G, 4) of (x1, y1, x2, y2) normalized by image size."""
    grid_pred = as_tensor(grid_pred)
    cols, rows = _cell_origins(config)
    inv_g = 1.0 / config.grid
    cx = (grid_pred[..., 1].sigmoid() + Tensor(cols)) * inv_g
    cy = (grid_pred[..., 2].sigmoid() + Tensor(rows)) * inv_g
    w = grid_pred[..., 3].clamp(-LOG_SCALE_CLIP, LOG_SCALE_CLIP).exp() * inv_g
    h = grid_pred[..., 4].clamp(-LOG_SCALE_CLIP, LOG_SCALE_CLIP).exp() * inv_g
    parts = [cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5]
    return _stack_last(parts)


def _stack_last(parts):
    """Stack same-shape tensors along a new last axis."""
    if any(p.shape != parts[0].shape for p in parts):
        raise ShapeError("stack: parts differ in shape")
    out_data = np.stack([p.data for p in parts], axis=-1)

    def bw(g):
        for k, p in enumerate(parts):
            p._accum(g[..., k])

    return Tensor._make(out_data, tuple(parts), "stack", bw)


# -- losses -------------------------------------------------------------------

def detection_loss(grid_pred, targets: GridTargets, config: DetectorConfig, components=False):
    """Box L2 + class cross-entropy at responsible cells, objectness BCE over all cells.

    Each term is summed over the batch and divided by the batch size; the
    objectness term is a per-image mean over cells.
    """
    grid_pred = as_tensor(grid_pred)
    g, n = config.grid, config.num_classes
    if grid_pred.ndim != 4 or grid_pred.shape[1:] != (g, g, 5 + n):
        raise ShapeError(f"grid prediction must be (B, {g}, {g}, {5 + n}), got {grid_pred.shape}")
    b = grid_pred.shape[0]
    boxes = decode_boxes(grid_pred, config)
    diff = (boxes - Tensor(targets.boxes)) * Tensor(targets.mask[..., None])
    box_term = l2_norm(diff, axis=-1).sum() * (1.0 / b)
    logp = log_softmax(grid_pred[..., 5:], axis=-1)
    cls_term = -(logp * Tensor(targets.classes)).sum() * (1.0 / b)
    obj_term = bce_with_logits(grid_pred[..., 0], targets.mask).sum() * (1.0 / (b * g * g))
    total = box_term + cls_term + obj_term
    if not np.isfinite(total.data):
        raise FloatingPointError("non-finite detection loss")
    if components:
        return total, {"box": float(box_term.data), "cls": float(cls_term.data), "obj": float(obj_term.data)}
    return total


def segmentation_loss(pred, gt):
    """Per image ||pred - gt||_2 / sqrt(H*W), averaged over the batch."""
    pred = as_tensor(pred)
    b = pred.shape[0]
    g = np.asarray(gt, dtype=pred.dtype).reshape(pred.shape)
    flat = (pred - Tensor(g)).reshape(b, -1)
    return l2_norm(flat, axis=1).sum() * (1.0 / (b * math.sqrt(flat.shape[1])))


# -- decoding -----------------------------------------------------------------

def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid_np(z):
    with np.errstate(over="ignore"):
        return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(np.minimum(z, 0)) / (1.0 + np.exp(np.minimum(z, 0))))


def nms(candidates, nms_iou):
    """Greedy suppression of (score, cell_index, box, cls) tuples; class agnostic."""
    order = sorted(candidates, key=lambda c: (-c[0], c[1]))
    kept = []
    for cand in order:
        if all(iou(cand[2], k[2]) <= nms_iou for k in kept):
            kept.append(cand)
    return kept


def decode_predictions(grid_pred, config: DetectorConfig, score_threshold=None, nms_iou=None, image_id=0):
    """Detections of one image's (G, G, 5+N) grid, sorted by descending score."""
    z = np.asarray(grid_pred.data if isinstance(grid_pred, Tensor) else grid_pred, dtype=np.float64)
    if z.ndim == 4:
        if z.shape[0] != 1:
            raise ShapeError("decode_predictions takes a single image; loop over the batch")
        z = z[0]
    thr = config.score_threshold if score_threshold is None else score_threshold
    nms_iou = config.nms_iou if nms_iou is None else nms_iou
    g, size = config.grid, config.image_size
    obj = _sigmoid_np(z[..., 0])
    probs = _softmax(z[..., 5:])
    scores = obj * probs.max(axis=-1)
    labels = probs.argmax(axis=-1)
    boxes = decode_boxes(Tensor(z[None]), config).data[0] * size
    cands = []
    for r in range(g):
        for c in range(g):
            s = float(scores[r, c])
            if not s > thr:
                continue
            x1, y1, x2, y2 = np.clip(boxes[r, c], 0.0, size)
            if not (x2 > x1 and y2 > y1):
                continue
            cands.append((s, r * g + c, BBox(float(x1), float(y1), float(x2), float(y2)), int(labels[r, c])))
    return [Detection(box, cls, s, image_id) for s, _, box, cls in nms(cands, nms_iou)]


# -- prediction dumps -----------------------------------------------------------

def prediction_record(image_id, detections=None, seg=None):
    rec = {"image_id": int(image_id)}
    if detections is not None:
        rec["detections"] = [
            {"box": [round(v, 6) for v in d.box.as_tuple()], "class_id": d.class_id, "score": round(d.score, 6)}
            for d in detections
        ]
    if seg is not None:
        s = np.asarray(seg, dtype=np.float64)
        rec["seg"] = {"mean": round(float(s.mean()), 6), "min": round(float(s.min()), 6),
                      "max": round(float(s.max()), 6), "frac_above_half": round(float((s > 0.5).mean()), 6)}
    return rec


def write_predictions(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_predictions(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
