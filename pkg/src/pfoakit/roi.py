"""Confidence-gated patellar ROI selection and a sliding-window stand-in detector.

The gate keeps the highest-confidence detection at or above the threshold
(default 0.90) and otherwise rejects the knee. The stand-in detector slides a
fixed-size window over a coarse grid, scores each window with a small
patella/background CNN, and prunes overlaps with greedy NMS.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from pfoakit.imaging import Image
from pfoakit import neuralnet

DEFAULT_CONFIDENCE_THRESHOLD = 0.90
NMS_IOU_THRESHOLD = 0.3

ANNOTATION_COLUMNS = ("subject_id", "side", "visit", "x", "y", "w", "h")


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned box: top-left pixel (x, y), width w, height h."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box must have w,h >= 1, got {self.w}x{self.h}")


@dataclass(frozen=True)
class RoiDetection:
    box: RoiBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0,1], got {self.confidence}")


def iou(a: RoiBox, b: RoiBox) -> float:
    """Intersection-over-union of two boxes."""
    ix0 = max(a.x, b.x)
    iy0 = max(a.y, b.y)
    ix1 = min(a.x + a.w, b.x + b.w)
    iy1 = min(a.y + a.h, b.y + b.h)
    iw = max(0, ix1 - ix0)
    ih = max(0, iy1 - iy0)
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def select_roi(
    detections: Sequence[RoiDetection],
    threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
) -> Optional[RoiDetection]:
    """Highest-confidence detection at or above the threshold, else None.

    Ties keep the earliest-listed detection. A None result means the knee is
    excluded upstream.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0,1], got {threshold}")
    best = None
    for det in detections:
        if det.confidence >= threshold and (best is None or det.confidence > best.confidence):
            best = det
    return best


def nms(detections: Sequence[RoiDetection], iou_threshold: float = NMS_IOU_THRESHOLD) -> list[RoiDetection]:
    """Greedy non-maximum suppression; ties resolved by input order."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    kept: list[RoiDetection] = []
    for i in order:
        cand = detections[i]
        if all(iou(cand.box, k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def _window_grid(img_len: int, win_len: int, stride: int) -> list[int]:
    positions = list(range(0, img_len - win_len + 1, stride))
    last = img_len - win_len
    if positions[-1] != last:
        positions.append(last)
    return positions


def detect_standin(img: Image, scorer: neuralnet.CnnModel) -> list[RoiDetection]:
    """Slide the scorer's input window over the image and return NMS survivors.

    Window size comes from the scorer's descriptor; the stride is a quarter
    window in each axis. Every window becomes a detection scored with the
    patella-class probability; greedy NMS at IoU 0.3 prunes overlaps.
    """
    if img.depth_bits != 8:
        raise ValueError("detect_standin expects a preprocessed 8-bit image")
    win_h, win_w = scorer.descriptor.input_shape
    if img.height < win_h or img.width < win_w:
        raise ValueError(
            f"image {img.height}x{img.width} is smaller than the {win_h}x{win_w} scoring window"
        )
    ys = _window_grid(img.height, win_h, max(1, win_h // 4))
    xs = _window_grid(img.width, win_w, max(1, win_w // 4))
    px = img.pixels
    windows = np.stack([px[y : y + win_h, x : x + win_w] for y in ys for x in xs])
    probs = neuralnet.predict_proba(scorer, windows)
    detections = [
        RoiDetection(RoiBox(x, y, win_w, win_h), float(p))
        for (y, x), p in zip(((y, x) for y in ys for x in xs), probs)
    ]
    return nms(detections, NMS_IOU_THRESHOLD)


def save_annotations(annotations: dict[tuple[str, str, str], RoiBox], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_COLUMNS)
        for (sid, side, visit) in sorted(annotations):
            box = annotations[(sid, side, visit)]
            writer.writerow([sid, side, visit, box.x, box.y, box.w, box.h])


def load_annotations(path) -> dict[tuple[str, str, str], RoiDetection]:
    """Read manual box annotations; confidence is fixed at 1.0.

    Boxes are not validated against image bounds here; a box outside its
    image fails later, at crop time.
    """
    out: dict[tuple[str, str, str], RoiDetection] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != ANNOTATION_COLUMNS:
            raise ValueError(f"unexpected annotation header {header}")
        for i, cells in enumerate(reader, start=2):
            if not cells:
                continue
            sid, side, visit, x, y, w, h = cells
            key = (sid, side, visit)
            if key in out:
                raise ValueError(f"row {i}: duplicate annotation key {key}")
            out[key] = RoiDetection(RoiBox(int(x), int(y), int(w), int(h)), 1.0)
    return out


def build_window_dataset(
    images: Sequence[Image],
    boxes: Sequence[RoiBox],
    window_shape: tuple[int, int],
    negatives_per_image: int = 3,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Assemble patella/background window crops for scorer training.

    Positives are windows centered on the annotated box (clamped to the
    image); negatives are random windows with IoU < 0.2 against it.
    """
    win_h, win_w = window_shape
    rng = np.random.default_rng(seed)
    crops, labels = [], []
    for img, box in zip(images, boxes):
        if img.height < win_h or img.width < win_w:
            raise ValueError("image smaller than scoring window")
        cy = box.y + box.h // 2
        cx = box.x + box.w // 2
        y = int(np.clip(cy - win_h // 2, 0, img.height - win_h))
        x = int(np.clip(cx - win_w // 2, 0, img.width - win_w))
        crops.append(img.pixels[y : y + win_h, x : x + win_w])
        labels.append(1)
        tries = 0
        found = 0
        while found < negatives_per_image and tries < 50 * negatives_per_image:
            tries += 1
            ny = int(rng.integers(0, img.height - win_h + 1))
            nx = int(rng.integers(0, img.width - win_w + 1))
            cand = RoiBox(nx, ny, win_w, win_h)
            if iou(cand, box) < 0.2:
                crops.append(img.pixels[ny : ny + win_h, nx : nx + win_w])
                labels.append(0)
                found += 1
    return np.stack(crops), np.array(labels, dtype=np.int64)


def train_standin_scorer(
    images: Sequence[Image],
    boxes: Sequence[RoiBox],
    window_shape: tuple[int, int] = (48, 32),
    seed: int = 0,
    epochs: int = 6,
) -> neuralnet.CnnModel:
    """Train the small patella/background window scorer."""
    crops, labels = build_window_dataset(images, boxes, window_shape, seed=seed)
    descriptor = neuralnet.ArchitectureDescriptor(
        input_shape=window_shape, channels=(4, 8, 16), fc_width=32
    )
    cfg = neuralnet.TrainConfig(epochs=epochs, seed=seed)
    model, _ = neuralnet.train((crops, labels), cfg, descriptor=descriptor)
    return model
