"""Box arithmetic, proposal jittering, RoI-Align and NMS.

Boxes are (x1, y1, x2, y2) in pixels with x1 < x2, y1 < y2. Functions take
single boxes or (n, 4) arrays as noted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .tensor import Tensor

BBOX_CLIP = float(np.log(1000.0 / 16))


def _as_boxes(b) -> np.ndarray:
    arr = np.asarray(b, dtype=np.float64)
    return arr.reshape(-1, 4)


def check_boxes(boxes) -> np.ndarray:
    arr = _as_boxes(boxes)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite box coordinates")
    bad = (arr[:, 2] <= arr[:, 0]) | (arr[:, 3] <= arr[:, 1])
    if bad.any():
        raise ValueError(f"degenerate box: {arr[bad][0].tolist()}")
    return arr


def area(boxes) -> np.ndarray:
    b = _as_boxes(boxes)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def box_iou(a, b) -> np.ndarray:
    """Pairwise IoU matrix of shape (len(a), len(b))."""
    a, b = _as_boxes(a), _as_boxes(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    return inter / union


def iou(a, b) -> float:
    """IoU of two single boxes; raises on degenerate input."""
    check_boxes(a)
    check_boxes(b)
    return float(box_iou(a, b)[0, 0])


def encode_delta(proposals, gts) -> np.ndarray:
    """(dx, dy, dw, dh) taking each proposal onto its ground-truth box."""
    p, g = _as_boxes(proposals), _as_boxes(gts)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    if (pw <= 0).any() or (ph <= 0).any() or (gw <= 0).any() or (gh <= 0).any():
        raise ValueError("boxes must have positive size")
    px, py = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
    gx, gy = g[:, 0] + 0.5 * gw, g[:, 1] + 0.5 * gh
    return np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=1)


def decode_delta(deltas, proposals) -> np.ndarray:
    """Inverse of :func:`encode_delta`; log-size deltas are clipped for safety."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    p = _as_boxes(proposals)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    if (pw <= 0).any() or (ph <= 0).any():
        raise ValueError("boxes must have positive size")
    px, py = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
    cx = px + d[:, 0] * pw
    cy = py + d[:, 1] * ph
    w = pw * np.exp(np.minimum(d[:, 2], BBOX_CLIP))
    h = ph * np.exp(np.minimum(d[:, 3], BBOX_CLIP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes, height: float, width: float) -> np.ndarray:
    b = _as_boxes(boxes).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
    return b


# ---------------------------------------------------------------------------
# proposals


@dataclass
class Proposals:
    """Proposal boxes for one image with their best ground-truth match.

    ``matched_gt`` is -1 when the image has no ground truth; ``iou`` is the
    IoU with that ground-truth box (0 when unmatched).
    """

    boxes: np.ndarray
    objectness: np.ndarray
    matched_gt: np.ndarray
    iou: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)


def match_to_gt(boxes: np.ndarray, gt_boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best GT index and IoU per box; ties go to the lower GT index."""
    if len(gt_boxes) == 0 or len(boxes) == 0:
        return np.full(len(boxes), -1, dtype=np.int64), np.zeros(len(boxes))
    ious = box_iou(boxes, gt_boxes)
    idx = ious.argmax(axis=1)
    return idx.astype(np.int64), ious[np.arange(len(boxes)), idx]


def jitter_box(gt: np.ndarray, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    w, h = gt[2] - gt[0], gt[3] - gt[1]
    cx, cy = gt[0] + 0.5 * w, gt[1] + 0.5 * h
    u = rng.uniform(-1.0, 1.0, size=4) * magnitude
    cx, cy = cx + u[0] * w, cy + u[1] * h
    w, h = w * np.exp(u[2]), h * np.exp(u[3])
    return np.array([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h])


def make_proposals(
    gt_boxes,
    image_hw: tuple[int, int],
    n: int,
    rng: np.random.Generator,
    jitter: float = 0.3,
    pos_fraction: float = 0.25,
    min_pos_iou: float = 0.3,
    max_neg_iou: float = 0.3,
    min_jitter: float | None = None,
) -> Proposals:
    """Stand-in for an RPN: jittered ground truth plus random background boxes.

    Positives are ground-truth boxes jittered until their IoU with the source
    box is at least ``min_pos_iou``; negatives are uniform boxes whose IoU with
    every ground-truth box is below ``max_neg_iou``. With ``min_jitter`` set,
    each positive draws its jitter magnitude uniformly from
    [min_jitter, jitter], mixing tight and loose boxes.
    """
    H, W = image_hw
    gt = _as_boxes(gt_boxes)
    if n < 2 * len(gt):
        raise ValueError(f"need n >= 2 * #gt ({2 * len(gt)}), got {n}")
    n_pos = int(round(n * pos_fraction)) if len(gt) else 0
    n_pos = max(n_pos, len(gt)) if len(gt) else 0
    boxes = []
    for i in range(n_pos):
        src = gt[i % len(gt)]
        cand = src.copy()
        mag = jitter if min_jitter is None else rng.uniform(min_jitter, jitter)
        for _ in range(50):
            cand = clip_boxes(jitter_box(src, mag, rng), H, W)[0]
            if cand[2] - cand[0] >= 2 and cand[3] - cand[1] >= 2 and box_iou(cand, src)[0, 0] >= min_pos_iou:
                break
        else:
            cand = src.copy()
        boxes.append(cand)
    n_neg = n - n_pos
    negs = []
    tries = 0
    while len(negs) < n_neg:
        tries += 1
        bh = rng.uniform(0.1, 0.75) * H
        bw = bh * rng.uniform(0.3, 1.2)
        bw = min(bw, W - 1.0)
        x1 = rng.uniform(0, W - bw)
        y1 = rng.uniform(0, H - bh)
        cand = np.array([x1, y1, x1 + bw, y1 + bh])
        if len(gt) == 0 or box_iou(cand, gt).max() < max_neg_iou:
            negs.append(cand)
        elif tries > 1000 * n:
            raise RuntimeError("could not sample background proposals")
    boxes.extend(negs)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    matched, ious = match_to_gt(boxes, gt)
    objectness = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    return Proposals(boxes, objectness, matched, ious)


# ---------------------------------------------------------------------------
# RoI-Align


def roi_align_matrix(
    boxes: np.ndarray,
    image_index: np.ndarray,
    feature_shape: tuple[int, int, int],
    spatial_scale: float,
    out_size: int,
) -> sp.csr_matrix:
    """Sparse bilinear sampling matrix from flattened features to RoI cells.

    One sample per output cell, at the cell centre. Row ``p*S*S + i*S + j``
    holds the four bilinear weights for cell (i, j) of box ``p``.
    """
    B, Hf, Wf = feature_shape
    b = _as_boxes(boxes) * spatial_scale
    P = len(b)
    S = out_size
    cells = (np.arange(S) + 0.5) / S

    def axis_weights(lo, hi, n):
        pos = lo[:, None] + cells[None, :] * (hi - lo)[:, None] - 0.5
        pos = np.clip(pos, 0.0, n - 1)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n - 1)
        frac = pos - i0
        return i0, i1, frac

    y0, y1, fy = axis_weights(b[:, 1], b[:, 3], Hf)
    x0, x1, fx = axis_weights(b[:, 0], b[:, 2], Wf)
    base = (np.asarray(image_index, dtype=np.int64) * Hf * Wf)[:, None, None]
    rows = (np.arange(P)[:, None, None] * S * S + np.arange(S)[None, :, None] * S + np.arange(S)[None, None, :])
    rows = np.broadcast_to(rows, (P, S, S))
    cols, vals = [], []
    for yy, wy in ((y0, 1 - fy), (y1, fy)):
        for xx, wx in ((x0, 1 - fx), (x1, fx)):
            cols.append(base + yy[:, :, None] * Wf + xx[:, None, :])
            vals.append(wy[:, :, None] * wx[:, None, :])
    rows_all = np.concatenate([rows.reshape(-1)] * 4)
    cols_all = np.concatenate([c.reshape(-1) for c in cols])
    vals_all = np.concatenate([v.reshape(-1) for v in vals])
    return sp.csr_matrix((vals_all, (rows_all, cols_all)), shape=(P * S * S, B * Hf * Wf))


def roi_align(
    features: Tensor,
    boxes: np.ndarray,
    image_index: np.ndarray | None = None,
    spatial_scale: float = 1.0,
    out_size: int = 14,
) -> Tensor:
    """Pool each box into an ``out_size`` x ``out_size`` x c map.

    ``features`` is (B, H', W', c) or (H', W', c); boxes are in image pixels and
    mapped onto the feature grid with ``spatial_scale``. Linear in ``features``
    and differentiable with respect to them (not to the boxes).
    """
    if features.ndim == 3:
        features = T.reshape(features, (1,) + features.shape)
    B, Hf, Wf, c = features.shape
    boxes = _as_boxes(boxes)
    if image_index is None:
        image_index = np.zeros(len(boxes), dtype=np.int64)
    hi = np.array([Wf, Hf, Wf, Hf]) / spatial_scale
    boxes = np.clip(boxes, 0, hi)
    S = out_size
    mat = roi_align_matrix(boxes, image_index, (B, Hf, Wf), spatial_scale, S)
    dtype = features.dtype
    mat = mat.astype(dtype)
    flat = features.data.reshape(B * Hf * Wf, c)
    out = np.asarray(mat @ flat).reshape(len(boxes), S, S, c)
    mat_t = mat.T.tocsr()

    def bw(g):
        return (np.asarray(mat_t @ g.reshape(-1, c)).reshape(features.shape).astype(dtype, copy=False),)

    return T.record(out.astype(dtype, copy=False), (features,), bw, "roi_align")


# ---------------------------------------------------------------------------
# NMS


def nms(boxes, scores, threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order.

    A box is suppressed when its IoU with an already kept box exceeds
    ``threshold``. Equal scores are visited in original index order.
    """
    b = _as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(b) != len(s):
        raise ValueError("boxes and scores differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    order = np.lexsort((np.arange(len(s)), -s))
    keep = []
    alive = np.ones(len(b), dtype=bool)
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        keep.append(i)
        rest = order[pos + 1 :]
        rest = rest[alive[rest]]
        if len(rest):
            alive[rest[box_iou(b[i], b[rest])[0] > threshold]] = False
    return np.asarray(keep, dtype=np.int64)
