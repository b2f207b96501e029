"""Detection and person-search metrics."""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import blob
from .geometry import box_iou

log = logging.getLogger(__name__)


@dataclass
class DetectionResult:
    scene_id: str
    boxes: np.ndarray
    scores: np.ndarray
    embeddings: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.boxes) != len(self.scores):
            raise ValueError("boxes and scores differ in length")
        if self.embeddings is not None:
            emb = np.asarray(self.embeddings, dtype=np.float64)
            dim = emb.shape[-1] if emb.ndim == 2 else (emb.size // max(len(self.boxes), 1))
            self.embeddings = emb.reshape(len(self.boxes), dim)


def score_order(scores) -> np.ndarray:
    """Descending scores; ties keep input order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def greedy_match(boxes, gt_boxes, iou_thresh: float = 0.5) -> np.ndarray:
    """Boxes are visited in the given order; each claims the best unmatched GT with IoU > thresh.

    Returns the matched GT index per box, -1 for false positives.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    out = np.full(len(boxes), -1, dtype=np.intp)
    if len(boxes) == 0 or len(gt_boxes) == 0:
        return out
    ious = box_iou(boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(boxes)):
        cand = np.where(taken | (ious[i] <= iou_thresh), -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] > iou_thresh:
            taken[j] = True
            out[i] = j
    return out


def match_detections(boxes, scores, gt_boxes, iou_thresh: float = 0.5) -> np.ndarray:
    """True-positive flags aligned with the input detections."""
    order = score_order(scores)
    flags = np.zeros(len(order), dtype=bool)
    flags[order] = greedy_match(np.asarray(boxes).reshape(-1, 4)[order], gt_boxes, iou_thresh) >= 0
    return flags


def average_precision(ranked_flags: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP list against ``n_gt`` positives."""
    flags = np.asarray(ranked_flags, dtype=bool)
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    if n_gt == 0:
        return 1.0 if flags.size == 0 else 0.0
    if flags.size == 0 or not flags.any():
        return 0.0
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, flags.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(envelope[flags]) / n_gt)


def detection_ap(flags, scores, n_gt: int) -> dict[str, float]:
    flags = np.asarray(flags, dtype=bool)
    ranked = flags[score_order(scores)]
    recall = (flags.sum() / n_gt) if n_gt else 1.0
    return {"recall": float(recall), "ap": average_precision(ranked, n_gt)}


def evaluate_detection(dets: Iterable[DetectionResult], gts: dict[str, np.ndarray], iou_thresh: float = 0.5) -> dict:
    """Pool detections over scenes; ``gts`` maps scene id to its GT boxes."""
    all_flags, all_scores, n_gt = [], [], 0
    seen = set()
    for d in dets:
        gt = gts[d.scene_id]
        all_flags.append(match_detections(d.boxes, d.scores, gt, iou_thresh))
        all_scores.append(d.scores)
        seen.add(d.scene_id)
    n_gt = sum(len(np.asarray(gts[s]).reshape(-1, 4)) for s in seen)
    flags = np.concatenate(all_flags) if all_flags else np.zeros(0, bool)
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    return detection_ap(flags, scores, n_gt)


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class QueryItem:
    identity: int
    embedding: np.ndarray


@dataclass
class GalleryScene:
    scene_id: str
    gt_boxes: np.ndarray
    gt_ids: np.ndarray
    det: DetectionResult


def query_ap(query: QueryItem, gallery: Sequence[GalleryScene], iou_thresh: float = 0.5) -> tuple[float, bool, int]:
    """AP, top-1 hit and number of positives for one query over a gallery.

    Detections are ranked by cosine similarity (stable on ties, gallery order).
    A detection is correct if it covers an unclaimed GT box of the query's
    identity with IoU above ``iou_thresh``.
    """
    q = np.asarray(query.embedding, dtype=np.float64)
    q = q / max(np.linalg.norm(q), 1e-12)
    sims, owner, local = [], [], []
    n_pos = 0
    for gi, g in enumerate(gallery):
        n_pos += int(np.sum(np.asarray(g.gt_ids) == query.identity))
        if len(g.det.boxes) == 0:
            continue
        e = g.det.embeddings
        e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
        sims.append(e @ q)
        owner.append(np.full(len(e), gi))
        local.append(np.arange(len(e)))
    if n_pos == 0:
        return float("nan"), False, 0
    if not sims:
        return 0.0, False, n_pos
    sims, owner, local = np.concatenate(sims), np.concatenate(owner), np.concatenate(local)
    order = score_order(sims)
    claimed = [np.zeros(len(g.gt_boxes), dtype=bool) for g in gallery]
    flags = np.zeros(len(order), dtype=bool)
    for r, k in enumerate(order):
        g = gallery[owner[k]]
        pos = np.flatnonzero(np.asarray(g.gt_ids) == query.identity)
        if pos.size == 0:
            continue
        ious = box_iou(g.det.boxes[local[k]][None], np.asarray(g.gt_boxes)[pos])[0]
        ious[claimed[owner[k]][pos]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] > iou_thresh:
            claimed[owner[k]][pos[j]] = True
            flags[r] = True
    return average_precision(flags, n_pos), bool(flags[0]) if flags.size else False, n_pos


def search_map(
    queries: Sequence[QueryItem],
    gallery: Sequence[GalleryScene],
    subsets: Sequence[Sequence[int]] | None = None,
    iou_thresh: float = 0.5,
) -> dict[str, float]:
    """Mean AP and top-1 over queries; ``subsets[i]`` picks query i's gallery scenes."""
    aps, hits = [], []
    for i, q in enumerate(queries):
        scenes = gallery if subsets is None else [gallery[j] for j in subsets[i]]
        ap, hit, n_pos = query_ap(q, scenes, iou_thresh)
        if n_pos == 0:
            log.warning("query %d (identity %d) has no positives in its gallery; skipped", i, q.identity)
            continue
        aps.append(ap)
        hits.append(hit)
    if not aps:
        return {"map": 0.0, "top1": 0.0, "n_queries": 0}
    return {"map": float(np.mean(aps)), "top1": float(np.mean(hits)), "n_queries": len(aps)}


def gallery_sweep(
    queries: Sequence[QueryItem], gallery: Sequence[GalleryScene], subsets_by_size: dict[int, list[list[int]]]
) -> dict[int, dict[str, float]]:
    for size in subsets_by_size:
        if size > len(gallery):
            raise ValueError(f"gallery size {size} exceeds {len(gallery)} scenes")
    return {size: search_map(queries, gallery, subs) for size, subs in subsets_by_size.items()}


# ---------------------------------------------------------------------------
# report and files


@dataclass
class EvalReport:
    detection: dict[str, float]
    retrieval: dict[str, float]
    curve: dict[int, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["curve"] = {str(k): v for k, v in self.curve.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def curve_csv(self) -> str:
        lines = ["gallery_size,map,top1"]
        for size, m in self.curve.items():
            lines.append(f"{size},{m['map']:.6f},{m['top1']:.6f}")
        return "\n".join(lines) + "\n"


def _encode(arr: np.ndarray, name: str) -> str:
    return base64.b64encode(blob.dumps(np.asarray(arr), name)).decode("ascii")


def _decode(text: str) -> np.ndarray:
    return blob.loads(base64.b64decode(text))[1]


def write_detections(path: str | Path, dets: Iterable[DetectionResult]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            rec = {"scene_id": d.scene_id, "boxes": d.boxes.tolist(), "scores": d.scores.tolist()}
            if d.embeddings is not None:
                rec["embeddings"] = _encode(d.embeddings, "embeddings")
            fh.write(json.dumps(rec) + "\n")


def read_detections(path: str | Path) -> list[DetectionResult]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            emb = _decode(rec["embeddings"]) if "embeddings" in rec else None
            out.append(DetectionResult(rec["scene_id"], rec["boxes"], rec["scores"], emb))
    return out
