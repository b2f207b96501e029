"""Multi-stage detector with occluded attention and ReID heads.

A small strided conv stem produces a shared feature map; each stage pools its
proposals, runs an occluded-attention block, and predicts person score, box
deltas and (from stage 2 on, by default) a unit-norm embedding. Stage t + 1
consumes stage t's refined boxes under a stricter IoU threshold.
"""

from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import geometry as G
from . import losses as Lo
from . import tensor as T
from .attention import AttentionConfig, ExchangePlan, OccludedAttention, TokenizerConfig, gap
from .nn import Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor
from .toybench import UNLABELED, Scene


@dataclass(frozen=True)
class CascadeConfig:
    stages: int = 3
    iou_thresholds: tuple[float, ...] = (0.5, 0.6, 0.7)
    nms_thresholds: tuple[float, ...] = (0.4, 0.4, 0.5)
    proposals_per_image: int = 128
    pos_fraction: float = 0.25
    jitter: float = 0.3
    min_jitter: float | None = None
    embed_dim: int = 256
    pool_size: int = 14
    channels: int = 128
    stem_channels: tuple[int, int] = (32, 64)
    tokenizer: TokenizerConfig = TokenizerConfig()
    attention: AttentionConfig = AttentionConfig()
    exchange: bool = True
    reid_stage1: bool = False
    bbox_std: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)
    score_threshold: float = 0.5
    min_box_size: float = 1.0
    head_norm: bool = False

    def __post_init__(self) -> None:
        if self.stages < 1:
            raise ValueError("need at least one stage")
        if len(self.iou_thresholds) != self.stages or len(self.nms_thresholds) != self.stages:
            raise ValueError("one IoU and one NMS threshold per stage")
        u = self.iou_thresholds
        if any(not 0 < x < 1 for x in u) or any(a > b for a, b in zip(u, u[1:])):
            raise ValueError(f"IoU thresholds must lie in (0, 1) and be non-decreasing: {u}")

    def has_reid(self, stage: int) -> bool:
        """Stage numbering starts at 1."""
        return stage > 1 or self.reid_stage1

    @property
    def first_reid_stage(self) -> int:
        return 1 if self.reid_stage1 else 2


# ---------------------------------------------------------------------------
# label assignment


@dataclass
class Assignment:
    positive: np.ndarray  # bool
    matched: np.ndarray  # gt index, -1 when no GT
    iou: np.ndarray
    identity: np.ndarray  # identity of the matched GT for positives, UNLABELED otherwise


def assign_labels(boxes, gt_boxes, gt_ids, threshold: float) -> Assignment:
    """Positive iff best IoU >= threshold; ties resolve to the lower GT index."""
    if not 0 < threshold < 1:
        raise ValueError(f"IoU threshold {threshold} outside (0, 1)")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    matched, iou = G.match_to_gt(boxes, np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4))
    positive = iou >= threshold
    ids = np.full(len(boxes), UNLABELED, dtype=np.int64)
    ids[positive] = np.asarray(gt_ids, dtype=np.int64)[matched[positive]]
    return Assignment(positive=positive, matched=matched, iou=iou, identity=ids)


# ---------------------------------------------------------------------------
# network


class Stem(Module):
    """Three 3x3 convolutions with strides 2, 2, 1: feature stride 4."""

    stride = 4

    def __init__(self, channels: tuple[int, int, int], rng: np.random.Generator):
        c1, c2, c3 = channels
        self.conv1 = Conv2d(3, c1, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(c1, c2, 3, rng, stride=2, padding=1)
        self.conv3 = Conv2d(c2, c3, 3, rng, stride=1, padding=1)

    def __call__(self, images: Tensor) -> Tensor:
        x = T.relu(self.conv1(images))
        x = T.relu(self.conv2(x))
        return T.relu(self.conv3(x))


class Stage(Module):
    def __init__(self, cfg: CascadeConfig, reid: bool, rng: np.random.Generator):
        c = cfg.channels
        self.block = OccludedAttention(c, (cfg.pool_size, cfg.pool_size), rng, cfg.tokenizer, cfg.attention)
        # pooled ReLU maps share a large positive mean; centring them keeps the heads well conditioned
        self.norm = LayerNorm(c) if cfg.head_norm else None
        self.cls = Linear(c, 2, rng, std=0.01)
        self.reg = Linear(c, 4, rng, std=0.001)
        self.reid = Linear(c, cfg.embed_dim, rng) if reid else None


class CascadeModel(Module):
    def __init__(self, cfg: CascadeConfig, n_ids: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_ids = n_ids
        self.stem = Stem((*cfg.stem_channels, cfg.channels), rng)
        self.stages = [Stage(cfg, cfg.has_reid(t), rng) for t in range(1, cfg.stages + 1)]
        self.id_classifier = Lo.IdClassifier(cfg.embed_dim, n_ids, rng)

    def features(self, images) -> Tensor:
        # scene pixels live in [0, 1]; centre them for the stem
        return self.stem(Tensor((np.asarray(images) - 0.5) / 0.25))

    def new_oim_states(
        self, capacity: int, rng: np.random.Generator, tau: float = 1 / 30, gamma: float = 0.5
    ) -> dict[int, Lo.OimState]:
        return {
            t: Lo.OimState.create(self.n_ids, self.cfg.embed_dim, capacity, rng, tau, gamma)
            for t in range(1, self.cfg.stages + 1)
            if self.cfg.has_reid(t)
        }


@dataclass
class StageOutput:
    stage: int
    boxes: np.ndarray
    image_index: np.ndarray
    logits: Tensor
    deltas: Tensor
    embeddings: Tensor | None
    refined_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    refined_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    refined_keep: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    assignment: Assignment | None = None

    @property
    def scores(self) -> np.ndarray:
        """Person probability per box."""
        z = self.logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e[:, 1] / e.sum(axis=1)


def run_stage(
    model: CascadeModel,
    t: int,
    feats: Tensor,
    boxes: np.ndarray,
    image_index: np.ndarray,
    image_hw: tuple[int, int],
    mode: str = "infer",
    plan: ExchangePlan | None = None,
) -> StageOutput:
    """Run stage ``t`` (1-based) on proposals; refined boxes are detached, clipped and filtered."""
    cfg = model.cfg
    stage = model.stages[t - 1]
    if len(boxes) == 0:
        raise ValueError("run_stage needs at least one proposal")
    pooled = G.roi_align(feats, boxes, image_index, spatial_scale=1.0 / Stem.stride, out_size=cfg.pool_size)
    # without a plan (vanilla attention or inference) the block is plain self-attention
    block_mode = "train" if mode == "train" and plan is not None else "infer"
    pooled_feat = gap(stage.block(pooled, block_mode, plan if block_mode == "train" else None))
    if stage.norm is not None:
        pooled_feat = stage.norm(pooled_feat)
    logits = stage.cls(pooled_feat)
    deltas = stage.reg(pooled_feat)
    emb = T.l2_normalize(stage.reid(pooled_feat)) if stage.reid is not None else None
    out = StageOutput(t, boxes, image_index, logits, deltas, emb)
    refined = G.decode_delta(deltas.data.astype(np.float64) * np.asarray(cfg.bbox_std), boxes)
    refined = G.clip_boxes(refined, *image_hw)
    keep = ((refined[:, 2] - refined[:, 0]) >= cfg.min_box_size) & ((refined[:, 3] - refined[:, 1]) >= cfg.min_box_size)
    out.refined_boxes = refined[keep]
    out.refined_index = image_index[keep]
    out.refined_keep = keep
    return out


# ---------------------------------------------------------------------------
# training objective


class NonFiniteTerm(T.NonFiniteError):
    """A non-finite value inside the computation of one named loss term."""

    def __init__(self, term: str, detail: str):
        super().__init__(f"{term}: {detail}")
        self.term = term


@contextlib.contextmanager
def _term(name: str) -> Iterator[None]:
    try:
        yield
    except NonFiniteTerm:
        raise
    except T.NonFiniteError as exc:
        raise NonFiniteTerm(name, str(exc)) from exc


@dataclass
class StagePlan:
    boxes: np.ndarray
    image_index: np.ndarray
    exchange: ExchangePlan | None


@dataclass
class Trace:
    """Everything random or discrete in one training forward pass, for exact replay."""

    stages: list[StagePlan]


@dataclass
class StepResult:
    report: Lo.LossReport
    outputs: list[StageOutput]
    trace: Trace
    oim_updates: dict[int, tuple[np.ndarray, np.ndarray]]


def _scene_gt(scenes: list[Scene], image_index: np.ndarray, boxes: np.ndarray, u: float) -> Assignment:
    n = len(boxes)
    out = Assignment(np.zeros(n, bool), np.full(n, -1), np.zeros(n), np.full(n, UNLABELED, dtype=np.int64))
    for i, sc in enumerate(scenes):
        sel = np.flatnonzero(image_index == i)
        if sel.size == 0:
            continue
        a = assign_labels(boxes[sel], sc.boxes, sc.labels, u)
        out.positive[sel], out.matched[sel], out.iou[sel], out.identity[sel] = a.positive, a.matched, a.iou, a.identity
    return out


def initial_proposals(model: CascadeModel, scenes: list[Scene], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    cfg = model.cfg
    boxes, index = [], []
    for i, sc in enumerate(scenes):
        p = G.make_proposals(
            sc.boxes, sc.hw, cfg.proposals_per_image, rng, cfg.jitter, cfg.pos_fraction, min_jitter=cfg.min_jitter
        )
        boxes.append(p.boxes)
        index.append(np.full(len(p), i, dtype=np.intp))
    return np.concatenate(boxes), np.concatenate(index)


def compute_loss(
    model: CascadeModel,
    scenes: list[Scene],
    oim: dict[int, Lo.OimState],
    rng: np.random.Generator | None = None,
    trace: Trace | None = None,
    lambda_oim: float = 0.5,
    lambda_id: float = 0.5,
) -> StepResult:
    """Training forward pass over a mini-batch of scenes.

    With ``trace`` the proposals and exchange plans are replayed instead of
    sampled, which makes the loss a smooth function of the weights.
    """
    if trace is None and rng is None:
        raise ValueError("need an rng or a trace")
    cfg = model.cfg
    hws = {sc.hw for sc in scenes}
    if len(hws) != 1:
        raise ValueError("scenes in a batch must share image size")
    hw = hws.pop()
    with _term("features"):
        feats = model.features(np.stack([sc.image for sc in scenes]))
    bbox_std = np.asarray(cfg.bbox_std)

    if trace is None:
        boxes, index = initial_proposals(model, scenes, rng)
    else:
        boxes, index = trace.stages[0].boxes, trace.stages[0].image_index
    plans: list[StagePlan] = []
    outputs: list[StageOutput] = []
    stage_losses: list[Lo.StageLoss] = []
    updates: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for t in range(1, cfg.stages + 1):
        if trace is not None:
            boxes, index = trace.stages[t - 1].boxes, trace.stages[t - 1].image_index
        if len(boxes) == 0:
            break
        stage = model.stages[t - 1]
        if trace is not None:
            plan = trace.stages[t - 1].exchange
        else:
            plan = stage.block.plan(len(boxes), rng) if cfg.exchange else None
        plans.append(StagePlan(boxes, index, plan))
        with _term(f"s{t}_forward"):
            out = run_stage(model, t, feats, boxes, index, hw, "train", plan)
        a = _scene_gt(scenes, index, boxes, cfg.iou_thresholds[t - 1])
        out.assignment = a
        outputs.append(out)

        targets = np.zeros((len(boxes), 4))
        if a.positive.any():
            gt = np.concatenate([scenes[i].boxes[m][None] for i, m in zip(index[a.positive], a.matched[a.positive])])
            targets[a.positive] = G.encode_delta(boxes[a.positive], gt) / bbox_std
        with _term(f"s{t}_cls"):
            cls_loss = Lo.det_cls_loss(out.logits, a.positive.astype(np.intp))
        with _term(f"s{t}_reg"):
            reg_loss = Lo.det_reg_loss(out.deltas, targets, a.positive)
        sl = Lo.StageLoss(det_cls=cls_loss, det_reg=reg_loss)
        if out.embeddings is not None:
            pos = np.flatnonzero(a.positive)
            ids = a.identity[pos]
            emb = T.take(out.embeddings, pos, axis=0) if pos.size else None
            with _term(f"s{t}_oim"):
                sl.oim = Lo.oim_loss(emb, ids, oim[t]) if emb is not None else Tensor(0.0)
            with _term(f"s{t}_id"):
                sl.id = Lo.id_loss(emb, ids, model.id_classifier) if emb is not None else Tensor(0.0)
            updates[t] = (out.embeddings.data[pos].astype(np.float64), ids)
        stage_losses.append(sl)
        boxes, index = out.refined_boxes, out.refined_index

    with _term("total"):
        report = Lo.total_loss(stage_losses, lambda_oim, lambda_id, cfg.first_reid_stage)
    return StepResult(report, outputs, Trace(plans), updates)


def apply_oim_updates(oim: dict[int, Lo.OimState], updates: dict[int, tuple[np.ndarray, np.ndarray]]) -> None:
    for t, (emb, ids) in sorted(updates.items()):
        oim[t].update(emb, ids)


# ---------------------------------------------------------------------------
# inference


@dataclass
class Detections:
    scene_id: str
    boxes: np.ndarray
    scores: np.ndarray
    embeddings: np.ndarray


def scene_rng(scene_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode())])


def run_cascade(model: CascadeModel, scene: Scene, seed: int = 0) -> list[StageOutput]:
    """Inference over one scene with per-stage NMS; a pure function of weights, scene and seed."""
    cfg = model.cfg
    with T.no_grad():
        feats = model.features(scene.image[None])
        boxes, index = initial_proposals(model, [scene], scene_rng(scene.scene_id, seed))
        outputs = []
        for t in range(1, cfg.stages + 1):
            if len(boxes) == 0:
                break
            out = run_stage(model, t, feats, boxes, index, scene.hw, "infer")
            outputs.append(out)
            boxes, index = out.refined_boxes, out.refined_index
            if t < cfg.stages and len(boxes):
                # score each refined box by the stage that produced it
                kept_scores = out.scores[out.refined_keep]
                keep = G.nms(boxes, kept_scores, cfg.nms_thresholds[t - 1])
                boxes, index = boxes[keep], index[keep]
    return outputs


def detect(model: CascadeModel, scene: Scene, seed: int = 0) -> Detections:
    """Final detections: last stage boxes after NMS, kept when the person score clears the threshold."""
    cfg = model.cfg
    outputs = run_cascade(model, scene, seed)
    dim = cfg.embed_dim
    if len(outputs) < cfg.stages or len(outputs[-1].refined_boxes) == 0:
        return Detections(scene.scene_id, np.zeros((0, 4)), np.zeros(0), np.zeros((0, dim)))
    last = outputs[-1]
    mask = last.refined_keep
    boxes = last.refined_boxes
    scores = last.scores[mask]
    emb = last.embeddings.data[mask] if last.embeddings is not None else np.zeros((len(boxes), dim))
    keep = G.nms(boxes, scores, cfg.nms_thresholds[-1])
    keep = keep[scores[keep] >= cfg.score_threshold]
    return Detections(scene.scene_id, boxes[keep], scores[keep], np.asarray(emb[keep], dtype=np.float64))


def embed_boxes(model: CascadeModel, scene: Scene, boxes) -> np.ndarray:
    """Last-stage embeddings of given boxes (used for queries), no refinement."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    t = model.cfg.stages
    if model.stages[t - 1].reid is None:
        raise ValueError("last stage has no ReID head")
    with T.no_grad():
        feats = model.features(scene.image[None])
        out = run_stage(model, t, feats, boxes, np.zeros(len(boxes), dtype=np.intp), scene.hw, "infer")
    return np.asarray(out.embeddings.data, dtype=np.float64)
