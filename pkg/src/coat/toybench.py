"""Deterministic synthetic person-search benchmark.

Scenes are noisy backgrounds with a few textured rectangles ("people") on
top. An identity is a fixed procedural texture: striped upper body in two
colours plus a solid lower body, rendered relative to the box so it looks the
same at every scale. Boxes may overlap; later people are painted over earlier
ones, which gives genuine occlusion.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import blob
from .geometry import box_iou

UNLABELED = -1

_SPLIT_CODES = {"train": 1, "test": 2, "query": 3}


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class Identity:
    id: int
    texture_seed: int
    labeled: bool


@dataclass
class Scene:
    scene_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    boxes: np.ndarray  # (n, 4) float64
    labels: np.ndarray  # (n,) int64, identity id or UNLABELED

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass
class Query:
    scene: Scene
    box: np.ndarray
    identity: int


@dataclass
class SplitSpec:
    n_train_scenes: int = 64
    n_test_scenes: int = 32
    n_identities: int = 16
    n_unlabeled: int = 4
    gallery_size: int = 16
    rng_seed: int = 0
    image_height: int = 96
    image_width: int = 160
    max_instances: int = 5
    person_height: int = 32
    person_width: int = 16
    scale_range: tuple[float, float] = (0.5, 2.0)
    overlap_prob: float = 0.3
    noise_sigma: float = 0.05
    max_clutter: int = 2


@dataclass
class Benchmark:
    spec: SplitSpec
    identities: list[Identity]
    train: list[Scene]
    test: list[Scene]
    queries: list[Query]
    gallery_size: int = field(default=0)

    @property
    def gallery(self) -> list[Scene]:
        return self.test[: self.gallery_size]


def _rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_CODES[split], index])


def texture_params(texture_seed: int) -> dict:
    rng = np.random.default_rng([texture_seed, 7919])
    return {
        "top_a": rng.uniform(0.05, 0.95, size=3),
        "top_b": rng.uniform(0.05, 0.95, size=3),
        "bottom": rng.uniform(0.05, 0.95, size=3),
        "freq": int(rng.integers(1, 4)),
        "phase": float(rng.uniform()),
        "split": float(rng.uniform(0.45, 0.65)),
    }


def render_identity(texture_seed: int, height: int, width: int) -> np.ndarray:
    """Noise-free (height, width, 3) texture; a pure function of the seed."""
    p = texture_params(texture_seed)
    v = (np.arange(height) + 0.5) / height
    stripe = 0.5 + 0.5 * np.sin(2 * np.pi * (p["freq"] * v / p["split"] + p["phase"]))
    top = p["top_a"][None, :] * (1 - stripe[:, None]) + p["top_b"][None, :] * stripe[:, None]
    rows = np.where((v < p["split"])[:, None], top, p["bottom"][None, :])
    return np.broadcast_to(rows[:, None, :], (height, width, 3)).astype(np.float32)


def _background(rng: np.random.Generator, H: int, W: int, max_clutter: int) -> np.ndarray:
    base = rng.uniform(0.3, 0.7, size=3)
    gy, gx = rng.uniform(-0.15, 0.15, size=2)
    yy = np.linspace(-0.5, 0.5, H)[:, None, None]
    xx = np.linspace(-0.5, 0.5, W)[None, :, None]
    img = base[None, None, :] + gy * yy + gx * xx
    img = np.broadcast_to(img, (H, W, 3)).copy()
    for _ in range(int(rng.integers(0, max_clutter + 1))):
        h = int(rng.integers(H // 8, H // 3))
        w = int(rng.integers(W // 10, W // 3))
        y, x = int(rng.integers(0, H - h)), int(rng.integers(0, W - w))
        img[y : y + h, x : x + w] = rng.uniform(0.0, 1.0, size=3)
    return img


def _max_cover(cand: np.ndarray, prior: np.ndarray) -> float:
    """Largest fraction of either box hidden by the overlap, over all priors."""
    ix = np.clip(np.minimum(cand[2], prior[:, 2]) - np.maximum(cand[0], prior[:, 0]), 0, None)
    iy = np.clip(np.minimum(cand[3], prior[:, 3]) - np.maximum(cand[1], prior[:, 1]), 0, None)
    inter = ix * iy
    smaller = np.minimum((cand[2] - cand[0]) * (cand[3] - cand[1]), (prior[:, 2] - prior[:, 0]) * (prior[:, 3] - prior[:, 1]))
    return float((inter / smaller).max())


def _place(rng, existing: list[np.ndarray], h: int, w: int, H: int, W: int, overlap: bool) -> np.ndarray:
    def rand_box():
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        return np.array([x, y, x + w, y + h], dtype=np.float64)

    if not existing:
        return rand_box()
    prior = np.asarray(existing)
    if overlap:
        anchor = prior[int(rng.integers(len(prior)))]
        for _ in range(200):
            cx = anchor[0] + rng.uniform(-0.6, 0.6) * (anchor[2] - anchor[0]) + (anchor[2] - anchor[0] - w) / 2
            cy = anchor[1] + rng.uniform(-0.4, 0.4) * (anchor[3] - anchor[1]) + (anchor[3] - anchor[1] - h) / 2
            x = int(np.clip(round(cx), 0, W - w))
            y = int(np.clip(round(cy), 0, H - h))
            cand = np.array([x, y, x + w, y + h], dtype=np.float64)
            ov = box_iou(cand, anchor)[0, 0]
            if ov >= 0.2 and _max_cover(cand, prior) <= 0.6:
                return cand
    for _ in range(200):
        cand = rand_box()
        if _max_cover(cand, prior) < 0.1:
            return cand
    for _ in range(200):
        cand = rand_box()
        if _max_cover(cand, prior) <= 0.6:
            return cand
    return rand_box()


def render_scene(
    spec: SplitSpec,
    identities: list[Identity],
    scene_id: str,
    rng: np.random.Generator,
    forced: list[int],
) -> Scene:
    H, W = spec.image_height, spec.image_width
    img = _background(rng, H, W, spec.max_clutter)
    n = int(rng.integers(max(1, len(forced)), spec.max_instances + 1))
    pool = [i.id for i in identities if i.id not in forced]
    extra = rng.choice(pool, size=n - len(forced), replace=False).tolist() if n > len(forced) else []
    ids = list(forced) + [int(i) for i in extra]
    ids = [ids[i] for i in rng.permutation(len(ids))]
    lo, hi = np.log(spec.scale_range[0]), np.log(spec.scale_range[1])
    boxes: list[np.ndarray] = []
    by_id = {i.id: i for i in identities}
    for k, ident in enumerate(ids):
        s = float(np.exp(rng.uniform(lo, hi)))
        h = min(H, max(4, int(round(spec.person_height * s))))
        w = min(W, max(2, int(round(spec.person_width * s * rng.uniform(0.9, 1.1)))))
        overlap = k > 0 and rng.uniform() < spec.overlap_prob
        box = _place(rng, boxes, h, w, H, W, overlap)
        boxes.append(box)
        x1, y1 = int(box[0]), int(box[1])
        img[y1 : y1 + h, x1 : x1 + w] = render_identity(by_id[ident].texture_seed, h, w)
    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    labels = np.array([ident if by_id[ident].labeled else UNLABELED for ident in ids], dtype=np.int64)
    return Scene(scene_id, img, np.asarray(boxes, dtype=np.float64).reshape(-1, 4), labels)


def make_identities(spec: SplitSpec) -> list[Identity]:
    out = []
    for i in range(spec.n_identities + spec.n_unlabeled):
        seed = int(np.random.default_rng([spec.rng_seed, 17, i]).integers(2**31))
        out.append(Identity(i, seed, i < spec.n_identities))
    return out


def validate(spec: SplitSpec) -> None:
    if spec.n_identities < 2:
        raise InfeasibleSpec("n_identities must be >= 2")
    if spec.gallery_size < 1 or spec.gallery_size > spec.n_test_scenes:
        raise InfeasibleSpec(
            f"gallery_size ({spec.gallery_size}) must be in [1, n_test_scenes={spec.n_test_scenes}]"
        )
    per_scene = -(-spec.n_identities // spec.gallery_size)
    if per_scene > spec.max_instances:
        raise InfeasibleSpec(
            f"{spec.n_identities} query identities cannot fit in {spec.gallery_size} gallery scenes "
            f"with at most {spec.max_instances} people each"
        )
    if spec.max_instances > spec.n_identities + spec.n_unlabeled:
        raise InfeasibleSpec("max_instances exceeds the number of identities")


def generate(spec: SplitSpec) -> Benchmark:
    """Build train scenes, test scenes (the first ``gallery_size`` form the
    gallery) and one query scene per labeled identity."""
    validate(spec)
    ids = make_identities(spec)
    train = [
        render_scene(spec, ids, f"train-{i:04d}", _rng(spec.rng_seed, "train", i), [])
        for i in range(spec.n_train_scenes)
    ]
    test = []
    for i in range(spec.n_test_scenes):
        forced = [j for j in range(spec.n_identities) if j % spec.gallery_size == i] if i < spec.gallery_size else []
        test.append(render_scene(spec, ids, f"test-{i:04d}", _rng(spec.rng_seed, "test", i), forced))
    queries = []
    for j in range(spec.n_identities):
        scene = render_scene(spec, ids, f"query-{j:04d}", _rng(spec.rng_seed, "query", j), [j])
        k = int(np.flatnonzero(scene.labels == j)[0])
        queries.append(Query(scene, scene.boxes[k].copy(), j))
    return Benchmark(spec, ids, train, test, queries, spec.gallery_size)


def gallery_subsets(
    gallery: list[Scene], queries: list[Query], sizes: list[int], seed: int = 0
) -> dict[int, list[list[int]]]:
    """Per-query gallery scene indices for each requested size.

    Each query's scenes are ordered positives-first (both halves shuffled
    with a per-query stream) and every size takes a prefix of that order, so
    subsets are nested and always hold at least one positive scene.
    """
    n = len(gallery)
    for s in sizes:
        if s < 1 or s > n:
            raise ValueError(f"gallery size {s} outside [1, {n}]")
    orders = []
    for qi, q in enumerate(queries):
        rng = np.random.default_rng([seed, qi])
        pos = [i for i, sc in enumerate(gallery) if (sc.labels == q.identity).any()]
        neg = [i for i in range(n) if i not in set(pos)]
        if not pos:
            raise ValueError(f"query {qi} (identity {q.identity}) has no positive gallery scene")
        orders.append([pos[i] for i in rng.permutation(len(pos))] + [neg[i] for i in rng.permutation(len(neg))])
    return {s: [sorted(o[:s]) for o in orders] for s in sizes}


# ---------------------------------------------------------------------------
# on-disk format


def _scene_record(scene: Scene) -> dict:
    return {
        "id": scene.scene_id,
        "file": f"scenes/{scene.scene_id}.bin",
        "boxes": scene.boxes.tolist(),
        "labels": scene.labels.tolist(),
    }


def save(bench: Benchmark, root: str | Path) -> Path:
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    scenes = bench.train + bench.test + [q.scene for q in bench.queries]
    for sc in scenes:
        blob.save(root / "scenes" / f"{sc.scene_id}.bin", {sc.scene_id: sc.image})
    spec = asdict(bench.spec)
    spec["scale_range"] = list(spec["scale_range"])
    ann = {
        "format": 1,
        "spec": spec,
        "identities": [asdict(i) for i in bench.identities],
        "scenes": [_scene_record(sc) for sc in scenes],
        "splits": {
            "train": [s.scene_id for s in bench.train],
            "test": [s.scene_id for s in bench.test],
            "gallery": [s.scene_id for s in bench.gallery],
            "queries": [
                {"scene": q.scene.scene_id, "box": q.box.tolist(), "identity": q.identity} for q in bench.queries
            ],
        },
    }
    (root / "annotations.json").write_text(json.dumps(ann, indent=1, sort_keys=True))
    return root


def load(root: str | Path) -> Benchmark:
    root = Path(root)
    ann = json.loads((root / "annotations.json").read_text())
    spec_d = dict(ann["spec"])
    spec_d["scale_range"] = tuple(spec_d["scale_range"])
    spec = SplitSpec(**spec_d)
    scenes = {}
    for rec in ann["scenes"]:
        _, img = next(iter(blob.load(root / rec["file"]).items()))
        scenes[rec["id"]] = Scene(
            rec["id"],
            img,
            np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4),
            np.asarray(rec["labels"], dtype=np.int64),
        )
    sp = ann["splits"]
    queries = [Query(scenes[q["scene"]], np.asarray(q["box"], dtype=np.float64), q["identity"]) for q in sp["queries"]]
    return Benchmark(
        spec,
        [Identity(**i) for i in ann["identities"]],
        [scenes[i] for i in sp["train"]],
        [scenes[i] for i in sp["test"]],
        queries,
        len(sp["gallery"]),
    )
