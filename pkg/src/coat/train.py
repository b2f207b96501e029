"""Training loop, checkpoints and end-to-end evaluation of a model on a benchmark."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import blob
from . import cascade as C
from . import config as cfgmod
from . import evaluation as E
from . import tensor as T
from . import toybench as tb
from .config import RunConfig
from .losses import OimState

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
INIT_PURPOSE, SHUFFLE_PURPOSE, STEP_PURPOSE, OIM_PURPOSE = 11, 12, 13, 14


class CheckpointError(RuntimeError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, term: str, epoch: int, step: int):
        super().__init__(f"non-finite {term} at epoch {epoch} step {step}")
        self.term = term


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Momentum SGD with decoupled-from-momentum L2 weight decay and global norm clipping."""

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 0.0, clip_norm: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.buffers = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> float:
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if not math.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm; weights left unchanged")
        scale = 1.0
        if self.clip_norm > 0 and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name, p in self.params.items():
            g = grads[name] * p.dtype.type(scale) + p.dtype.type(self.weight_decay) * p.data
            buf = self.buffers[name]
            buf *= p.dtype.type(self.momentum)
            buf += g
            p.data -= p.dtype.type(lr) * buf
            p.grad = None
        return norm


def learning_rate(opt: cfgmod.OptimConfig, epoch: int, step: int, steps_per_epoch: int) -> float:
    """Linear warmup over the first ``warmup_epochs`` then step decay at each ``decay_epochs`` entry."""
    progress = epoch + step / max(steps_per_epoch, 1)
    factor = 1.0
    if opt.warmup_epochs > 0 and progress < opt.warmup_epochs:
        alpha = progress / opt.warmup_epochs
        factor = opt.warmup_factor + (1.0 - opt.warmup_factor) * alpha
    n_decays = sum(epoch >= e for e in opt.decay_epochs)
    return opt.lr * factor * opt.decay_factor**n_decays


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    cfg: RunConfig
    model: C.CascadeModel
    oim: dict[int, OimState]
    optimizer: SGD
    epoch: int = 0
    step: int = 0  # step within ``epoch``
    global_step: int = 0


def build_state(cfg: RunConfig, n_ids: int) -> TrainState:
    with T.precision(cfg.precision):
        rng = np.random.default_rng([cfg.seed, INIT_PURPOSE])
        model = C.CascadeModel(cfg.model, n_ids, rng)
        oim = model.new_oim_states(
            cfg.loss.cq_capacity, np.random.default_rng([cfg.seed, OIM_PURPOSE]), cfg.loss.oim_tau, cfg.loss.oim_gamma
        )
    opt = SGD(dict(model.named_parameters()), cfg.optim.momentum, cfg.optim.weight_decay, cfg.optim.clip_norm)
    return TrainState(cfg, model, oim, opt)


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.model.named_parameters():
        arrays[f"param/{name}"] = p.data
        arrays[f"momentum/{name}"] = state.optimizer.buffers[name]
    for t, s in sorted(state.oim.items()):
        arrays.update(s.state_dict(f"oim/s{t}/"))
    blob.save(path / "weights.bin", arrays)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfgmod.to_dict(state.cfg),
        "n_ids": state.model.n_ids,
        "epoch": state.epoch,
        "step": state.step,
        "global_step": state.global_step,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest in {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    cfg = cfgmod.from_dict(RunConfig, manifest["config"])
    state = build_state(cfg, manifest["n_ids"])
    arrays = blob.load(path / "weights.bin")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    state.model.load_state_dict(params)
    for name in state.optimizer.buffers:
        state.optimizer.buffers[name] = np.array(arrays[f"momentum/{name}"], copy=True)
    for t, s in state.oim.items():
        s.load_state_dict(arrays, f"oim/s{t}/")
    state.epoch, state.step, state.global_step = manifest["epoch"], manifest["step"], manifest["global_step"]
    return state


# ---------------------------------------------------------------------------
# loop


def _batches(cfg: RunConfig, n_scenes: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([cfg.seed, epoch, SHUFFLE_PURPOSE]).permutation(n_scenes)
    return [order[i : i + cfg.batch_size] for i in range(0, n_scenes, cfg.batch_size)]


LOG_FIELDS = ["epoch", "step", "global_step", "lr", "grad_norm"]


def _log_fields(n_stages: int) -> list[str]:
    parts = []
    for t in range(1, n_stages + 1):
        parts += [f"s{t}_cls", f"s{t}_reg", f"s{t}_oim", f"s{t}_id"]
    return LOG_FIELDS + parts + ["total"]


def train_step(state: TrainState, scenes: list[tb.Scene], lr: float) -> tuple[dict[str, float], float]:
    cfg = state.cfg
    rng = np.random.default_rng([cfg.seed, state.epoch, state.step, STEP_PURPOSE])
    try:
        result = C.compute_loss(
            state.model, scenes, state.oim, rng, lambda_oim=cfg.loss.lambda_oim, lambda_id=cfg.loss.lambda_id
        )
    except C.NonFiniteTerm as exc:
        T.current_tape().clear()
        raise TrainingDiverged(exc.term, state.epoch, state.step) from exc
    parts = result.report.parts
    for key, value in parts.items():
        if not math.isfinite(value):
            raise TrainingDiverged(key, state.epoch, state.step)
    try:
        T.backward(result.report.total)
        norm = state.optimizer.step(lr)
    except FloatingPointError as exc:
        raise TrainingDiverged("gradient", state.epoch, state.step) from exc
    C.apply_oim_updates(state.oim, result.oim_updates)
    return parts, norm


def train(
    cfg: RunConfig,
    bench: tb.Benchmark,
    out: str | Path,
    state: TrainState | None = None,
    max_steps: int | None = None,
    checkpoint_every_epoch: bool = True,
) -> TrainState:
    """Train (or resume) and write ``loss_log.csv`` plus per-epoch checkpoints under ``out``.

    ``max_steps`` stops early after that many optimizer steps and checkpoints
    the exact position, so a later call can resume mid-epoch.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if state is None:
        state = build_state(cfg, len([i for i in bench.identities if i.labeled]))
    cfg = state.cfg
    log_path = out / "loss_log.csv"
    fields = _log_fields(cfg.model.stages)
    new_log = not log_path.exists()
    taken = 0
    with T.precision(cfg.precision), open(log_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        if new_log:
            writer.writeheader()
        if cfg.epochs == 0 and state.global_step == 0:
            save_checkpoint(state, out / "checkpoints" / "epoch-000")
        while state.epoch < cfg.epochs:
            batches = _batches(cfg, len(bench.train), state.epoch)
            while state.step < len(batches):
                if max_steps is not None and taken >= max_steps:
                    save_checkpoint(state, out / "checkpoints" / f"step-{state.global_step:06d}")
                    return state
                lr = learning_rate(cfg.optim, state.epoch, state.step, len(batches))
                scenes = [bench.train[i] for i in batches[state.step]]
                parts, norm = train_step(state, scenes, lr)
                row = {"epoch": state.epoch, "step": state.step, "global_step": state.global_step, "lr": lr, "grad_norm": norm}
                row.update({k: repr(float(v)) for k, v in parts.items()})
                writer.writerow(row)
                state.step += 1
                state.global_step += 1
                taken += 1
            state.epoch += 1
            state.step = 0
            fh.flush()
            if checkpoint_every_epoch or state.epoch == cfg.epochs:
                save_checkpoint(state, out / "checkpoints" / f"epoch-{state.epoch:03d}")
            log.info("epoch %d done (%d steps)", state.epoch, state.global_step)
    return state


def latest_checkpoint(out: str | Path) -> Path | None:
    root = Path(out) / "checkpoints"
    if not root.exists():
        return None
    cands = sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
    if not cands:
        return None
    return max(cands, key=lambda p: json.loads((p / "manifest.json").read_text())["global_step"])


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(
    model: C.CascadeModel,
    bench: tb.Benchmark,
    sizes: list[int] | None = None,
    seed: int = 0,
    precision: int = 32,
) -> tuple[E.EvalReport, list[E.DetectionResult]]:
    """Detect on the gallery, embed queries, and score retrieval at each gallery size."""
    gallery = bench.gallery
    sizes = sorted(set(sizes or [len(gallery)]) | {len(gallery)})
    with T.precision(precision):
        dets = []
        for sc in gallery:
            d = C.detect(model, sc, seed)
            dets.append(E.DetectionResult(d.scene_id, d.boxes, d.scores, d.embeddings))
        queries = [E.QueryItem(q.identity, C.embed_boxes(model, q.scene, q.box)[0]) for q in bench.queries]
    gscenes = [E.GalleryScene(sc.scene_id, sc.boxes, sc.labels, d) for sc, d in zip(gallery, dets)]
    det_metrics = E.evaluate_detection(dets, {sc.scene_id: sc.boxes for sc in gallery})
    subsets = tb.gallery_subsets(gallery, bench.queries, sizes, seed)
    curve = E.gallery_sweep(queries, gscenes, subsets)
    full = curve[len(gallery)]
    report = E.EvalReport(
        detection=det_metrics,
        retrieval={"map": full["map"], "top1": full["top1"]},
        curve={k: {"map": v["map"], "top1": v["top1"]} for k, v in curve.items()},
    )
    return report, dets
