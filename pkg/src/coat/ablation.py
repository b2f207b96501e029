"""Ablation presets: train each model variant under the same seeds and budget and tabulate metrics."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import toybench as tb
from . import train as TR
from .attention import ScaleSpec, TokenizerConfig
from .cascade import CascadeConfig
from .config import RunConfig

log = logging.getLogger(__name__)

Variant = Callable[[CascadeConfig], CascadeConfig]


class UnknownPreset(KeyError):
    pass


def _stages(n: int) -> Variant:
    def apply(m: CascadeConfig) -> CascadeConfig:
        # a single stage must carry the ReID head, otherwise there is nothing to search with
        return dataclasses.replace(
            m,
            stages=n,
            iou_thresholds=(0.5, 0.6, 0.7)[:n],
            nms_thresholds=(0.4, 0.4, 0.5)[:n],
            reid_stage1=m.reid_stage1 or n == 1,
        )

    return apply


def _iou(*u: float) -> Variant:
    return lambda m: dataclasses.replace(m, iou_thresholds=tuple(u))


def _scales(*specs: tuple[int, int, int]) -> Variant:
    return lambda m: dataclasses.replace(m, tokenizer=TokenizerConfig(scales=tuple(ScaleSpec(*s) for s in specs)))


PRESETS: dict[str, dict[str, Variant]] = {
    "stages": {"1-stage": _stages(1), "2-stage": _stages(2), "3-stage": _stages(3)},
    "iou-schedule": {
        "flat-0.5": _iou(0.5, 0.5, 0.5),
        "flat-0.6": _iou(0.6, 0.6, 0.6),
        "flat-0.7": _iou(0.7, 0.7, 0.7),
        "rising": _iou(0.5, 0.6, 0.7),
    },
    "attention": {
        "vanilla": lambda m: dataclasses.replace(m, exchange=False),
        "occluded": lambda m: dataclasses.replace(m, exchange=True),
    },
    "scales": {
        "1x1": _scales((1, 1, 0)),
        "3x3": _scales((3, 1, 1)),
        "both": _scales((1, 1, 0), (3, 1, 1)),
    },
    "reid-stage1": {
        "off": lambda m: dataclasses.replace(m, reid_stage1=False),
        "on": lambda m: dataclasses.replace(m, reid_stage1=True),
    },
}


def variant_config(base: RunConfig, preset: str, variant: str, seed: int) -> RunConfig:
    if preset not in PRESETS:
        raise UnknownPreset(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if variant not in PRESETS[preset]:
        raise UnknownPreset(f"preset {preset!r} has no variant {variant!r}")
    return dataclasses.replace(base, model=PRESETS[preset][variant](base.model), seed=seed)


@dataclass
class AblationRow:
    variant: str
    seeds: list[int]
    map: list[float]
    top1: list[float]

    @property
    def mean_map(self) -> float:
        return float(np.mean(self.map))

    @property
    def mean_top1(self) -> float:
        return float(np.mean(self.top1))


@dataclass
class AblationTable:
    preset: str
    rows: list[AblationRow]

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    def to_csv(self) -> str:
        lines = ["variant,seeds,map_mean,top1_mean,map_per_seed,top1_per_seed"]
        for r in self.rows:
            per_map = " ".join(f"{v:.4f}" for v in r.map)
            per_top1 = " ".join(f"{v:.4f}" for v in r.top1)
            lines.append(f"{r.variant},{len(r.seeds)},{r.mean_map:.4f},{r.mean_top1:.4f},{per_map},{per_top1}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max(len(r.variant) for r in self.rows)
        lines = [f"{self.preset}", f"{'variant':<{width}}  {'mAP':>6}  {'top-1':>6}"]
        lines += [f"{r.variant:<{width}}  {r.mean_map:6.3f}  {r.mean_top1:6.3f}" for r in self.rows]
        return "\n".join(lines)


def run_variant(cfg: RunConfig, bench: tb.Benchmark, out: str | Path) -> dict[str, float]:
    """Train one configuration from scratch and return its full-gallery retrieval metrics."""
    out = Path(out)
    state = TR.train(cfg, bench, out, checkpoint_every_epoch=False)
    report, _ = TR.evaluate_model(state.model, bench, [len(bench.gallery)], cfg.eval_seed, cfg.precision)
    (out / "report.json").write_text(report.to_json())
    return report.retrieval


def run_ablation(
    preset: str,
    base: RunConfig,
    bench: tb.Benchmark,
    out: str | Path,
    seeds: list[int] | tuple[int, ...] = (0,),
    variants: list[str] | None = None,
) -> AblationTable:
    """Every variant sees the same benchmark, seeds, epochs and optimizer settings."""
    if preset not in PRESETS:
        raise UnknownPreset(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    names = variants or list(PRESETS[preset])
    out = Path(out)
    rows = []
    for name in names:
        maps, tops = [], []
        for seed in seeds:
            cfg = variant_config(base, preset, name, seed)
            res = run_variant(cfg, bench, out / preset / name / f"seed-{seed}")
            log.info("%s/%s seed %d: mAP %.3f top-1 %.3f", preset, name, seed, res["map"], res["top1"])
            maps.append(res["map"])
            tops.append(res["top1"])
        rows.append(AblationRow(name, list(seeds), maps, tops))
    table = AblationTable(preset, rows)
    (out / preset).mkdir(parents=True, exist_ok=True)
    (out / preset / "table.csv").write_text(table.to_csv())
    (out / preset / "table.json").write_text(
        json.dumps([dataclasses.asdict(r) for r in rows], indent=2)
    )
    return table
