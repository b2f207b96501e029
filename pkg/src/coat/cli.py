"""``coat`` command line: gen-data, train, eval, gradcheck, ablate.

Every failure prints one line ``error: <CODE>: <message>`` to stderr and exits
nonzero. Codes: E_CONFIG, E_IO, E_VERSION, E_NAN, E_PRESET, E_GRADCHECK.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import ablation as AB
from . import checks
from . import config as cfgmod
from . import evaluation as E
from . import toybench as tb
from . import train as TR
from .tensor import NonFiniteError

log = logging.getLogger("coat")

EXIT_CODES = {"E_CONFIG": 2, "E_IO": 3, "E_VERSION": 4, "E_NAN": 5, "E_PRESET": 6, "E_GRADCHECK": 7}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def load_config(path: str | None, seed: int | None = None) -> cfgmod.RunConfig:
    cfg = cfgmod.load(path) if path else cfgmod.RunConfig()
    env = os.environ.get("COAT_PRECISION")
    if env is not None:
        try:
            cfg = dataclasses.replace(cfg, precision=int(env))
        except ValueError as exc:
            raise cfgmod.ConfigError(f"COAT_PRECISION={env!r}: {exc}") from exc
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _benchmark(data: str | None, cfg: cfgmod.RunConfig) -> tb.Benchmark:
    if data is None:
        return tb.generate(cfg.data)
    if not (Path(data) / "annotations.json").exists():
        raise CliError("E_IO", f"no benchmark at {data} (missing annotations.json)")
    return tb.load(data)


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    spec = cfg.data if args.seed is None else dataclasses.replace(cfg.data, rng_seed=args.seed)
    bench = tb.generate(spec)
    root = tb.save(bench, args.out)
    print(f"wrote {len(bench.train)} train and {len(bench.test)} test scenes, {len(bench.queries)} queries to {root}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.seed)
    bench = _benchmark(args.data, cfg)
    out = Path(args.out)
    state = None
    if args.resume:
        ckpt = TR.latest_checkpoint(out)
        if ckpt is None:
            raise CliError("E_IO", f"--resume given but no checkpoint under {out}")
        state = TR.load_checkpoint(ckpt)
        log.info("resuming from %s (epoch %d, step %d)", ckpt, state.epoch, state.step)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.save(cfg if state is None else state.cfg, out / "config.yaml")
    state = TR.train(cfg, bench, out, state=state, max_steps=args.max_steps)
    print(f"trained to epoch {state.epoch} ({state.global_step} steps); checkpoints in {out / 'checkpoints'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").exists():
        found = TR.latest_checkpoint(ckpt)
        if found is None:
            raise CliError("E_IO", f"no checkpoint at {ckpt}")
        ckpt = found
    state = TR.load_checkpoint(ckpt)
    cfg = state.cfg
    bench = _benchmark(args.data, cfg)
    n_labeled = sum(i.labeled for i in bench.identities)
    if n_labeled != state.model.n_ids:
        raise CliError("E_CONFIG", f"checkpoint has {state.model.n_ids} identities, benchmark has {n_labeled}")
    sizes = args.gallery_sizes or list(cfg.gallery_sizes)
    too_big = [s for s in sizes if s > len(bench.gallery) or s < 1]
    if too_big:
        raise CliError("E_CONFIG", f"gallery sizes {too_big} outside 1..{len(bench.gallery)}")
    report, dets = TR.evaluate_model(state.model, bench, sizes, cfg.eval_seed, cfg.precision)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    requested = E.EvalReport(report.detection, report.retrieval, {s: report.curve[s] for s in sorted(set(sizes))})
    (out / "gallery_curve.csv").write_text(requested.curve_csv())
    E.write_detections(out / "detections.jsonl", dets)
    r = report.retrieval
    print(f"mAP {r['map']:.4f}  top-1 {r['top1']:.4f}  detection AP {report.detection['ap']:.4f}; wrote {out}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = checks.run_gradcheck(args.scope, args.seed or 0)
    print(report.table())
    if not report.passed:
        raise CliError("E_GRADCHECK", f"{args.scope} gradcheck failed, max rel err {report.max_rel_err:.3e}")
    print(f"{args.scope}: PASS (max rel err {report.max_rel_err:.3e})")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.preset not in AB.PRESETS:
        raise CliError("E_PRESET", f"unknown preset {args.preset!r}; choose from {', '.join(sorted(AB.PRESETS))}")
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    bench = _benchmark(args.data, cfg)
    seeds = args.seeds or [cfg.seed if args.seed is None else args.seed]
    table = AB.run_ablation(args.preset, cfg, bench, args.out, seeds)
    print(table.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", help="YAML run config (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="generate the toy benchmark on disk")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model, writing loss_log.csv and checkpoints")
    common(p)
    p.add_argument("--data", help="benchmark directory (generated from the config when omitted)")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint under --out")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint: report JSON, gallery-size CSV, detections")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory or training output directory")
    p.add_argument("--data", help="benchmark directory (generated from the checkpoint config when omitted)")
    p.add_argument("--gallery-sizes", type=_int_list, help="comma-separated gallery sizes, e.g. 2,4,8,16")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--scope", choices=checks.SCOPES, default="op")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train every variant of an ablation preset")
    common(p)
    p.add_argument("--preset", required=True, help=f"one of: {', '.join(AB.PRESETS)}")
    p.add_argument("--data", help="benchmark directory")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
    p.add_argument("--epochs", type=int, help="training budget per variant")
    p.set_defaults(func=cmd_ablate)
    return parser


def _code(exc: BaseException) -> str | None:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, TR.VersionMismatch):
        return "E_VERSION"
    if isinstance(exc, (TR.TrainingDiverged, NonFiniteError)):
        return "E_NAN"
    if isinstance(exc, AB.UnknownPreset):
        return "E_PRESET"
    if isinstance(exc, (cfgmod.ConfigError, tb.InfeasibleSpec)):
        return "E_CONFIG"
    if isinstance(exc, (OSError, TR.CheckpointError, KeyError, EOFError)):
        return "E_IO"
    return None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to a single-line code below
        code = _code(exc)
        if code is None:
            raise
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {code}: {message}", file=sys.stderr)
        return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
