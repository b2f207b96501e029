"""Gradient checks at three scopes: single ops, one attention block, the full cascade loss."""

from __future__ import annotations

import numpy as np

from . import attention as A
from . import cascade as C
from . import tensor as T
from . import toybench as tb
from .gradcheck import GradcheckReport, away_from_zero, gradcheck
from .tensor import Tensor

SCOPES = ("op", "block", "full")


def tiny_cascade() -> C.CascadeConfig:
    """Three stages, narrow enough that finite differences over every tensor stay cheap."""
    return C.CascadeConfig(
        proposals_per_image=12,
        embed_dim=8,
        pool_size=4,
        channels=8,
        stem_channels=(4, 8),
        attention=A.AttentionConfig(heads=2),
        jitter=0.1,  # tight proposals keep positives alive up to the 0.7 stage
    )


def _merge(reports: list[GradcheckReport], tol: float, eps: float) -> GradcheckReport:
    out = GradcheckReport(tol=tol, eps=eps)
    for r in reports:
        out.checks.extend(r.checks)
    return out


def _ops(rng: np.random.Generator, tol: float, eps: float) -> GradcheckReport:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 5))
    img = rng.normal(size=(1, 5, 5, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    cases = {
        "linear": ([a, w], lambda x, y: T.linear(x, y)),
        "mul": ([a, b], T.mul),
        "relu": ([away_from_zero(a)], T.relu),
        "softmax": ([a], lambda x: T.softmax(x, axis=-1)),
        "log_softmax": ([a], lambda x: T.log_softmax(x, axis=-1)),
        "layer_norm": ([a, np.ones(4), np.zeros(4)], T.layer_norm),
        "l2_normalize": ([a], T.l2_normalize),
        "conv2d": ([img, k], lambda x, y: T.conv2d(x, y, stride=1, padding=1)),
        "mean": ([a], lambda x: T.mean(x, axis=0)),
    }
    reports = []
    for name, (arrays, fn) in cases.items():
        ts = [Tensor(x, requires_grad=True, name=f"{name}[{i}]") for i, x in enumerate(arrays)]
        with T.no_grad():
            probe = Tensor(rng.normal(size=fn(*ts).shape))
        reports.append(gradcheck(lambda fn=fn, ts=ts, probe=probe: T.sum_(T.mul(fn(*ts), probe)), ts, eps, tol))
    return _merge(reports, tol, eps)


def _block(rng: np.random.Generator, tol: float, eps: float, max_checks: int) -> GradcheckReport:
    block = A.OccludedAttention(8, (3, 3), rng, attention=A.AttentionConfig(heads=2))
    x = Tensor(rng.normal(size=(3, 3, 3, 8)), requires_grad=True, name="input")
    plan = block.plan(3, rng)
    probe = Tensor(rng.normal(size=(3, 8)))
    f = lambda: T.sum_(T.mul(A.gap(block(x, "train", plan)), probe))  # noqa: E731
    return gradcheck(f, [x, *block.named_parameters()], eps, tol, max_checks, rng)


def full_model_check(
    seed: int = 0, n_scenes: int = 4, tol: float = 1e-4, eps: float = 1e-5, max_checks: int = 4
) -> GradcheckReport:
    """Every learned tensor of a three-stage model against the total multi-stage loss.

    Proposals and exchange plans are sampled once and replayed, so the loss is
    a fixed function of the weights while entries are perturbed.
    """
    spec = tb.SplitSpec(n_train_scenes=n_scenes, n_test_scenes=4, n_identities=4, n_unlabeled=1, gallery_size=4)
    bench = tb.generate(spec)
    scenes = bench.train[:n_scenes]
    rng = np.random.default_rng(seed)
    with T.precision(64):
        model = C.CascadeModel(tiny_cascade(), 4, rng)
        # one short warm pass fills the LUT and queue so the OIM terms see real memory
        oim = model.new_oim_states(8, rng)
        first = C.compute_loss(model, scenes, oim, rng)
        C.apply_oim_updates(oim, first.oim_updates)
        T.current_tape().clear()
        step = C.compute_loss(model, scenes, oim, rng)
        trace = step.trace
        for out in step.outputs:
            if not out.assignment.positive.any():
                raise RuntimeError(f"stage {out.stage} has no positive proposals; its heads would go unchecked")
        T.current_tape().clear()

        def loss() -> Tensor:
            return C.compute_loss(model, scenes, oim, trace=trace).report.total

        return gradcheck(loss, list(model.named_parameters()), eps, tol, max_checks, rng)


def run_gradcheck(scope: str, seed: int = 0, tol: float = 1e-4, eps: float = 1e-5) -> GradcheckReport:
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES}")
    if scope == "full":
        return full_model_check(seed, tol=tol, eps=eps)
    rng = np.random.default_rng(seed)
    with T.precision(64):
        if scope == "op":
            return _ops(rng, tol, eps)
        return _block(rng, tol, eps, max_checks=12)
