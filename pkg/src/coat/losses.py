"""Training objective: detection terms per stage plus OIM and ID terms from stage 2 on."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor
from .toybench import UNLABELED


def _zero() -> Tensor:
    return Tensor(0.0)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of (n, k) logits against integer targets."""
    targets = np.asarray(targets, dtype=np.intp)
    if logits.shape[0] == 0:
        return _zero()
    return T.scale(T.mean(T.pick(T.log_softmax(logits, axis=-1), targets)), -1.0)


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Huber-style loss averaged over every element; empty input gives 0."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1 shape mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        return _zero()
    z = pred.data - target
    small = np.abs(z) < beta
    per = np.where(small, 0.5 * z * z / beta, np.abs(z) - 0.5 * beta)
    n = z.size
    return T.record(
        np.asarray(per.sum() / n, dtype=pred.dtype),
        (pred,),
        lambda g: (g * np.where(small, z / beta, np.sign(z)) / n,),
        "smooth_l1",
    )


def det_cls_loss(logits: Tensor, labels) -> Tensor:
    """Two-way person/background cross-entropy; labels are 1 for person."""
    return cross_entropy(logits, labels)


def det_reg_loss(deltas: Tensor, target_deltas, positive) -> Tensor:
    """Smooth-L1 on box deltas of positive proposals only."""
    positive = np.flatnonzero(np.asarray(positive, dtype=bool))
    if positive.size == 0:
        return _zero()
    return smooth_l1(T.take(deltas, positive, axis=0), np.asarray(target_deltas)[positive])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


@dataclass
class OimState:
    """Lookup table of labeled-identity prototypes plus a FIFO of unlabeled features.

    Neither buffer is learned: ``update`` rewrites them after the backward pass.
    """

    lut: np.ndarray
    cq: np.ndarray
    tau: float = 1.0 / 30
    gamma: float = 0.5
    cq_count: int = 0
    cq_cursor: int = 0

    @classmethod
    def create(
        cls, n_ids: int, dim: int, capacity: int, rng: np.random.Generator, tau: float = 1.0 / 30, gamma: float = 0.5
    ) -> "OimState":
        lut = _unit_rows(rng.normal(size=(n_ids, dim)))
        return cls(lut=lut, cq=np.zeros((capacity, dim)), tau=tau, gamma=gamma)

    @property
    def capacity(self) -> int:
        return len(self.cq)

    def queue(self) -> np.ndarray:
        """Filled CQ rows, oldest first."""
        if self.cq_count < self.capacity:
            return self.cq[: self.cq_count]
        return np.roll(self.cq, -self.cq_cursor, axis=0)

    def memory(self) -> np.ndarray:
        return np.concatenate([self.lut, self.cq[: self.cq_count]], axis=0)

    def push(self, rows: np.ndarray) -> None:
        if self.capacity == 0:
            return
        for row in _unit_rows(np.atleast_2d(rows)):
            self.cq[self.cq_cursor] = row
            self.cq_cursor = (self.cq_cursor + 1) % self.capacity
            self.cq_count = min(self.cq_count + 1, self.capacity)

    def update(self, embeddings: np.ndarray, identities) -> None:
        """Momentum-update LUT rows for labeled ids and enqueue unlabeled features."""
        embeddings = np.asarray(embeddings, dtype=np.float64)
        identities = np.asarray(identities)
        _check_ids(identities, len(self.lut))
        for e, pid in zip(embeddings, identities):
            if pid == UNLABELED:
                self.push(e)
            else:
                row = self.gamma * self.lut[pid] + (1.0 - self.gamma) * e
                self.lut[pid] = _unit_rows(row)

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {
            f"{prefix}lut": self.lut.copy(),
            f"{prefix}cq": self.cq.copy(),
            f"{prefix}cq_meta": np.array([self.cq_count, self.cq_cursor], dtype=np.int64),
        }

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        lut, cq = state[f"{prefix}lut"], state[f"{prefix}cq"]
        if lut.shape != self.lut.shape or cq.shape != self.cq.shape:
            raise ValueError("OIM state shape mismatch")
        self.lut = np.array(lut, dtype=np.float64)
        self.cq = np.array(cq, dtype=np.float64)
        self.cq_count, self.cq_cursor = (int(v) for v in state[f"{prefix}cq_meta"])


def _check_ids(identities: np.ndarray, n_ids: int) -> None:
    bad = (identities != UNLABELED) & ((identities < 0) | (identities >= n_ids))
    if bad.any():
        raise ValueError(f"identity {identities[bad][0]} outside lookup table of {n_ids}")


def oim_logits(embeddings: Tensor, state: OimState) -> Tensor:
    memory = Tensor(state.memory().T, dtype=embeddings.dtype)
    return T.scale(T.matmul(embeddings, memory), 1.0 / state.tau)


def oim_loss(embeddings: Tensor, identities, state: OimState) -> Tensor:
    """Cross-entropy of labeled embeddings against LUT + CQ similarities.

    Does not touch ``state``; call ``state.update`` once the step's gradients
    are computed.
    """
    identities = np.asarray(identities)
    _check_ids(identities, len(state.lut))
    labeled = np.flatnonzero(identities != UNLABELED)
    if labeled.size == 0:
        return _zero()
    emb = T.take(embeddings, labeled, axis=0)
    return cross_entropy(oim_logits(emb, state), identities[labeled])


class IdClassifier(Module):
    def __init__(self, dim: int, n_ids: int, rng: np.random.Generator):
        self.fc = Linear(dim, n_ids, rng, std=0.01)

    @property
    def n_ids(self) -> int:
        return self.fc.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc(x)


def id_loss(embeddings: Tensor, identities, classifier: IdClassifier) -> Tensor:
    identities = np.asarray(identities)
    _check_ids(identities, classifier.n_ids)
    labeled = np.flatnonzero(identities != UNLABELED)
    if labeled.size == 0:
        return _zero()
    return cross_entropy(classifier(T.take(embeddings, labeled, axis=0)), identities[labeled])


@dataclass
class StageLoss:
    det_cls: Tensor
    det_reg: Tensor
    oim: Tensor | None = None
    id: Tensor | None = None

    @property
    def det(self) -> float:
        return self.det_cls.item() + self.det_reg.item()


@dataclass
class LossReport:
    stages: list[StageLoss]
    lambda_oim: float
    lambda_id: float
    total: Tensor
    first_reid_stage: int = 2
    parts: dict[str, float] = field(default_factory=dict)

    def recompute(self) -> float:
        """Rebuild the total from the per-stage scalars."""
        total = 0.0
        for t, s in enumerate(self.stages, start=1):
            total += s.det
            if t >= self.first_reid_stage:
                total += self.lambda_oim * _val(s.oim) + self.lambda_id * _val(s.id)
        return total


def _val(x) -> float:
    return 0.0 if x is None else (x.item() if isinstance(x, Tensor) else float(x))


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def total_loss(
    stages: list[StageLoss], lambda_oim: float = 0.5, lambda_id: float = 0.5, first_reid_stage: int = 2
) -> LossReport:
    """Sum detection terms over all stages and weighted ReID terms from ``first_reid_stage`` on."""
    stages = [StageLoss(_t(s.det_cls), _t(s.det_reg), s.oim, s.id) for s in stages]
    total = None
    parts: dict[str, float] = {}
    for t, s in enumerate(stages, start=1):
        terms = [s.det_cls, s.det_reg]
        parts[f"s{t}_cls"] = s.det_cls.item()
        parts[f"s{t}_reg"] = s.det_reg.item()
        if t >= first_reid_stage:
            if s.oim is not None:
                s.oim = _t(s.oim)
                terms.append(T.scale(s.oim, lambda_oim))
                parts[f"s{t}_oim"] = s.oim.item()
            if s.id is not None:
                s.id = _t(s.id)
                terms.append(T.scale(s.id, lambda_id))
                parts[f"s{t}_id"] = s.id.item()
        for term in terms:
            total = term if total is None else T.add(total, term)
    if total is None:
        total = _zero()
    parts["total"] = total.item()
    return LossReport(stages, lambda_oim, lambda_id, total, first_reid_stage, parts)
