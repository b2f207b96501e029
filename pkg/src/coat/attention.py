"""Occluded attention: multi-scale tokenization, token exchange and self-attention.

Feature maps are channels-last, shaped (P, h, w, c) with P the number of
proposals in the bank. Each scale owns a channel slice of width c / n_scales.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Module, _param
from .tensor import Tensor

log = logging.getLogger(__name__)

Mode = Literal["train", "infer"]


@dataclass(frozen=True)
class ScaleSpec:
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class TokenizerConfig:
    scales: tuple[ScaleSpec, ...] = (ScaleSpec(1, 1, 0), ScaleSpec(3, 1, 1))
    patch: int = 1

    @property
    def n_scales(self) -> int:
        return len(self.scales)


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 8
    ffn_mult: int = 2
    strip_fraction: float = 0.25
    stop_donor_grad: bool = False
    out_init_std: float = 0.02
    pos_embed: bool = True  # learned per-token offsets; without them GAP discards where things sit in the box
    pos_init_std: float = 0.02


def token_count(h: int, w: int, k: int, s: int, p: int, d: int) -> int:
    gh, gw = token_grid(h, w, ScaleSpec(k, s, p), d)
    return gh * gw


def token_grid(h: int, w: int, scale: ScaleSpec, d: int) -> tuple[int, int]:
    """Token-map extents (rows, cols) after the conv tokenizer and d x d patching."""
    hh = T.conv_output_size(h, scale.kernel, scale.stride, scale.padding)
    ww = T.conv_output_size(w, scale.kernel, scale.stride, scale.padding)
    if d < 1 or hh % d or ww % d:
        raise ValueError(f"patch size {d} does not divide token map {hh}x{ww}")
    return hh // d, ww // d


# ---------------------------------------------------------------------------
# exchange


@dataclass
class ExchangePlan:
    """Which token positions are swapped, and with whom.

    ``mask`` is a boolean (rows, cols) map over the token grid, identical for
    every instance. Instance i receives its masked tokens from ``partner[i]``.
    """

    mask: np.ndarray
    partner: np.ndarray
    orientation: Literal["horizontal", "vertical"] = "horizontal"
    thickness: int = 0

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=bool)
        self.partner = np.asarray(self.partner, dtype=np.intp)
        if self.mask.ndim != 2:
            raise ValueError("exchange mask must be 2-D over the token grid")
        p = len(self.partner)
        if sorted(self.partner.tolist()) != list(range(p)):
            raise ValueError("partner must be a permutation")
        if p and np.any(self.partner == np.arange(p)):
            raise ValueError("partner permutation has a fixed point")

    @property
    def positions(self) -> np.ndarray:
        return np.flatnonzero(self.mask.reshape(-1))

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(~self.mask.reshape(-1))


def cyclic_partner(n: int, rng: np.random.Generator) -> np.ndarray:
    order = rng.permutation(n)
    partner = np.empty(n, dtype=np.intp)
    partner[order] = np.roll(order, -1)
    return partner


def strip_mask(grid: tuple[int, int], orientation: str, start: int, thickness: int) -> np.ndarray:
    gh, gw = grid
    mask = np.zeros(grid, dtype=bool)
    if orientation == "horizontal":
        if not 0 <= start <= gh - thickness:
            raise ValueError(f"row strip [{start}, {start + thickness}) outside {gh} rows")
        mask[start : start + thickness, :] = True
    elif orientation == "vertical":
        if not 0 <= start <= gw - thickness:
            raise ValueError(f"column strip [{start}, {start + thickness}) outside {gw} cols")
        mask[:, start : start + thickness] = True
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    return mask


def plan_exchange(
    n_instances: int,
    grid: tuple[int, int],
    rng: np.random.Generator,
    thickness: int | None = None,
    strip_fraction: float = 0.25,
) -> ExchangePlan | None:
    """Random horizontal or vertical strip plus a cyclic partner permutation.

    Returns None (with a warning) when fewer than two instances are available.
    """
    if n_instances < 2:
        log.warning("token exchange needs at least 2 instances, got %d; skipping", n_instances)
        return None
    gh, gw = grid
    orientation = "horizontal" if rng.random() < 0.5 else "vertical"
    extent = gh if orientation == "horizontal" else gw
    if thickness is None:
        thickness = max(1, math.ceil(extent * strip_fraction))
    thickness = min(thickness, extent)
    start = int(rng.integers(0, extent - thickness + 1))
    return ExchangePlan(
        mask=strip_mask(grid, orientation, start, thickness),
        partner=cyclic_partner(n_instances, rng),
        orientation=orientation,
        thickness=thickness,
    )


def exchange_tokens(tokens: Tensor, plan: ExchangePlan | None, stop_donor_grad: bool = False) -> Tensor:
    """tokens: (P, N, D). Masked positions of instance i come from instance partner[i]."""
    if plan is None:
        return tokens
    p, n = tokens.shape[:2]
    if len(plan.partner) != p or plan.mask.size != n:
        raise ValueError(
            f"plan for {len(plan.partner)} instances x {plan.mask.size} tokens "
            f"does not fit bank {p} x {n}"
        )
    if not plan.mask.any():
        return tokens
    donor = tokens.detach() if stop_donor_grad else tokens
    swapped = T.take(donor, plan.partner, axis=0)
    return T.mix(plan.mask.reshape(1, n, 1), tokens, swapped)


# ---------------------------------------------------------------------------
# attention


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"token dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        p, n, dim = x.shape
        return T.transpose(T.reshape(x, (p, n, self.heads, dim // self.heads)), (0, 2, 1, 3))

    def weights(self, x: Tensor) -> Tensor:
        """Attention probabilities, shape (P, heads, N, N)."""
        q, k = self._split(self.q(x)), self._split(self.k(x))
        head_dim = x.shape[-1] // self.heads
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
        return T.softmax(scores, axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise ValueError(f"attention expects (P, N, D) tokens, got {x.shape}")
        p, n, dim = x.shape
        ctx = T.matmul(self.weights(x), self._split(self.v(x)))
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (p, n, dim))
        return self.out(ctx)


def msa(x: Tensor, attn: MultiHeadAttention) -> Tensor:
    return attn(x)


class EncoderLayer(Module):
    """Post-norm transformer layer: LN(x + MSA(x)) then LN(x + FFN(x))."""

    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.norm1(T.add(x, self.attn(x)))
        return self.norm2(T.add(x, self.fc2(T.relu(self.fc1(x)))))


class _ScaleBranch(Module):
    def __init__(self, width: int, spec: ScaleSpec, patch: int, n_tokens: int, acfg: AttentionConfig, rng):
        dim = width * patch * patch
        self.tokenizer = Conv2d(width, width, spec.kernel, rng, spec.stride, spec.padding)
        self.pos = _param(rng.normal(0.0, acfg.pos_init_std, size=(n_tokens, dim)), "pos") if acfg.pos_embed else None
        self.encoder = EncoderLayer(dim, acfg.heads, acfg.ffn_mult * dim, rng)
        self.project = Linear(dim, dim, rng, std=acfg.out_init_std)


def _patchify(x: Tensor, d: int) -> Tensor:
    p, h, w, c = x.shape
    if d == 1:
        return T.reshape(x, (p, h * w, c))
    x = T.reshape(x, (p, h // d, d, w // d, d, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (p, (h // d) * (w // d), d * d * c))


def _unpatchify(x: Tensor, grid: tuple[int, int], d: int) -> Tensor:
    p = x.shape[0]
    gh, gw = grid
    c = x.shape[-1] // (d * d)
    if d == 1:
        return T.reshape(x, (p, gh, gw, c))
    x = T.reshape(x, (p, gh, gw, d, d, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (p, gh * d, gw * d, c))


def _resize_nearest(x: Tensor, h: int, w: int) -> Tensor:
    _, hh, ww, _ = x.shape
    if (hh, ww) == (h, w):
        return x
    x = T.take(x, (np.arange(h) * hh) // h, axis=1)
    return T.take(x, (np.arange(w) * ww) // w, axis=2)


class OccludedAttention(Module):
    """One occluded-attention block for feature maps of shape (P, h, w, c).

    Train mode applies the supplied exchange plan to the token bank of every
    scale; infer mode is plain multi-scale self-attention. The output keeps the
    input shape: per-scale outputs are concatenated channel-wise and added to
    the input map.
    """

    def __init__(
        self,
        channels: int,
        spatial: tuple[int, int],
        rng: np.random.Generator,
        tokenizer: TokenizerConfig = TokenizerConfig(),
        attention: AttentionConfig = AttentionConfig(),
    ):
        n = tokenizer.n_scales
        if n < 1 or channels % n:
            raise ValueError(f"{channels} channels cannot be split into {n} scales")
        self.channels = channels
        self.width = channels // n
        self.spatial = tuple(spatial)
        self.tcfg = tokenizer
        self.acfg = attention
        grids = {token_grid(*spatial, s, tokenizer.patch) for s in tokenizer.scales}
        if len(grids) != 1:
            raise ValueError(f"scales disagree on token grid: {sorted(grids)}")
        self.grid: tuple[int, int] = grids.pop()
        dim = self.width * tokenizer.patch**2
        if dim % attention.heads:
            raise ValueError(f"token dim {dim} not divisible by {attention.heads} heads")
        n_tok = self.grid[0] * self.grid[1]
        self.branches = [_ScaleBranch(self.width, s, tokenizer.patch, n_tok, attention, rng) for s in tokenizer.scales]

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def plan(self, n_instances: int, rng: np.random.Generator) -> ExchangePlan | None:
        return plan_exchange(n_instances, self.grid, rng, strip_fraction=self.acfg.strip_fraction)

    def tokenize(self, feats: Tensor) -> list[Tensor]:
        """Per-scale token sets, each (P, N, width * patch**2)."""
        out = []
        for i, br in enumerate(self.branches):
            part = T.slice_(feats, -1, i * self.width, (i + 1) * self.width)
            out.append(_patchify(br.tokenizer(part), self.tcfg.patch))
        return out

    def __call__(self, feats: Tensor, mode: Mode = "infer", plan: ExchangePlan | None = None) -> Tensor:
        if feats.ndim != 4 or feats.shape[-1] != self.channels:
            raise ValueError(f"expected (P, h, w, {self.channels}) features, got {feats.shape}")
        if mode == "train":
            if plan is None and feats.shape[0] >= 2:
                raise ValueError("train mode needs an exchange plan")
        elif mode == "infer":
            plan = None
        else:
            raise ValueError(f"unknown mode {mode!r}")
        h, w = feats.shape[1:3]
        outs = []
        for br, tokens in zip(self.branches, self.tokenize(feats)):
            tokens = exchange_tokens(tokens, plan, self.acfg.stop_donor_grad)
            if br.pos is not None:
                tokens = T.add(tokens, br.pos)
            y = br.project(br.encoder(tokens))
            outs.append(_resize_nearest(_unpatchify(y, self.grid, self.tcfg.patch), h, w))
        return T.add(feats, T.concat(outs, axis=-1) if len(outs) > 1 else outs[0])


def gap(x: Tensor) -> Tensor:
    """Global average pool over the spatial axes of (..., h, w, c)."""
    return T.mean(x, axis=(-3, -2))
