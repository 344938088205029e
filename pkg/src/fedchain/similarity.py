"""Layer-activation similarity profiling and start-layer selection.

Each layer's output is compared against the embedded input with linear-kernel
CKA, computed once on a single mini-batch.  Aggregated profiles pick the first
layer whose similarity falls below a threshold; adapter training starts there.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelStack, adapter_forward
from .tensor import Tensor, no_grad

HSIC_FLOOR = 1e-15


class DegenerateSimilarity(ValueError):
    """CKA undefined: an activation matrix has (near-)zero self-HSIC."""


def _activation_matrix(z) -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"activation matrix must be 2D [samples, features], got {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError(f"need at least 2 samples, got {arr.shape[0]}")
    return arr


def hsic_linear(zi, zj) -> float:
    """Biased empirical linear-kernel HSIC: tr(K H L H) / (n-1)^2.

    Evaluated as ||centered(zi)^T centered(zj)||_F^2 / (n-1)^2, which is the
    same quantity without materializing n x n Gram matrices.
    """
    zi, zj = _activation_matrix(zi), _activation_matrix(zj)
    n = zi.shape[0]
    if zj.shape[0] != n:
        raise ValueError(f"row counts differ: {n} vs {zj.shape[0]}")
    cross = (zi - zi.mean(axis=0)).T @ (zj - zj.mean(axis=0))
    return float((cross * cross).sum()) / (n - 1) ** 2


def cka(zi, zj) -> float:
    """CKA(zi, zj) = HSIC(zi, zj) / sqrt(HSIC(zi, zi) HSIC(zj, zj))."""
    self_i = hsic_linear(zi, zi)
    self_j = hsic_linear(zj, zj)
    if self_i <= HSIC_FLOOR or self_j <= HSIC_FLOOR:
        which = "first" if self_i <= HSIC_FLOOR else "second"
        raise DegenerateSimilarity(f"{which} argument has near-zero self-HSIC; CKA undefined")
    return float(hsic_linear(zi, zj) / np.sqrt(self_i * self_j))


@dataclass
class CKAProfile:
    """Per-layer similarity scores (index 0 is layer 1) with a sample weight."""

    scores: list[float]
    sample_weight: int

    def __post_init__(self):
        if self.sample_weight <= 0:
            raise ValueError("sample_weight must be positive")
        for i, s in enumerate(self.scores, start=1):
            if not -1e-9 <= s <= 1.0 + 1e-9:
                raise ValueError(f"layer {i} score {s} outside [0, 1]")


def _layer_bytes(stack: ModelStack) -> list[int]:
    # f64 compute: backbone plus adapter params per layer
    out = []
    for unit in stack.units:
        n = sum(t.size for t in unit.backbone.params().values())
        n += unit.adapter.down.size + unit.adapter.up.size
        out.append(n * 8)
    return out


def partition_layers(stack: ModelStack, n_rows: int, mem_budget: float) -> list[list[int]]:
    """Greedy maximal contiguous blocks whose resident cost fits mem_budget.

    Block cost = block param bytes + carried hidden state (input and output
    rows at width u, f64).
    """
    carry = 2 * n_rows * stack.dims.u * 8
    layer_bytes = _layer_bytes(stack)
    blocks: list[list[int]] = []
    current: list[int] = []
    current_bytes = carry
    for i, cost in enumerate(layer_bytes, start=1):
        if not current:
            if carry + cost > mem_budget:
                raise ValueError(
                    f"mem_budget {mem_budget} below single-layer floor {carry + cost} at layer {i}"
                )
            current, current_bytes = [i], carry + cost
        elif current_bytes + cost <= mem_budget:
            current.append(i)
            current_bytes += cost
        else:
            blocks.append(current)
            if carry + cost > mem_budget:
                raise ValueError(
                    f"mem_budget {mem_budget} below single-layer floor {carry + cost} at layer {i}"
                )
            current, current_bytes = [i], carry + cost
    if current:
        blocks.append(current)
    return blocks


def _flat_rows(h: Tensor) -> np.ndarray:
    b, t, u = h.shape
    return h.data.reshape(b * t, u)


def profile_layers(stack: ModelStack, batch, mem_budget: float | None = None,
                   blocks: list[list[int]] | None = None) -> CKAProfile:
    """One-time inference profile of CKA(layer output, embedded input).

    Layers run block by block under the memory budget; only the inter-block
    hidden state is carried across blocks (transient compute, immediate
    eviction).  The profile is independent of the chosen partition.
    """
    with no_grad():
        z0 = stack.embed(batch)
        n_rows = z0.shape[0] * z0.shape[1]
        if blocks is None:
            if mem_budget is None:
                blocks = [list(range(1, stack.L + 1))]
            else:
                blocks = partition_layers(stack, n_rows, mem_budget)
        if [i for blk in blocks for i in blk] != list(range(1, stack.L + 1)):
            raise ValueError(f"blocks {blocks} do not cover layers 1..{stack.L} in order")
        z0_rows = _flat_rows(z0)
        scores: list[float] = []
        h = z0
        for blk in blocks:
            h = Tensor(h.data)  # fresh carried hidden; previous block evicted
            for i in blk:
                unit = stack.units[i - 1]
                h = adapter_forward(unit.backbone.forward(h), unit.adapter)
                scores.append(cka(_flat_rows(h), z0_rows))
    return CKAProfile(scores=scores, sample_weight=n_rows)


def aggregate_profiles(profiles: list[CKAProfile]) -> CKAProfile:
    """Sample-weighted mean of per-client profiles."""
    if not profiles:
        raise ValueError("no profiles to aggregate")
    L = len(profiles[0].scores)
    for p in profiles:
        if len(p.scores) != L:
            raise ValueError(f"profile lengths differ: {len(p.scores)} vs {L}")
    total = sum(p.sample_weight for p in profiles)
    scores = [
        sum(p.scores[i] * p.sample_weight for p in profiles) / total
        for i in range(L)
    ]
    return CKAProfile(scores=scores, sample_weight=total)


def select_start_layer(profile: CKAProfile, threshold: float) -> int:
    """First layer whose aggregated score falls strictly below the threshold.

    Falls back to the last layer when no score is below (maximal freezing).
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    for i, s in enumerate(profile.scores, start=1):
        if s < threshold:
            return i
    return len(profile.scores)
