"""Hierarchical memory tree: weight propagation, Gumbel-relaxed top-K
selection, group representation, and the spectral orthogonality penalty.

Slot matrices are ordinary learnable parameters; the root's weight is 1
and each softmax split conserves the parent's weight, so every layer's
weights sum to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Ref, Tape, _softmax_lastdim
from .spectral import DegenerateIterateError, power_iteration_pair


@dataclass(frozen=True)
class MemoryTree:
    layer_sizes: tuple[int, ...] = (1, 32, 512)
    dropout: float = 0.2
    top_k: int = 8

    def __post_init__(self) -> None:
        sizes = self.layer_sizes
        if sizes[0] != 1 or len(sizes) < 2:
            raise ValueError(f"tree must start at a single root: {sizes}")
        for a, b in zip(sizes, sizes[1:]):
            if b <= a or b % a != 0:
                raise ValueError(f"layer sizes must strictly increase and divide: {sizes}")
        if not 0 <= self.top_k <= sizes[-1]:
            raise ValueError(f"top_k {self.top_k} exceeds leaf count {sizes[-1]}")

    @property
    def fanouts(self) -> tuple[int, ...]:
        return tuple(b // a for a, b in zip(self.layer_sizes, self.layer_sizes[1:]))

    @property
    def num_leaves(self) -> int:
        return self.layer_sizes[-1]

    def slot_names(self) -> list[str]:
        return [f"tree/slots{i}" for i in range(1, len(self.layer_sizes))]


@dataclass(frozen=True)
class AnnealSchedule:
    rate: float = 1e-5
    interval: int = 1000
    floor: float = 1.0
    scale: float = 20.0


def temperature(schedule: AnnealSchedule, step: int) -> float:
    """Piecewise-constant exponential annealing, non-increasing in step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    t = (step // schedule.interval) * schedule.interval
    return max(schedule.floor, schedule.scale * np.exp(-schedule.rate * t))


def propagate_weights(tape: Tape, tree: MemoryTree, slots: list[Ref], history: Ref) -> list[Ref]:
    """Per-layer node weights for a (B, d) history batch.

    Each parent splits its own weight over its children with a softmax of
    history-slot scores, so per-layer sums stay 1 and children conserve
    their parent's weight.
    """
    b = history.shape[0]
    weights = [tape.leaf(np.ones((b, 1)))]
    for level, (slot, fanout) in enumerate(zip(slots, tree.fanouts)):
        parents = tree.layer_sizes[level]
        size = tree.layer_sizes[level + 1]
        scores = history.matmul(slot, transpose_b=True)            # (B, size)
        split = scores.reshape((b, parents, fanout)).softmax()
        w = split.mul(weights[-1].reshape((b, parents, 1)))
        weights.append(w.reshape((b, size)))
    return weights


def propagate_weights_np(tree: MemoryTree, slot_values: list[np.ndarray],
                         history: np.ndarray) -> list[np.ndarray]:
    """Plain-array version of propagate_weights for a single (d,) history."""
    weights = [np.ones(1)]
    for level, (slot, fanout) in enumerate(zip(slot_values, tree.fanouts)):
        parents = tree.layer_sizes[level]
        scores = (history @ slot.T).reshape(parents, fanout)
        split = _softmax_lastdim(scores)
        weights.append((split * weights[-1][:, None]).reshape(-1))
    return weights


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def _gumbel_logits(w: np.ndarray, tau: float, noise: np.ndarray) -> np.ndarray:
    return (np.log(w) + noise) / tau


def selection_scores(w: np.ndarray, tau: float, noise: np.ndarray) -> np.ndarray:
    """Training-time ranking scores: log weights at 1/tau strength against
    unit-scale Gumbel noise, so a high temperature explores nearly at random
    and tau -> 0 recovers the plain weight ordering."""
    return np.log(w) / tau + noise


def gumbel_sample(w: np.ndarray, tau: float, seed: int | None = None,
                  noise: np.ndarray | None = None) -> np.ndarray:
    """Relaxed categorical sample softmax((log w + g) / tau) along the last axis."""
    w = np.asarray(w, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if noise is None:
        noise = gumbel_noise(w.shape, np.random.default_rng(seed))
    if tau == 1.0:
        # algebraically identical and exact for zero noise: w * e^g / sum
        e = np.exp(noise - noise.max(axis=-1, keepdims=True))
        y = w * e
        return y / y.sum(axis=-1, keepdims=True)
    return _softmax_lastdim(_gumbel_logits(w, tau, noise))


def rank_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k indices along the last axis, ties broken by index ascending."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def select_topk(tree: MemoryTree, slot_values: list[np.ndarray], history: np.ndarray,
                k: int | None = None, mode: str = "infer", tau: float = 1.0,
                seed: int | None = None, noise: np.ndarray | None = None) -> list[tuple[int, float]]:
    """(leaf index, renormalized weight) pairs for one history vector.

    Train mode ranks by the Gumbel relaxation but keeps the original
    propagated weights for the returned values; infer mode ranks by the
    propagated weights directly.
    """
    k = tree.top_k if k is None else k
    leaf_w = propagate_weights_np(tree, slot_values, history)[-1]
    if mode == "train":
        if noise is None:
            noise = gumbel_noise(leaf_w.shape, np.random.default_rng(seed))
        ranking = selection_scores(leaf_w, tau, noise)
    elif mode == "infer":
        ranking = leaf_w
    else:
        raise ValueError(f"unknown mode {mode!r}")
    idx = rank_topk(ranking, k)
    selected = leaf_w[idx]
    selected = selected / selected.sum()
    return [(int(i), float(w)) for i, w in zip(idx, selected)]


def selected_leaf_weights(tape: Tape, leaf_weights: Ref, indices: np.ndarray) -> Ref:
    """Gather per-row leaf weights at `indices` (B, K) and renormalize on-tape."""
    b, leaves = leaf_weights.shape
    k = indices.shape[1]
    onehot = np.zeros((b, k, leaves))
    onehot[np.arange(b)[:, None], np.arange(k)[None, :], indices] = 1.0
    picked = tape.leaf(onehot).matmul(leaf_weights.reshape((b, leaves, 1))).reshape((b, k))
    # renormalize without a division primitive: w / s = exp(log w - log s)
    log_w = picked.log()
    log_sum = picked.sum(axis=-1, keepdims=True).log()
    return (log_w - log_sum).exp()


def group_representation(tape: Tape, slots_leaf: Ref, leaf_weights: Ref,
                         indices: np.ndarray, dropout_mask: np.ndarray | None = None) -> Ref:
    """Convex combination of the selected leaf slots, (B, d)."""
    b, k = indices.shape
    d = slots_leaf.shape[1]
    weights = selected_leaf_weights(tape, leaf_weights, indices)
    picked = slots_leaf.gather_rows(indices.reshape(-1)).reshape((b, k, d))
    out = weights.reshape((b, 1, k)).matmul(picked).reshape((b, d))
    if dropout_mask is not None:
        out = out.mul(tape.leaf(dropout_mask))
    return out


def make_dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout keep mask, already scaled by 1/(1-rate)."""
    keep = (rng.random(shape) >= rate).astype(np.float64)
    return keep / (1.0 - rate)


def ortho_penalty(tape: Tape, slots: list[Ref], lam: float, seed: int = 0,
                  iters: int = 2, frozen_vectors: list[np.ndarray] | None = None) -> Ref:
    """lambda * sum over slot matrices of the estimated sigma(S^T S - I).

    The power-iteration vector is held constant for the gradient, so the
    penalty differentiates through the Gram residual only. Degenerate or
    vanishing iterates contribute zero. `frozen_vectors` pins the iterate
    per slot matrix (gradient checking).
    """
    total: Ref | None = None
    for si, slot in enumerate(slots):
        d = slot.shape[1]
        gram = slot.matmul(slot, transpose_a=True) - tape.leaf(np.eye(d))
        if frozen_vectors is not None:
            u = frozen_vectors[si]
            sigma = float(np.linalg.norm(gram.value @ u))
        else:
            try:
                sigma, u = power_iteration_pair(gram.value, iters=iters, seed=seed)
            except DegenerateIterateError:
                continue
        if sigma < 1e-150:
            continue
        residual = gram.matmul(tape.leaf(u))                 # (d,), u is unit-norm
        norm_sq = residual.mul(residual).sum()
        term = norm_sq.log().scale(0.5).exp()                # ||gram @ u||
        total = term if total is None else total + term
    if total is None:
        return tape.leaf(0.0)
    return total.scale(lam)
