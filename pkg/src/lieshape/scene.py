"""Learnable scene state and the superimposed reconstruction.

Y_i = Σ_l (T_1(λ_1li) ∘ T_2(λ_2li) ∘ … ∘ T_K(λ_Kli)) P_l, with P_l = X_0 ⊙ W_l
and W = softmax over the pattern axis, so Σ_l P_l = X_0 holds structurally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .lie import (
    AffineMap,
    CoordinateFrame,
    FlowParams,
    augmented_node,
    compose,
    flow_matrices,
    guard_flows,
    integrate_flow,
    warp_node,
)


def validate_sequence(frames) -> np.ndarray:
    X = np.asarray(frames, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"sequence must be (frames, H, W), got shape {X.shape}")
    if X.shape[0] < 2:
        raise ValueError("sequence needs at least 2 frames")
    if not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("frame intensities must lie in [0, 1]")
    CoordinateFrame(X.shape[1], X.shape[2])
    return X


@dataclass
class ModelState:
    logits: np.ndarray  # (L, H, W)
    A: np.ndarray  # (K, 2, 2)
    b: np.ndarray  # (K, 2)
    delta_lambda: np.ndarray  # (K, L, N)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.delta_lambda = np.asarray(self.delta_lambda, dtype=np.float64)
        L, H, W = self.logits.shape
        K = self.A.shape[0]
        if K < 1 or L < 1:
            raise ValueError("need at least one pattern and one transformer")
        if self.A.shape != (K, 2, 2) or self.b.shape != (K, 2):
            raise ValueError(f"transformer shapes A{self.A.shape} b{self.b.shape} inconsistent")
        if self.delta_lambda.shape[:2] != (K, L) or self.delta_lambda.ndim != 3:
            raise ValueError(f"delta_lambda shape {self.delta_lambda.shape} != ({K}, {L}, N)")

    @property
    def L(self):
        return self.logits.shape[0]

    @property
    def K(self):
        return self.A.shape[0]

    @property
    def N(self):
        return self.delta_lambda.shape[2]

    @property
    def frame(self):
        return CoordinateFrame(*self.logits.shape[1:])

    @property
    def flows(self):
        return [FlowParams(a, b) for a, b in zip(self.A, self.b)]

    def params(self):
        return {"logits": self.logits, "A": self.A, "b": self.b, "delta_lambda": self.delta_lambda}

    def copy(self):
        return ModelState(self.logits.copy(), self.A.copy(), self.b.copy(), self.delta_lambda.copy())

    def check_against(self, X):
        if X.shape != (self.N + 1,) + self.logits.shape[1:]:
            raise ValueError(
                f"sequence shape {X.shape} does not match model ({self.N + 1}, {self.frame.H}, {self.frame.W})"
            )


def pattern_weights(logits) -> np.ndarray:
    tape = ad.Tape()
    return ad.softmax(tape.constant(logits), axis=0).value


def pattern_primitives(X0, weights) -> np.ndarray:
    X0 = np.asarray(X0, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[1:] != X0.shape:
        raise ValueError(f"weights {weights.shape} do not match image {X0.shape}")
    return X0[None] * weights


def cumulative_lambda(deltas) -> np.ndarray:
    """(K, L, N) increments to (K, L, N+1) quantities with λ_·,·,0 = 0."""
    deltas = np.asarray(deltas, dtype=np.float64)
    zeros = np.zeros(deltas.shape[:-1] + (1,))
    return np.concatenate([zeros, np.cumsum(deltas, axis=-1)], axis=-1)


@dataclass
class Forward:
    weights: ad.Node  # (L, H, W)
    patterns: ad.Node  # (L, H, W)
    lam: ad.Node  # (K, L, N+1)
    per_pattern: ad.Node  # (L, N+1, H, W)
    Y: ad.Node  # (N+1, H, W)


def build_forward(tape: ad.Tape, X0, logits, A, b, delta_lambda) -> Forward:
    """Differentiable reconstruction of all N+1 frames.

    Each argument may be a leaf (trainable in this pass) or a constant node.
    """
    X0 = np.asarray(X0, dtype=np.float64)
    frame = CoordinateFrame(*X0.shape)
    weights = ad.softmax(logits, axis=0)
    patterns = ad.mul(weights, X0)

    K, L, N = delta_lambda.shape
    lam = ad.concat([np.zeros((K, L, 1)), ad.cumsum(delta_lambda, axis=2)], axis=2)
    guard_flows(A, b, lam)

    aug = augmented_node(A, b)
    # inverse flows exp(-λ aug_k), shape (K, L, N+1, 3, 3)
    inv = flow_matrices(aug, ad.mul(lam, -1.0))
    # forward map T_1∘…∘T_K has inverse T_K⁻¹∘…∘T_1⁻¹ = G_K @ … @ G_1
    sample = inv[0]
    for k in range(1, K):
        sample = ad.matmul(inv[k], sample)
    per_pattern = warp_node(patterns, sample, frame, preserve_mass=True)
    Y = ad.sum(per_pattern, axis=0)
    return Forward(weights, patterns, lam, per_pattern, Y)


def reconstruct(state: ModelState, X0) -> np.ndarray:
    """Reconstructed sequence (N+1, H, W) for the current state."""
    tape = ad.Tape()
    fwd = build_forward(
        tape,
        X0,
        tape.constant(state.logits),
        tape.constant(state.A),
        tape.constant(state.b),
        tape.constant(state.delta_lambda),
    )
    return fwd.Y.value


def per_pattern_sequences(state: ModelState, X0) -> np.ndarray:
    """Each pattern's transformed sequence, (L, N+1, H, W)."""
    tape = ad.Tape()
    fwd = build_forward(
        tape,
        X0,
        tape.constant(state.logits),
        tape.constant(state.A),
        tape.constant(state.b),
        tape.constant(state.delta_lambda),
    )
    return fwd.per_pattern.value


def composite_maps(state: ModelState):
    """Forward composite AffineMap per (l, i), as an (L, N+1) nested list."""
    lam = cumulative_lambda(state.delta_lambda)
    flows = state.flows
    out = []
    for l in range(state.L):
        row = []
        for i in range(state.N + 1):
            m = AffineMap.identity()
            for k in reversed(range(state.K)):
                m = compose(integrate_flow(flows[k], lam[k, l, i]), m)
            row.append(m)
        out.append(row)
    return out
