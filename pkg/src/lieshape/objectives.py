"""Loss terms and the two alternating objectives.

The pattern objective is the discounted reconstruction error plus α times
the pattern-area entropy. The transformer objective is the discounted
masked reconstruction error plus β·L1 + γ·λ-scale + δ·inner-product.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .scene import ModelState, build_forward

LAMBDA_INERT = 1e-6


@dataclass(frozen=True)
class LossWeights:
    r: float = 0.9
    alpha: float = 0.001
    beta: float = 0.0001
    gamma: float = 0.1
    delta: float = 0.0001

    def __post_init__(self):
        if not 0.0 < self.r <= 1.0:
            raise ValueError(f"discount r must be in (0, 1], got {self.r}")
        for name in ("alpha", "beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossReport:
    recon_P: float
    entropy: float
    recon_T_masked: float
    l1: float
    lambda_scale: float
    inner_prod: float
    total_P: float
    total_T: float

    def as_dict(self):
        return asdict(self)


def _discount(r, n_frames):
    return (r ** np.arange(n_frames, dtype=np.float64))[:, None, None]


def _check_lengths(X, Y):
    if X.shape != Y.shape:
        raise ValueError(f"sequence shapes differ: X{X.shape} vs Y{Y.shape}")


def recon_loss_patterns(X, Y: ad.Node, r: float) -> ad.Node:
    """Σ_{i≥1} r^i ‖X_i − Y_i‖²; frame 0 is excluded."""
    X = np.asarray(X, dtype=np.float64)
    _check_lengths(X, Y)
    diff = ad.sub(Y[1:], X[1:])
    return ad.sum(ad.mul(ad.square(diff), _discount(r, len(X))[1:]))


def masked_recon_loss(X, Y: ad.Node, r: float) -> ad.Node:
    """Σ_{i≥1} r^i ‖X_i − Y_i ⊙ X_i‖²."""
    X = np.asarray(X, dtype=np.float64)
    _check_lengths(X, Y)
    diff = ad.sub(X[1:], ad.mul(Y[1:], X[1:]))
    return ad.sum(ad.mul(ad.square(diff), _discount(r, len(X))[1:]))


def pattern_areas(weights, X0) -> np.ndarray:
    """Share Q_l of the X0 support assigned to each pattern."""
    support = np.asarray(X0) > 0
    count = int(support.sum())
    if count == 0:
        raise ValueError("X0 has empty support")
    return (np.asarray(weights) * support).sum(axis=(1, 2)) / count


def pattern_entropy(weights: ad.Node, X0) -> ad.Node:
    support = (np.asarray(X0) > 0).astype(np.float64)
    count = support.sum()
    if count == 0:
        raise ValueError("X0 has empty support")
    Q = ad.mul(ad.sum(ad.mul(weights, support), axis=(1, 2)), 1.0 / count)
    return ad.mul(ad.sum(ad.mul(Q, ad.log(Q))), -1.0)


def l1_reg(A: ad.Node, b: ad.Node) -> ad.Node:
    return ad.add(ad.sum(ad.absolute(A)), ad.sum(ad.absolute(b)))


def lambda_scale_loss(lam: ad.Node) -> ad.Node:
    """Σ |λ − sg(λ/s_k)| with s_k = max_l |λ_k,l,N| over non-inert k.

    ``lam`` is (K, L, N+1). The normalized target is held constant.
    """
    scale = np.abs(lam.value[:, :, -1]).max(axis=1)
    active = scale >= LAMBDA_INERT
    inv_scale = np.where(active, 1.0 / np.where(active, scale, 1.0), 1.0)
    target = ad.stop_gradient(ad.mul(lam, inv_scale[:, None, None]))
    per_entry = ad.absolute(ad.sub(lam, target))
    return ad.sum(ad.mul(per_entry, active[:, None, None].astype(np.float64)))


def inner_product_loss(A: ad.Node, b: ad.Node) -> ad.Node:
    """Σ_{i<j} ⟨vec A_i, vec A_j⟩² + ⟨b_i, b_j⟩².

    Squared so the minimum is zero; raw inner products are unbounded below.
    """
    K = A.shape[0]
    vecA = ad.reshape(A, (K, 4))
    gram = ad.add(
        ad.square(ad.matmul(vecA, ad.transpose(vecA))),
        ad.square(ad.matmul(b, ad.transpose(b))),
    )
    return ad.sum(ad.mul(gram, np.triu(np.ones((K, K)), k=1)))


@dataclass
class LossTerms:
    recon_P: ad.Node
    entropy: ad.Node
    recon_T_masked: ad.Node
    l1: ad.Node
    lambda_scale: ad.Node
    inner_prod: ad.Node
    total_P: ad.Node
    total_T: ad.Node

    def report(self) -> LossReport:
        return LossReport(**{name: float(getattr(self, name).value) for name in LossReport.__dataclass_fields__})


def build_losses(tape: ad.Tape, X, nodes: dict, weights: LossWeights) -> LossTerms:
    """All loss terms over one forward pass.

    ``nodes`` maps logits, A, b, delta_lambda to tape nodes; whichever are
    leaves receive gradients.
    """
    X = np.asarray(X, dtype=np.float64)
    fwd = build_forward(tape, X[0], nodes["logits"], nodes["A"], nodes["b"], nodes["delta_lambda"])
    recon_P = recon_loss_patterns(X, fwd.Y, weights.r)
    entropy = pattern_entropy(fwd.weights, X[0])
    recon_T = masked_recon_loss(X, fwd.Y, weights.r)
    l1 = l1_reg(nodes["A"], nodes["b"])
    scale = lambda_scale_loss(fwd.lam)
    inner = inner_product_loss(nodes["A"], nodes["b"])
    total_P = ad.add(recon_P, ad.mul(entropy, weights.alpha))
    total_T = ad.add(
        ad.add(recon_T, ad.mul(l1, weights.beta)),
        ad.add(ad.mul(scale, weights.gamma), ad.mul(inner, weights.delta)),
    )
    return LossTerms(recon_P, entropy, recon_T, l1, scale, inner, total_P, total_T)


PATTERN_PARAMS = ("logits",)
TRANSFORM_PARAMS = ("A", "b", "delta_lambda")


def _evaluate(X, state: ModelState, weights: LossWeights, trainable, total: str):
    tape = ad.Tape()
    nodes = {
        name: (tape.leaf(value, name=name) if name in trainable else tape.constant(value, name=name))
        for name, value in state.params().items()
    }
    terms = build_losses(tape, X, nodes, weights)
    root = getattr(terms, total)
    grads = tape.backward(root)
    return float(root.value), terms.report(), {name: grads[nodes[name].id] for name in trainable}


def objective_P(X, state: ModelState, weights: LossWeights):
    """(total_P, report, grads w.r.t. pattern logits only)."""
    return _evaluate(X, state, weights, PATTERN_PARAMS, "total_P")


def objective_T(X, state: ModelState, weights: LossWeights):
    """(total_T, report, grads w.r.t. A, b and delta_lambda only)."""
    return _evaluate(X, state, weights, TRANSFORM_PARAMS, "total_T")
