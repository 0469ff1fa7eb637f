"""Batched matrix exponential by scaling-and-squaring, plus its adjoint."""

import numpy as np

TAYLOR_ORDER = 18
SCALING_THRESHOLD = 0.5


def _squarings(mats):
    norms = np.abs(mats).sum(axis=-2).max(axis=-1)
    s = np.zeros(norms.shape, dtype=np.int64)
    big = norms > SCALING_THRESHOLD
    if np.any(big):
        s[big] = np.ceil(np.log2(norms[big] / SCALING_THRESHOLD)).astype(np.int64)
    return s


def expm(mats):
    """exp(X) for every trailing square matrix of ``mats``.

    Each matrix is scaled by 2**-s so its 1-norm is at most 0.5, summed with a
    degree-18 Taylor polynomial (Horner form), then squared s times. The zero
    matrix maps to the identity exactly.
    """
    mats = np.asarray(mats, dtype=np.float64)
    n = mats.shape[-1]
    if mats.shape[-2] != n:
        raise ValueError(f"expm needs square matrices, got shape {mats.shape}")
    s = _squarings(mats)
    scaled = mats / np.ldexp(1.0, s)[..., None, None]
    eye = np.eye(n)
    result = np.broadcast_to(eye, mats.shape).copy()
    for j in range(TAYLOR_ORDER, 0, -1):
        result = eye + (scaled @ result) / j
    for step in range(int(s.max(initial=0))):
        squared = result @ result
        result = np.where((s > step)[..., None, None], squared, result)
    return result


def expm_adjoint(mats, upstream):
    """Vector-Jacobian product of :func:`expm`.

    For ``Y = exp(X)`` and upstream gradient ``G`` the gradient with respect
    to ``X`` is the Frechet derivative ``L(X^T, G)``, read off the upper-right
    block of ``exp([[X^T, G], [0, X^T]])``.
    """
    mats = np.asarray(mats, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    n = mats.shape[-1]
    xt = np.swapaxes(mats, -1, -2)
    block = np.zeros(mats.shape[:-2] + (2 * n, 2 * n))
    block[..., :n, :n] = xt
    block[..., :n, n:] = upstream
    block[..., n:, n:] = xt
    return expm(block)[..., :n, n:]
