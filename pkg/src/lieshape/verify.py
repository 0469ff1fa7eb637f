"""Self-check suite run by ``lieshape verify``.

Each property is a small numerical experiment with a known answer. Every
selected property runs; callers report the first failure by name.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .lie import AffineMap, FlowParams, compose, integrate_flow, invert, rk4_batch, warp
from .objectives import LossWeights, build_losses
from .scene import ModelState

AXIOM_TOL = 1e-9
RK4_TOL = 1e-8
GRAD_TOL = 1e-4


@dataclass
class PropertyResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _random_flows(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield (
            FlowParams(rng.uniform(-1, 1, (2, 2)), rng.uniform(-1, 1, 2)),
            rng.uniform(-1, 1),
            rng.uniform(-1, 1),
        )


def _map_error(m1: AffineMap, m2: AffineMap) -> float:
    return float(max(np.max(np.abs(m1.M - m2.M)), np.max(np.abs(m1.t - m2.t))))


def group_additivity(n=100, seed=0):
    worst = max(
        _map_error(compose(integrate_flow(th, lam), integrate_flow(th, mu)), integrate_flow(th, lam + mu))
        for th, lam, mu in _random_flows(n, seed)
    )
    return worst < AXIOM_TOL, f"max |T(λ)∘T(μ) − T(λ+μ)| = {worst:.2e}"


def group_identity(n=100, seed=1):
    worst = max(_map_error(integrate_flow(th, 0.0), AffineMap.identity()) for th, _, _ in _random_flows(n, seed))
    return worst < AXIOM_TOL, f"max |T(0) − id| = {worst:.2e}"


def group_inverse(n=100, seed=2):
    worst = 0.0
    for th, lam, _ in _random_flows(n, seed):
        m = integrate_flow(th, lam)
        worst = max(worst, _map_error(compose(m, integrate_flow(th, -lam)), AffineMap.identity()))
        worst = max(worst, _map_error(invert(m), integrate_flow(th, -lam)))
    return worst < AXIOM_TOL, f"max |T(λ)∘T(−λ) − id| = {worst:.2e}"


def exp_vs_rk4(n=100, seed=3, steps=10_000):
    cases = list(_random_flows(n, seed))
    M, t = rk4_batch([c[0].A for c in cases], [c[0].b for c in cases], [c[1] for c in cases], steps)
    worst = max(_map_error(integrate_flow(th, lam), AffineMap(m, v)) for (th, lam, _), m, v in zip(cases, M, t))
    return worst < RK4_TOL, f"max |expm − RK4| = {worst:.2e}"


def _tiny_problem(seed=0, L=2, K=2, N=2, size=7):
    rng = np.random.default_rng(seed)
    X = np.zeros((N + 1, size, size))
    for i in range(N + 1):
        X[i, 2:5, 1 + i : 4 + i] = rng.uniform(0.5, 1.0, (3, 3))
    state = ModelState(
        rng.normal(size=(L, size, size)),
        rng.normal(0, 0.3, (K, 2, 2)),
        rng.normal(0, 0.3, (K, 2)),
        rng.normal(0, 0.3, (K, L, N)),
    )
    return X, state


def _objective_gradient(total, trainable):
    X, state = _tiny_problem()
    weights = LossWeights()
    fixed = state.params()

    def f(tape, leaves):
        nodes = {k: leaves[k] if k in leaves else tape.constant(v) for k, v in fixed.items()}
        return getattr(build_losses(tape, X, nodes, weights), total)

    report = ad.grad_check(f, {k: fixed[k] for k in trainable}, h=1e-5)
    return report.max_rel_error < GRAD_TOL and not report.nonfinite, f"max relative error {report.max_rel_error:.2e}"


def gradient_pattern():
    return _objective_gradient("total_P", ("logits",))


def gradient_transform():
    return _objective_gradient("total_T", ("A", "b", "delta_lambda"))


def warp_identity():
    img = np.random.default_rng(4).uniform(size=(15, 15))
    return warp(img, AffineMap.identity()).tobytes() == img.tobytes(), "identity warp bitwise"


def warp_integer_shift():
    img = np.random.default_rng(5).uniform(size=(15, 15))
    out = warp(img, AffineMap.translation([2 / 7, -1 / 7]))
    expected = np.zeros_like(img)
    expected[:-1, 2:] = img[1:, :-2]
    return bool(np.array_equal(out, expected)), "shift by (+2, −1) pixels equals array shift"


def warp_half_pixel():
    img = np.zeros((15, 15))
    img[7, 7] = 1.0
    out = warp(img, AffineMap.translation([1 / 14, 0.0]))
    expected = np.zeros_like(img)
    expected[7, 7] = expected[7, 8] = 0.5
    err = float(np.max(np.abs(out - expected)))
    return err < 1e-12, f"half-pixel split error {err:.1e}"


PROPERTIES: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("group-law additivity", group_additivity),
    ("group-law identity", group_identity),
    ("group-law inverse", group_inverse),
    ("exp-vs-rk4 oracle", exp_vs_rk4),
    ("gradient pattern objective", gradient_pattern),
    ("gradient transformer objective", gradient_transform),
    ("warp identity", warp_identity),
    ("warp integer shift", warp_integer_shift),
    ("warp half-pixel split", warp_half_pixel),
]


def select(name_filter: str | None = None):
    if not name_filter:
        return list(PROPERTIES)
    return [(n, f) for n, f in PROPERTIES if name_filter in n]


def run(name_filter: str | None = None, echo=print) -> list[PropertyResult]:
    results = []
    for name, fn in select(name_filter):
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash counts as a failure of that property
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = PropertyResult(name, bool(ok), detail, time.perf_counter() - start)
        if echo is not None:
            echo(f"{'PASS' if res.ok else 'FAIL'}  {name}: {detail} ({res.seconds:.2f}s)")
        results.append(res)
    return results
