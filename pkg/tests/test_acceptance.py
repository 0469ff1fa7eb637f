"""End-to-end acceptance checks, one recorded pass/fail line per criterion.

The long-running recovery experiments (criteria 6 to 8) train the full
15×15 model for up to 20,000 epochs per seed and take several minutes each
on one core.
"""

import time

import numpy as np
import pytest

from lieshape import autodiff as ad
from lieshape.analysis import evaluate
from lieshape.data import generate_sequence, parallel_spec, two_object_spec
from lieshape.lie import AffineMap, FlowParams, compose, integrate_flow, invert, rk4_batch, warp
from lieshape.objectives import LossWeights, build_losses
from lieshape.scene import ModelState, pattern_primitives, pattern_weights
from lieshape.training import Adam, TrainConfig, epoch, fit, init_state

SEEDS = (0, 1, 2)
EPOCH_BUDGET = 20_000
WALL_BUDGET = 30 * 60


def max_entry(m1: AffineMap, m2: AffineMap):
    return max(np.max(np.abs(m1.M - m2.M)), np.max(np.abs(m1.t - m2.t)))


def random_cases(n, seed):
    rng = np.random.default_rng(seed)
    return [
        (FlowParams(rng.uniform(-1, 1, (2, 2)), rng.uniform(-1, 1, 2)), rng.uniform(-1, 1), rng.uniform(-1, 1))
        for _ in range(n)
    ]


def test_group_axioms(acceptance):
    cases = random_cases(100, 11)
    start = time.perf_counter()
    add = ident = inv = 0.0
    for theta, lam, mu in cases:
        add = max(add, max_entry(compose(integrate_flow(theta, lam), integrate_flow(theta, mu)), integrate_flow(theta, lam + mu)))
        ident = max(ident, max_entry(integrate_flow(theta, 0.0), AffineMap.identity()))
        m = integrate_flow(theta, lam)
        inv = max(inv, max_entry(compose(m, integrate_flow(theta, -lam)), AffineMap.identity()))
        inv = max(inv, max_entry(invert(m), integrate_flow(theta, -lam)))
    elapsed = time.perf_counter() - start
    ok = max(add, ident, inv) < 1e-9 and elapsed < 1.0
    acceptance(
        1, "group axioms", ok,
        f"additivity {add:.1e}, identity {ident:.1e}, inverse {inv:.1e} (tol 1e-9), {elapsed:.2f} s (< 1 s)",
    )


def test_exponential_matches_rk4(acceptance):
    cases = random_cases(100, 12)
    start = time.perf_counter()
    M, t = rk4_batch([c[0].A for c in cases], [c[0].b for c in cases], [c[1] for c in cases], steps=10_000)
    worst = max(max_entry(integrate_flow(theta, lam), AffineMap(m, v)) for (theta, lam, _), m, v in zip(cases, M, t))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 5.0
    acceptance(2, "exponential vs RK4", ok, f"max entry error {worst:.1e} (tol 1e-8), {elapsed:.2f} s (< 5 s)")


def small_instance(seed=21):
    rng = np.random.default_rng(seed)
    X = np.zeros((3, 7, 7))
    for i in range(3):
        X[i, 1:4, 1 + i : 4 + i] = rng.uniform(0.3, 1.0, (3, 3))
    state = ModelState(
        rng.normal(size=(2, 7, 7)),
        rng.uniform(-0.5, 0.5, (2, 2, 2)),
        rng.uniform(-0.5, 0.5, (2, 2)),
        rng.uniform(-0.5, 0.5, (2, 2, 2)),
    )
    return X, state


def test_gradients(acceptance):
    X, state = small_instance()
    fixed = state.params()
    weights = LossWeights()
    start = time.perf_counter()
    errors = {}
    for total, trainable in (("total_P", ("logits",)), ("total_T", ("A", "b", "delta_lambda"))):

        def f(tape, leaves, total=total):
            nodes = {k: leaves[k] if k in leaves else tape.constant(v) for k, v in fixed.items()}
            return getattr(build_losses(tape, X, nodes, weights), total)

        report = ad.grad_check(f, {k: fixed[k] for k in trainable}, h=1e-5)
        errors[total] = report.max_rel_error if not report.nonfinite else np.inf
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) < 1e-4 and elapsed < 30.0
    acceptance(
        3, "gradient check", ok,
        f"objective_P {errors['total_P']:.1e}, objective_T {errors['total_T']:.1e} (tol 1e-4), {elapsed:.1f} s (< 30 s)",
    )


def test_warp_oracles(acceptance):
    rng = np.random.default_rng(13)
    img = rng.uniform(size=(15, 15))
    identity_ok = warp(img, AffineMap.identity()).tobytes() == img.tobytes()
    shift_ok = True
    for dr, dc in ((1, 0), (0, -3), (2, 1), (-1, -1)):
        expected = np.zeros_like(img)
        src = img[max(0, -dr) : 15 - max(0, dr), max(0, -dc) : 15 - max(0, dc)]
        expected[max(0, dr) : 15 - max(0, -dr), max(0, dc) : 15 - max(0, -dc)] = src
        out = warp(img, AffineMap.translation([dc / 7, dr / 7]))
        shift_ok &= bool(np.array_equal(out, expected))
    point = np.zeros((15, 15))
    point[7, 7] = 1.0
    expected = np.zeros_like(point)
    expected[7, 7] = expected[8, 7] = 0.5
    split = float(np.max(np.abs(warp(point, AffineMap.translation([0.0, 0.5 / 7])) - expected)))
    ok = identity_ok and shift_ok and split < 1e-12
    acceptance(
        4, "warp oracles", ok,
        f"identity bitwise {identity_ok}, integer shifts exact {shift_ok}, half-pixel split error {split:.1e} (tol 1e-12)",
    )


def test_partition_invariant(acceptance):
    X = generate_sequence(two_object_spec()).frames
    config = TrainConfig(seed=0)
    state = init_state(config, X)
    opt = Adam()
    worst = 0.0
    for e in range(50):
        state, _ = epoch(X, state, opt, config, e)
        parts = pattern_primitives(X[0], pattern_weights(state.logits))
        worst = max(worst, float(np.max(np.abs(parts.sum(axis=0) - X[0]))))
    acceptance(5, "partition invariant", worst < 1e-9, f"max |Σ P_l − X_0| over 50 epochs {worst:.1e} (tol 1e-9)")


# -- recovery experiments ------------------------------------------------------


def reference_config(seed):
    return TrainConfig(
        L=3, K=3, seed=seed, epochs_max=EPOCH_BUDGET,
        weights=LossWeights(alpha=0.001, beta=0.0001, gamma=0.1, delta=0.0001),
    )


def train(spec, seed, run_dir):
    dataset = generate_sequence(spec)
    config = reference_config(seed)
    state, history = fit(dataset.frames, config, run_dir=run_dir)
    return evaluate(state, dataset, config.weights), history


def recovery_checks(report):
    """Booleans for (a) reconstruction, (b) patterns, (d) displacement, plus a summary."""
    mse = max(report.masked_frame_mse)
    ious = [v["iou"] for v in report.pattern_iou.values()]
    disp = report.displacement_error_px
    a = mse < 1e-2
    b = report.active_pattern_count == 2 and len(ious) == 2 and min(ious) > 0.8
    d = len(disp) == 2 and max(disp.values()) < 0.5
    summary = (
        f"mse {mse:.1e}, patterns {report.active_pattern_count} iou {[round(x, 2) for x in ious]}, "
        f"classes {report.transformer_classes}, disp {[round(v, 2) for v in disp.values()]} px"
    )
    return a, b, d, summary


@pytest.fixture(scope="module")
def two_object_runs(tmp_path_factory):
    runs = {}
    for seed in SEEDS:
        run_dir = tmp_path_factory.mktemp(f"two_object_{seed}")
        report, history = train(two_object_spec(), seed, run_dir)
        runs[seed] = (report, history, run_dir)
    return runs


@pytest.fixture(scope="module")
def parallel_runs(tmp_path_factory):
    runs = {}
    for seed in SEEDS:
        runs[seed] = train(parallel_spec(), seed, tmp_path_factory.mktemp(f"parallel_{seed}"))
    return runs


def test_two_object_recovery(two_object_runs, acceptance):
    lines = []
    passed = []
    for seed, (report, history, _) in two_object_runs.items():
        a, b, d, summary = recovery_checks(report)
        n_identity = report.transformer_classes.count("identity")
        scores = list(report.independence.values())
        c = n_identity >= 1 and len(scores) == 1 and scores[0] > 0.8
        budget = history.epochs <= EPOCH_BUDGET and history.wall_time <= WALL_BUDGET
        ok = a and b and c and d and budget
        if ok:
            passed.append(seed)
        lines.append(
            f"seed {seed}: a={a} b={b} c={c} d={d} ({summary}, independence {[round(s, 2) for s in scores]}, "
            f"{history.epochs} epochs, {history.wall_time:.0f} s)"
        )
    acceptance(6, "two-object recovery", bool(passed), f"passing seeds {passed}; " + "; ".join(lines))


def test_parallel_control(parallel_runs, acceptance):
    lines = []
    passed = []
    for seed, (report, history) in parallel_runs.items():
        a, b, _, summary = recovery_checks(report)
        single = report.transformer_classes.count("active") == 1
        ok = single and a and b and history.epochs <= EPOCH_BUDGET
        if ok:
            passed.append(seed)
        lines.append(f"seed {seed}: one-transformer={single} a={a} b={b} ({summary}, {history.epochs} epochs)")
    acceptance(7, "parallel-motion control", bool(passed), f"passing seeds {passed}; " + "; ".join(lines))


def test_determinism(two_object_runs, tmp_path, acceptance):
    seed = SEEDS[0]
    _, _, first_dir = two_object_runs[seed]
    train(two_object_spec(), seed, tmp_path)
    same = (first_dir / "final.json").read_bytes() == (tmp_path / "final.json").read_bytes()
    acceptance(8, "determinism", same, f"seed {seed} final.json bitwise identical across two runs: {same}")
