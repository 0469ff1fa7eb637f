"""Alternating optimisation of transformers, quantities and patterns."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .lie import FlowOverflowError
from .objectives import LossReport, LossWeights, objective_P, objective_T
from .scene import ModelState, validate_sequence

log = logging.getLogger(__name__)

GROUPS = ("A", "b", "delta_lambda", "logits")


class NumericalAbort(FloatingPointError):
    def __init__(self, term: str, detail: str, epoch: int | None = None):
        where = f" at epoch {epoch}" if epoch is not None else ""
        super().__init__(f"numerical abort{where}: {term}: {detail}")
        self.term = term
        self.epoch = epoch


@dataclass
class TrainConfig:
    L: int = 3
    K: int = 3
    epochs_max: int = 20_000
    lr_theta: float = 0.01
    lr_lambda: float = 0.01
    lr_pattern: float = 0.005
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    convergence_tol: float = 1e-6
    checkpoint_every: int = 1000

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.L < 1 or self.K < 1:
            raise ValueError("L and K must be at least 1")
        if self.epochs_max < 1:
            raise ValueError("epochs_max must be at least 1")
        for name in ("lr_theta", "lr_lambda", "lr_pattern"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be at least 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def lr(self, group):
        return {"A": self.lr_theta, "b": self.lr_theta, "delta_lambda": self.lr_lambda, "logits": self.lr_pattern}[
            group
        ]


class Adam:
    """Adaptive-moment updates keyed by parameter group."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, group, param, grad, lr):
        if group not in self.m:
            self.m[group] = np.zeros_like(param)
            self.v[group] = np.zeros_like(param)
            self.t[group] = 0
        self.t[group] += 1
        t = self.t[group]
        self.m[group] = self.beta1 * self.m[group] + (1 - self.beta1) * grad
        self.v[group] = self.beta2 * self.v[group] + (1 - self.beta2) * grad * grad
        m_hat = self.m[group] / (1 - self.beta1**t)
        v_hat = self.v[group] / (1 - self.beta2**t)
        return param - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {g: {"m": self.m[g].tolist(), "v": self.v[g].tolist(), "t": self.t[g]} for g in self.m}

    @classmethod
    def from_state_dict(cls, d):
        opt = cls()
        for g, s in d.items():
            opt.m[g] = np.array(s["m"], dtype=np.float64)
            opt.v[g] = np.array(s["v"], dtype=np.float64)
            opt.t[g] = int(s["t"])
        return opt


def init_state(config: TrainConfig, X, rng: np.random.Generator | None = None) -> ModelState:
    """Random initial state; draw order is logits, A_k and b_k per k, then Δλ."""
    X = validate_sequence(X)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n, h, w = X.shape
    L, K = config.L, config.K
    logits = rng.normal(0.0, 0.01, size=(L, h, w))
    A = np.empty((K, 2, 2))
    b = np.empty((K, 2))
    for k in range(K):
        A[k] = rng.normal(0.0, 0.1, size=(2, 2))
        b[k] = rng.normal(0.0, 0.1, size=2)
    deltas = rng.normal(0.0, 0.1, size=(K, L, n - 1))
    return ModelState(logits, A, b, deltas)


def _checked(report: LossReport, fields, epoch):
    for name in fields:
        if not np.isfinite(getattr(report, name)):
            raise NumericalAbort(name, "loss is not finite", epoch)


def epoch(X, state: ModelState, optimizer: Adam, config: TrainConfig, index: int | None = None):
    """One pass of the alternating scheme; returns (new_state, report).

    The transformer objective is evaluated once and both its gradients are
    extracted before θ then Δλ are updated; the pattern objective is then
    evaluated on the updated transformers and only the logits move.
    """
    lw = config.weights
    new = state.copy()
    try:
        _, report_T, grads_T = objective_T(X, state, lw)
    except FlowOverflowError as exc:
        raise NumericalAbort("recon_T_masked", str(exc), index) from exc
    except ad.NonFiniteError as exc:
        raise NumericalAbort("total_T", str(exc), index) from exc
    _checked(report_T, ("recon_T_masked", "l1", "lambda_scale", "inner_prod", "total_T"), index)
    for group in ("A", "b"):
        setattr(new, group, optimizer.step(group, getattr(state, group), grads_T[group], config.lr(group)))
    new.delta_lambda = optimizer.step("delta_lambda", state.delta_lambda, grads_T["delta_lambda"], config.lr_lambda)

    try:
        _, report_P, grads_P = objective_P(X, new, lw)
    except FlowOverflowError as exc:
        raise NumericalAbort("recon_P", str(exc), index) from exc
    except ad.NonFiniteError as exc:
        raise NumericalAbort("total_P", str(exc), index) from exc
    _checked(report_P, ("recon_P", "entropy", "total_P"), index)
    new.logits = optimizer.step("logits", state.logits, grads_P["logits"], config.lr_pattern)

    for name, value in new.params().items():
        if not np.all(np.isfinite(value)):
            raise NumericalAbort(name, "parameter update is not finite", index)

    report = LossReport(
        recon_P=report_P.recon_P,
        entropy=report_P.entropy,
        recon_T_masked=report_T.recon_T_masked,
        l1=report_T.l1,
        lambda_scale=report_T.lambda_scale,
        inner_prod=report_T.inner_prod,
        total_P=report_P.total_P,
        total_T=report_T.total_T,
    )
    return new, report


def max_change(a: ModelState, b: ModelState) -> float:
    return max(float(np.max(np.abs(a.params()[k] - b.params()[k]))) for k in a.params())


# -- checkpoints ---------------------------------------------------------------


def state_to_checkpoint(state: ModelState, config: TrainConfig, optimizer: Adam | None = None, epochs: int = 0):
    L, H, W = state.logits.shape
    return {
        "dims": {"L": L, "K": state.K, "N": state.N, "H": H, "W": W},
        "logits": state.logits.tolist(),
        "transformers": [{"A": a.tolist(), "b": b.tolist()} for a, b in zip(state.A, state.b)],
        "delta_lambda": state.delta_lambda.tolist(),
        "config_hash": config.hash(),
        "rng_seed": config.seed,
        "config": config.to_dict(),
        "epochs": epochs,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }


def checkpoint_to_state(doc):
    """(state, config or None, optimizer or None, epochs)."""
    state = ModelState(
        doc["logits"],
        [t["A"] for t in doc["transformers"]],
        [t["b"] for t in doc["transformers"]],
        doc["delta_lambda"],
    )
    dims = doc["dims"]
    if (state.L, state.K, state.N, state.frame.H, state.frame.W) != (dims["L"], dims["K"], dims["N"], dims["H"], dims["W"]):
        raise ValueError("checkpoint arrays disagree with its dims")
    config = TrainConfig.from_dict(doc["config"]) if doc.get("config") else None
    opt = Adam.from_state_dict(doc["optimizer"]) if doc.get("optimizer") else None
    return state, config, opt, int(doc.get("epochs", 0))


def save_checkpoint(path, state, config, optimizer=None, epochs=0):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    # json writes floats with repr, which round-trips doubles exactly
    tmp.write_text(json.dumps(state_to_checkpoint(state, config, optimizer, epochs)))
    tmp.replace(path)


def load_checkpoint(path):
    return checkpoint_to_state(json.loads(Path(path).read_text()))


# -- fit -----------------------------------------------------------------------


@dataclass
class TrainHistory:
    reports: list[LossReport] = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = False

    @property
    def epochs(self):
        return len(self.reports)


def fit(
    X,
    config: TrainConfig,
    run_dir=None,
    state: ModelState | None = None,
    optimizer: Adam | None = None,
    start_epoch: int = 0,
):
    """Train until the largest parameter change drops below tolerance.

    With ``run_dir`` set, writes config.json, checkpoints/epoch_%06d.json every
    ``checkpoint_every`` epochs and at exit, metrics.json, and final.json.
    On a numerical abort the last finite state is checkpointed before the
    error propagates. ``start_epoch`` resumes the epoch count of a loaded
    checkpoint. Returns (state, history).
    """
    X = validate_sequence(X)
    if state is None:
        state = init_state(config, X)
    state.check_against(X)
    optimizer = Adam() if optimizer is None else optimizer
    history = TrainHistory()
    ckpt_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        _write_json(run_dir / "config.json", config.to_dict(), indent=2)

    start = time.perf_counter()
    done = start_epoch
    try:
        for e in range(start_epoch, config.epochs_max):
            new, report = epoch(X, state, optimizer, config, e)
            history.reports.append(report)
            delta = max_change(state, new)
            state = new
            done = e + 1
            if ckpt_dir is not None and done % config.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"epoch_{done:06d}.json", state, config, optimizer, done)
            if done % 1000 == 0:
                log.info("epoch %d total_T=%.6g total_P=%.6g", done, report.total_T, report.total_P)
            if delta < config.convergence_tol:
                history.converged = True
                break
    except NumericalAbort:
        if ckpt_dir is not None:
            # optimizer moments may already hold the bad step; keep only the state
            save_checkpoint(ckpt_dir / f"epoch_{done:06d}.json", state, config, None, done)
        raise
    finally:
        history.wall_time = time.perf_counter() - start
        if run_dir is not None:
            _write_metrics(run_dir, history, start_epoch)
    if ckpt_dir is not None:
        if done % config.checkpoint_every != 0:
            save_checkpoint(ckpt_dir / f"epoch_{done:06d}.json", state, config, optimizer, done)
        save_checkpoint(run_dir / "final.json", state, config, None, done)
    return state, history


def _write_json(path, doc, indent=None):
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=indent))
    tmp.replace(path)


def _write_metrics(run_dir, history, first_epoch=0):
    rows = [dict(epoch=first_epoch + i, **r.as_dict()) for i, r in enumerate(history.reports)]
    _write_json(Path(run_dir) / "metrics.json", rows)
