"""Command-line entry point: gen, train, eval, render and verify.

Exit codes: 0 success, 1 verification failure, 2 input error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, verify
from .analysis import evaluate, render_sequence, write_field_export, write_pgm
from .data import Dataset, SceneSpec, SceneSpecError, generate_sequence
from .scene import pattern_primitives, pattern_weights, per_pattern_sequences, reconstruct, validate_sequence
from .training import NumericalAbort, TrainConfig, fit, load_checkpoint

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("lieshape")


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _atomic_json(path: Path, doc):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2))
    tmp.replace(path)


def worker_cap():
    """Worker limit from TOOL_THREADS; every command here runs on one thread."""
    raw = os.environ.get("TOOL_THREADS")
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise InputError(f"TOOL_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise InputError(f"TOOL_THREADS must be a positive integer, got {raw!r}")
    return value


class RunManifest:
    """manifest.json in the output directory, rewritten atomically."""

    def __init__(self, out: Path, command: str, argv, config=None, seed=None):
        self.path = out / "manifest.json"
        self.out = out
        self.doc = {
            "command": command,
            "argv": list(argv),
            "config": config,
            "seed": seed,
            "artifacts": [],
            "tool_version": __version__,
            "workers": worker_cap(),
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        self.write()

    def write(self):
        _atomic_json(self.path, self.doc)

    def finish(self, status, artifacts=(), **extra):
        names = sorted(str(Path(a).relative_to(self.out)) for a in artifacts if Path(a).exists())
        self.doc.update(artifacts=names, status=status, finished=_now(), **extra)
        self.write()


def _out_dir(path) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise InputError(f"output path {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_json(path, what):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such {what}: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {p} is not valid JSON: {exc}") from exc


def _load_dataset(path) -> Dataset:
    doc = _read_json(path, "dataset")
    try:
        ds = Dataset.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed dataset {path}: {exc}") from exc
    return ds


# -- commands ----------------------------------------------------------------


def cmd_gen(args):
    doc = _read_json(args.spec, "spec")
    try:
        spec = SceneSpec.from_dict(doc)
        ds = generate_sequence(spec)
    except SceneSpecError as exc:
        raise InputError(str(exc)) from exc
    out = _out_dir(args.out)
    manifest = RunManifest(out, "gen", sys.argv, config=spec.to_dict(), seed=args.seed)
    ds.save(out / "dataset.json")
    write_pgm(out / "preview.pgm", render_sequence(ds.frames))
    manifest.finish("ok", [out / "dataset.json", out / "preview.pgm"])
    print(f"wrote {out / 'dataset.json'} ({ds.frames.shape[0]} frames)")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    doc = _read_json(args.config, "config") if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        return TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid config: {exc}") from exc


def cmd_train(args):
    ds = _load_dataset(args.data)
    state = optimizer = None
    start = 0
    if args.resume:
        if not Path(args.resume).is_file():
            raise InputError(f"no such checkpoint: {args.resume}")
        state, saved_cfg, optimizer, start = load_checkpoint(args.resume)
        config = _train_config(args) if args.config else saved_cfg
        if config is None:
            raise InputError("checkpoint carries no config; pass --config")
        if args.seed is not None and not args.config:
            config.seed = args.seed
    else:
        config = _train_config(args)
    try:
        validate_sequence(ds.frames)
        if state is not None:
            state.check_against(ds.frames)
    except ValueError as exc:
        raise InputError(str(exc)) from exc

    out = _out_dir(args.out)
    manifest = RunManifest(out, "train", sys.argv, config=config.to_dict(), seed=config.seed)
    try:
        state, history = fit(ds.frames, config, run_dir=out, state=state, optimizer=optimizer, start_epoch=start)
    except NumericalAbort as exc:
        ckpts = list((out / "checkpoints").glob("*.json"))
        manifest.finish("numerical_abort", ckpts + [out / "config.json", out / "metrics.json"], error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    ckpts = list((out / "checkpoints").glob("*.json"))
    manifest.finish(
        "ok",
        ckpts + [out / "config.json", out / "metrics.json", out / "final.json"],
        epochs=start + history.epochs,
        converged=history.converged,
        wall_time=history.wall_time,
    )
    last = history.reports[-1] if history.reports else None
    summary = f"total_T={last.total_T:.6g} total_P={last.total_P:.6g}" if last else "no epochs run"
    print(f"trained {history.epochs} epochs ({'converged' if history.converged else 'budget reached'}): {summary}")
    return EXIT_OK


def _load_for_eval(args):
    if not Path(args.ckpt).is_file():
        raise InputError(f"no such checkpoint: {args.ckpt}")
    try:
        state, config, _, _ = load_checkpoint(args.ckpt)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"malformed checkpoint {args.ckpt}: {exc}") from exc
    ds = _load_dataset(args.data)
    try:
        state.check_against(ds.frames)
    except ValueError as exc:
        raise InputError(f"dimension mismatch: {exc}") from exc
    return state, config, ds


def _write_renders(out: Path, state, ds):
    X = ds.frames
    written = []
    W = pattern_weights(state.logits)
    patterns = pattern_primitives(X[0], W)
    for l, p in enumerate(patterns):
        write_pgm(out / f"pattern_{l}.pgm", render_sequence([p]))
        written.append(out / f"pattern_{l}.pgm")
    write_pgm(out / "patterns.pgm", render_sequence(patterns))
    Y = reconstruct(state, X[0])
    write_pgm(out / "reconstruction.pgm", render_sequence(Y))
    write_pgm(out / "reconstruction_threshold.pgm", render_sequence(Y, threshold=True))
    write_pgm(out / "observed.pgm", render_sequence(X))
    written += [out / n for n in ("patterns.pgm", "reconstruction.pgm", "reconstruction_threshold.pgm", "observed.pgm")]
    for l, seq in enumerate(per_pattern_sequences(state, X[0])):
        write_pgm(out / f"sequence_P{l}.pgm", render_sequence(seq, threshold=True))
        written.append(out / f"sequence_P{l}.pgm")
    for k, flow in enumerate(state.flows):
        written.extend(write_field_export(out, k, flow))
    return written


def cmd_eval(args):
    state, config, ds = _load_for_eval(args)
    weights = config.weights if config is not None else None
    try:
        report = evaluate(state, ds, weights, tau_p=args.tau_p, tau_id=args.tau_id)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = _out_dir(args.out)
    manifest = RunManifest(out, "eval", sys.argv, config=config.to_dict() if config else None, seed=args.seed)
    _atomic_json(out / "report.json", report.to_dict())
    written = [out / "report.json"] + _write_renders(out, state, ds)
    manifest.finish("ok", written)
    print(
        f"active patterns: {report.active_pattern_count}; transformers: {', '.join(report.transformer_classes)}; "
        f"max masked frame MSE: {max(report.masked_frame_mse):.3g}"
    )
    return EXIT_OK


def cmd_render(args):
    state, config, ds = _load_for_eval(args)
    out = _out_dir(args.out)
    manifest = RunManifest(out, "render", sys.argv, config=config.to_dict() if config else None, seed=args.seed)
    written = _write_renders(out, state, ds)
    manifest.finish("ok", written)
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def cmd_verify(args):
    results = verify.run(args.filter)
    if not results:
        raise InputError(f"no property matches filter {args.filter!r}")
    failed = [r for r in results if not r.ok]
    if failed:
        print(f"verification failed: {failed[0].name}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} properties passed")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="lieshape", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic sequence from a scene spec")
    p.add_argument("--spec", required=True, help="scene spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="recorded only; generation is deterministic")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="fit patterns and transformers to a dataset")
    p.add_argument("--data", required=True, help="dataset JSON")
    p.add_argument("--config", default=None, help="training config JSON (missing keys take defaults)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--resume", default=None, help="continue from a checkpoint with optimizer state")
    p.set_defaults(func=cmd_train)

    for name, func, text in (
        ("eval", cmd_eval, "analyse a checkpoint against a dataset"),
        ("render", cmd_render, "write pattern, sequence and field renderings"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--ckpt", required=True, help="checkpoint JSON (final.json or epoch_*.json)")
        p.add_argument("--data", required=True, help="dataset JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="recorded only; evaluation is deterministic")
        if name == "eval":
            p.add_argument("--tau-p", type=float, default=0.05, help="active pattern area threshold")
            p.add_argument("--tau-id", type=float, default=0.1, help="identity transformer threshold")
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="run the numerical property suite")
    p.add_argument("--filter", default=None, help="run only properties whose name contains this text")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    np.seterr(over="ignore", invalid="ignore")
    try:
        worker_cap()
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
