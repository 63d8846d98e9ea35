"""Command-line entry point: ``unilion {gen,forward,gradcheck,bench,train}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import tempfile
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .bench import doubling_ratios, run_bench, to_csv
from .config import ConfigError, RunConfig
from .fusion import NonRigidPoseError
from .gradcheck import E2E_TOL, OP_TOL, end_to_end, op_suite
from .pipeline import MissingInputError, init_model, load_model, run_sequence, save_model
from .scene import SceneFrame, generate_scene

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2
THREADS_ENV = "UNILION_THREADS"

log = logging.getLogger("unilion")


def write_atomic(path: Path, data: str | bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    mode = "w" if isinstance(data, str) else "wb"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_figure_atomic(plot_fn, payload, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".png")
    os.close(fd)
    try:
        plot_fn(payload, tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def frame_path(out: Path, k: int) -> Path:
    return out / f"frame_{k:03d}.json"


def load_frames(directory: Path) -> list[SceneFrame]:
    paths = sorted(Path(directory).glob("frame_*.json"))
    if not paths:
        raise MissingInputError(f"no frame_*.json files in {directory}")
    frames = []
    for p in paths:
        try:
            frames.append(SceneFrame.from_json(p.read_text()))
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise MissingInputError(f"unreadable frame {p}: {e}") from e
    return frames


# ---------------------------------------------------------------- commands


def cmd_gen(cfg: RunConfig, out: Path, args) -> int:
    frames = cfg.frames if args.frames is None else args.frames
    if frames < 0:
        raise ConfigError("frames must be non-negative")
    for k, frame in enumerate(generate_scene(cfg.scene, cfg.seed, frames)):
        write_atomic(frame_path(out, k), frame.to_json())
    log.info("wrote %d frame(s) to %s", frames, out)
    return EXIT_OK


def cmd_forward(cfg: RunConfig, out: Path, args) -> int:
    if args.scenes is not None:
        frames = load_frames(Path(args.scenes))
    else:
        frames = generate_scene(cfg.scene, cfg.seed, cfg.frames)
    if args.checkpoint:
        try:
            model = load_model(cfg, args.checkpoint)
        except (OSError, ValueError) as e:
            raise MissingInputError(f"cannot use checkpoint {args.checkpoint}: {e}") from e
    else:
        model = init_model(cfg)
    regime = args.regime or cfg.regime
    results = run_sequence(frames, model, cfg, regime)
    report = {"configured": cfg.regime, "regime": regime, "ok": all(r.ok for r in results), "frames": []}
    for k, res in enumerate(results):
        bev = np.asarray(ad.value(res.bev))
        write_atomic(out / f"bev_{k:03d}.json", json.dumps({"shape": list(bev.shape), "bev": bev.tolist()}))
        report["frames"].append({"index": k, "tokens": res.tokens, "ok": res.ok,
                                 "failures": res.failures, "trace": res.trace})
    write_atomic(out / "report.json", json.dumps(report, indent=1))
    for k, res in enumerate(results):
        for msg in res.failures:
            log.error("frame %d: %s", k, msg)
    log.info("forward %s on %s config: %d frame(s), invariants %s", regime, cfg.regime, len(results),
             "ok" if report["ok"] else "FAILED")
    return EXIT_OK if report["ok"] else EXIT_INVARIANT


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> int:
    ops = op_suite(cfg.seed)
    e2e = end_to_end(cfg.seed, cfg.gradcheck_directions, cfg.operator)
    passed = all(r.passed(OP_TOL) for r in ops) and e2e.passed(E2E_TOL)
    doc = {"passed": passed, "op_tolerance": OP_TOL, "end_to_end_tolerance": E2E_TOL,
           "ops": [r.to_dict() for r in ops], "end_to_end": e2e.to_dict()}
    write_atomic(out / "gradient_report.json", json.dumps(doc, indent=1, sort_keys=True))
    for r in ops + [e2e]:
        log.info("%-24s max rel err %.3e", r.label, r.max_error)
    return EXIT_OK if passed else EXIT_INVARIANT


def cmd_bench(cfg: RunConfig, out: Path, args) -> int:
    from .plotting import plot_bench

    rows = run_bench(cfg.lengths, cfg.operator, cfg.bench_channels, cfg.bench_repeats, cfg.seed, cfg.chunk)
    write_atomic(out / "bench.csv", to_csv(rows))
    save_figure_atomic(plot_bench, rows, out / "bench.png")
    log.info("scan time ratios per doubling: %s", [round(r, 2) for r in doubling_ratios(rows, "scan")])
    log.info("attention time ratios per doubling: %s", [round(r, 2) for r in doubling_ratios(rows, "attention")])
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    from .plotting import plot_losses
    from .train import train

    frames = generate_scene(cfg.scene, cfg.seed, cfg.frames)
    if not frames:
        raise ConfigError("training needs frames >= 1")
    result = train(cfg, frames, steps=args.steps, lr=args.lr,
                   on_step=lambda r: log.debug("step %d total %.6g", r["step"], r["total"]))
    write_atomic(out / "losses.jsonl", result.jsonl())
    if result.records:
        save_figure_atomic(plot_losses, result.records, out / "loss_curve.png")
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".checkpoint.", suffix=".npz")
    os.close(fd)
    save_model(result.model, tmp)
    os.replace(tmp, out / "checkpoint.npz")
    if result.records:
        log.info("loss %.6g -> %.6g over %d steps", result.curve[0], result.curve[-1], len(result.curve))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "forward": cmd_forward, "gradcheck": cmd_gradcheck,
            "bench": cmd_bench, "train": cmd_train}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unilion", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="flat JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        if name == "gen":
            p.add_argument("--frames", type=int, default=None)
        if name == "forward":
            p.add_argument("--scenes", type=Path, default=None, help="directory of frame_*.json")
            p.add_argument("--regime", choices=["L", "LT", "LC", "LCT", "C", "CT"], default=None,
                           help="input availability (default: the configured modalities)")
            p.add_argument("--checkpoint", type=Path, default=None)
        if name == "train":
            p.add_argument("--steps", type=int, default=None)
            p.add_argument("--lr", type=float, default=None)
    return parser


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        with _thread_limit():
            return COMMANDS[args.command](cfg, args.out, args)
    except (ConfigError, MissingInputError, NonRigidPoseError) as e:
        log.error("%s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
