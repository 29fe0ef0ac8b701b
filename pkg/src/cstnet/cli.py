"""Command-line entry point: ``cstnet <subcommand> [flags]``.

Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.
Errors go to standard error prefixed with ``error:``.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .config import PRESETS, ModelConfig, from_dict
from .errors import CheckpointError, ConfigurationError, CSTNetError

REFERENCE_PARAMS_M = {"full": 144.00, "small": 92.12}
REFERENCE_FLOPS_G = {"full": 74.7, "small": 56.4}
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser, config_default: str = "full", seed_default: int = 0):
    p.add_argument("--config", default=None,
                   help=f"preset ({', '.join(PRESETS)}) or JSON file; default {config_default}")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default {seed_default})")
    p.add_argument("--deterministic", action="store_true",
                   help="suppress timing lines so output is byte-identical across runs")
    p.set_defaults(config_default=config_default, seed_default=seed_default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cstnet", description="RGB-T tracker toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("params", help="parameter counts")
    _add_common(p)
    p = sub.add_parser("flops", help="multiply-accumulate counts")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_common(p, "tiny")
    p.add_argument("--samples", type=int, default=100)

    p = sub.add_parser("overfit", help="overfit a tiny model on synthetic pairs")
    _add_common(p, "tiny", seed_default=7)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", help="training log CSV path (default stdout)")
    p.add_argument("--ckpt", help="write the trained checkpoint here")

    p = sub.add_parser("synth", help="write a synthetic sequence container")
    _add_common(p, "tiny")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=12)

    p = sub.add_parser("track", help="run a checkpointed model over a sequence")
    _add_common(p, "tiny")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True, help="sequence container")
    p.add_argument("--out", required=True, help="result file (x,y,w,h per line)")

    p = sub.add_parser("eval", help="PR / NPR / SR of a result file")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="directory for tau,value curve dumps")

    p = sub.add_parser("transfer", help="full checkpoint -> small checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("selftest", help="run the quick invariant suite")
    _add_common(p, "tiny")
    return parser


def resolve_run(args) -> tuple[ModelConfig, str, int]:
    """defaults < config file < flags."""
    name = args.config or args.config_default
    seed = args.seed_default
    if name in PRESETS:
        cfg = PRESETS[name]
    else:
        path = Path(name)
        if not path.is_file():
            raise ConfigurationError(
                f"config {name!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")
        seed = int(data.get("seed", seed))
        cfg = from_dict(data.get("model", {k: v for k, v in data.items() if k != "seed"}))
    if args.seed is not None:
        seed = args.seed
    return cfg, name, seed


def _echo(cfg: ModelConfig, name: str, seed: int):
    print(f"config.name={name}")
    for line in cfg.key_values():
        print(f"config.{line}")
    print(f"seed={seed}")


def _build(cfg, seed, initialize=True):
    from .model import build_model
    return build_model(cfg, seed=seed, initialize=initialize)


def cmd_params(args, cfg, name, seed) -> int:
    from .costs import count_params, fusion_param_count
    model = _build(cfg, seed, initialize=False)
    report = count_params(model)
    print(report.text())
    for line in report.key_values():
        print(line)
    print(f"params.fusion_total={fusion_param_count(model)}")
    ref = REFERENCE_PARAMS_M.get(name)
    if ref is not None:
        dev = report.total_params / 1e6 / ref - 1
        print(f"reference.params_millions={ref:.2f} deviation={dev:+.4f}")
    return 0


def cmd_flops(args, cfg, name, seed) -> int:
    from .costs import count_flops
    report = count_flops(_build(cfg, seed, initialize=False), cfg)
    print(report.text())
    for line in report.key_values():
        print(line)
    ref = REFERENCE_FLOPS_G.get(name)
    if ref is not None:
        for conv, total in (("MAC", report.total_macs), ("2MAC", report.total_flops_2mac)):
            print(f"reference.flops_giga={ref} convention={conv} deviation={total / 1e9 / ref - 1:+.4f}")
    return 0


def cmd_gradcheck(args, cfg, name, seed) -> int:
    from .gradcheck import check_model
    result = check_model(cfg, samples=args.samples, seed=seed)
    for label, n in sorted(result.coverage().items()):
        print(f"coverage.{label}={n}")
    worst = result.worst()
    print(f"worst={worst.name}{list(worst.index)} analytic={worst.analytic!r} "
          f"numeric={worst.numeric!r}")
    counts = result.counts()
    print(f"draws={len(result.samples)} checked={counts['checked']} kink={counts['kink']} "
          f"flat={counts['flat']}")
    print(f"flat.max_abs_error={result.max_flat_abs_error:.3e} noise_floor={result.noise_floor:g}")
    print(f"samples={counts['checked']} max_rel_error={result.max_rel_error:.3e} "
          f"tolerance={GRADCHECK_TOL:g}")
    if counts["checked"] < args.samples:
        print(f"error: only {counts['checked']} of {args.samples} coordinates were checkable",
              file=sys.stderr)
        return 1
    if result.max_flat_abs_error >= result.noise_floor and result.of("flat"):
        print("error: a flat coordinate disagrees beyond the noise floor", file=sys.stderr)
        return 1
    if result.max_rel_error >= GRADCHECK_TOL:
        print(f"error: gradient check failed ({result.max_rel_error:.3e} >= {GRADCHECK_TOL:g})",
              file=sys.stderr)
        return 1
    return 0


def cmd_overfit(args, cfg, name, seed) -> int:
    from .checkpoint import save_checkpoint
    from .training import TrainConfig, overfit
    tc = TrainConfig(seed=seed,
                     steps=args.steps if args.steps is not None else 200)
    for line in tc.key_values():
        print(line)
    log_lines = ["step,total,cls,iou,l1"]
    result = overfit(cfg, tc, log_lines.append)
    if args.out:
        Path(args.out).write_text("\n".join(log_lines) + "\n")
    else:
        print("\n".join(log_lines))
    print(f"loss.initial={result.initial!r}")
    print(f"loss.final={result.final!r}")
    print(f"loss.ratio={result.ratio:.4f}")
    print(f"train_frame_iou={result.train_iou:.4f}")
    print(f"checksum={result.checksum}")
    if args.ckpt:
        save_checkpoint(result.model, args.ckpt)
        print(f"checkpoint={args.ckpt}")
    ok = result.ratio <= 0.1 and result.train_iou >= 0.5
    if not ok:
        print("error: overfit thresholds not met (need ratio <= 0.1 and IoU >= 0.5)",
              file=sys.stderr)
    return 0 if ok else 1


def cmd_synth(args, cfg, name, seed) -> int:
    from .tracking import SceneSpec, synth_sequence, write_sequence
    if args.frames < 1:
        raise ConfigurationError("--frames must be >= 1")
    side = max(cfg.search_side, 64) + 32
    spec = SceneSpec(frames=args.frames, height=side, width=side,
                     target_size=(side / 6, side / 7), start=(side / 3, side / 3),
                     velocity=(1.0, 0.5),
                     effects={k: ("occlusion",) for k in range(args.frames) if k % 5 == 4})
    path, sidecar = write_sequence(args.out, synth_sequence(spec, seed))
    print(f"sequence={path}")
    print(f"groundtruth={sidecar}")
    print(f"frames={args.frames} height={side} width={side}")
    return 0


def cmd_track(args, cfg, name, seed) -> int:
    from .checkpoint import load_checkpoint
    from .tracking import Tracker, read_sequence, write_boxes
    frames = read_sequence(args.seq)
    model = load_checkpoint(args.ckpt, _build(cfg, seed, initialize=False)).eval()
    boxes = Tracker(model).run([p for p, _ in frames], frames[0][1])
    write_boxes(args.out, boxes)
    print(f"frames={len(boxes)}")
    print(f"result={args.out}")
    return 0


def cmd_eval(args, cfg, name, seed) -> int:
    from .evaluation import evaluate, read_boxes, report_lines
    pred, gt = read_boxes(args.pred), read_boxes(args.gt)
    curves = evaluate(pred, gt)
    for line in report_lines(curves, len(gt)):
        print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for key, curve in curves.items():
            (out / f"{key.lower()}_curve.txt").write_text(curve.dump())
    return 0


def cmd_transfer(args, cfg, name, seed) -> int:
    import warnings

    from .checkpoint import Checkpoint, transfer_to_small
    full = Checkpoint.load(args.ckpt)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        small = transfer_to_small(full)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    small.save(args.out)
    print(f"entries.in={len(full)} entries.out={len(small)} removed={len(full) - len(small)}")
    print(f"checkpoint={args.out}")
    return 0


def cmd_selftest(args, cfg, name, seed) -> int:
    from .selftest import run_all
    results = run_all(cfg, seed)
    failed = [n for n, ok, _ in results if not ok]
    for n, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {n}" + (f" ({detail})" if detail else ""))
    print(f"selftest.passed={len(results) - len(failed)} selftest.failed={len(failed)}")
    if failed:
        print(f"error: {len(failed)} self-test check(s) failed", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "params": cmd_params, "flops": cmd_flops, "gradcheck": cmd_gradcheck,
    "overfit": cmd_overfit, "synth": cmd_synth, "track": cmd_track, "eval": cmd_eval,
    "transfer": cmd_transfer, "selftest": cmd_selftest,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg, name, seed = resolve_run(args)
    except (ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _echo(cfg, name, seed)
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, cfg, name, seed)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CSTNetError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not args.deterministic:
        print(f"elapsed_seconds={time.perf_counter() - start:.2f}")
    return code


def main():
    sys.exit(run())
