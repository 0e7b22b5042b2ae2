"""Command-line entry point.

Exit codes: 0 success, 1 a numerical check failed, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from fuseode import fusecore, orderlab, toyseg
from fuseode.multistep import ConfigurationError, UnsupportedSchemeError, scheme_coeffs

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_coeffs(args) -> int:
    try:
        scheme = scheme_coeffs(args.family, args.steps)
    except UnsupportedSchemeError as exc:
        raise UsageError(str(exc)) from None
    print(" ".join(scheme.fraction_strings()))
    return EXIT_OK


def cmd_order_study(args) -> int:
    rows = orderlab.run_order_study(resolutions=args.resolutions)
    text = orderlab.write_order_csv(rows, args.out)
    lines, ok = orderlab.order_summary(rows, tol=args.tol, problems=("decay",))
    report = sys.stdout if args.out else sys.stderr
    if not args.out:
        sys.stdout.write(text)
    for line in lines:
        print(line, file=report)
    if not ok:
        print(f"FAILED: empirical order must be within {args.tol:g} of nominal", file=report)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_trace(args) -> int:
    try:
        trace = fusecore.plan_schedule(args.L, args.max_order)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    sys.stdout.write(trace.equations() if args.equations else trace.dump())
    return EXIT_OK


def cmd_ode_check(args) -> int:
    try:
        rows = orderlab.scheduler_ode_check(args.L, a=args.a, b=args.b, x=args.x)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    print("L,y_final,exact,abs_error")
    for r in rows:
        print(f"{r.L},{r.y_final:.15g},{r.exact:.15g},{r.error:.6e}")
    first, last = rows[0], rows[-1]
    ok = last.error <= args.tol and (last.error < first.error or first.error <= 1e-14)
    if not ok:
        print(f"FAILED: error at L={last.L} ({last.error:.3e}) must be <= {args.tol:g} "
              f"and below the error at L={first.L} ({first.error:.3e})", file=sys.stderr)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_gradcheck(args) -> int:
    report = toyseg.pipeline_gradcheck(L=args.L, n_classes=args.N, size=args.size, seed=args.seed)
    for name, err in report.per_group.items():
        print(f"{name}: rel_error={err:.3e}")
    print(f"max rel_error={report.max_rel_error:.3e} tol={args.tol:g}")
    if not report.passed(args.tol):
        print(f"FAILED: backprop gradient must match central differences within {args.tol:g}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        samples = toyseg.synth_dataset(args.n, args.H, args.W, args.seed)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    toyseg.save_dataset(samples, args.out)
    print(f"# seed={args.seed}")
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        config = toyseg.TrainConfig.from_file(path)
    except (ConfigurationError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    if args.seed is not None:
        config.seed = args.seed
    result = toyseg.train(config)
    out = Path(args.out)
    fusecore.save_params(result.params, out / "ckpt")
    (out / "ckpt" / "config.txt").write_text(config.to_text())
    (out / "metrics.csv").write_text(result.metrics_csv(config))
    print(f"# seed={config.seed}")
    print(f"final train_loss={result.train_loss[-1]:.6f} val_dice={result.final_val_dice:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt, data = Path(args.ckpt), Path(args.data)
    if not (ckpt / fusecore.MANIFEST).is_file():
        raise UsageError(f"no checkpoint manifest in {ckpt}")
    if not data.is_dir():
        raise UsageError(f"data directory not found: {data}")
    params = fusecore.load_params(ckpt)
    max_order = args.max_order
    cfg_file = ckpt / "config.txt"
    if max_order is None and cfg_file.is_file():
        max_order = toyseg.TrainConfig.from_file(cfg_file).max_order
    samples = toyseg.load_dataset(data)
    if not samples:
        raise UsageError(f"no img_*.pgm samples in {data}")
    dice = toyseg.evaluate(params, samples, params.n_stages, max_order or 4)
    print(f"samples={len(samples)} dice={dice:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fuseode", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coeffs", help="print Adams coefficients oldest-to-newest")
    p.add_argument("--family", required=True, type=str.lower, choices=["ab", "am"])
    p.add_argument("--steps", required=True, type=int)
    p.set_defaults(func=cmd_coeffs)

    p = sub.add_parser("order-study", help="empirical convergence orders as CSV")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.add_argument("--resolutions", type=_int_list, default=[16, 32, 64, 128])
    p.add_argument("--tol", type=float, default=0.25)
    p.set_defaults(func=cmd_order_study)

    p = sub.add_parser("trace", help="print the fusion schedule for L stages")
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--max-order", type=int, default=4)
    p.add_argument("--equations", action="store_true", help="print update equations instead")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("ode-check", help="fusion scheduler vs a closed-form linear ODE")
    p.add_argument("--L", type=_int_list, default=[4, 8, 16])
    p.add_argument("--a", type=float, default=0.5)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--x", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-2)
    p.set_defaults(func=cmd_ode_check)

    p = sub.add_parser("gradcheck", help="backprop vs finite differences on a tiny pipeline")
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--N", type=int, default=1)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic PGM dataset")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--H", type=int, default=32)
    p.add_argument("--W", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the fusion decoder on synthetic data")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Dice of a checkpoint on a PGM dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-order", type=int, default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, FileNotFoundError) as exc:
        print(f"fuseode {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
