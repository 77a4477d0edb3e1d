"""Command-line entry point: ``accvit {info,forward,verify,train-smoke,export}``.

Exit codes: 0 success, 2 usage or input error, 3 audit tolerance failure,
4 acceptance-threshold failure.
"""

from __future__ import annotations

import argparse
import contextlib
import math
import sys

import numpy as np

from .audit import FLOP_TOLERANCE, PARAM_TOLERANCE, estimate_flops
from .errors import AccVitError
from .model import build, get_config
from .tensor import Tensor, no_grad, set_debug

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_AUDIT = 3
EXIT_THRESHOLD = 4


def _config(args):
    overrides = {}
    if getattr(args, "num_classes", None) is not None:
        overrides["num_classes"] = args.num_classes
    return get_config(args.variant, **overrides)


def cmd_info(args) -> int:
    cfg = _config(args)
    report = estimate_flops(build(cfg, materialize=False), args.resolution)
    if args.tsv:
        sys.stdout.write(report.to_tsv())
        return EXIT_OK
    if args.table:
        sys.stdout.write(report.table())
    sys.stdout.write(report.summary())
    ok = report.params_ok(args.param_tol)
    if args.check_flops:
        ok = ok and report.flops_ok(args.flop_tol)
    return EXIT_OK if ok else EXIT_AUDIT


def cmd_forward(args) -> int:
    from .image import preprocess, read_ppm
    from .serialization import load_weights

    model = build(_config(args), seed=args.seed)
    if args.weights:
        load_weights(model, args.weights)
    x = Tensor(preprocess(read_ppm(args.image), args.resolution))
    with no_grad():
        logits = model(x).data[0]
    top = np.argsort(-logits, kind="stable")[: args.top]
    print("top" + "\t" + "\t".join(f"{i}:{logits[i]:.6f}" for i in top))
    print("logits\t" + " ".join(f"{v:.6f}" for v in logits))
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    if args.suite == "audit":
        checks = verify.audit_suite(check_flops=args.check_flops)
    elif args.suite == "all":
        checks = [c for name, fn in verify.SUITES.items() if name != "audit" for c in fn()]
        checks += verify.audit_suite(check_flops=args.check_flops)
    else:
        checks = verify.SUITES[args.suite]()
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    if not failed:
        return EXIT_OK
    return EXIT_AUDIT if args.suite == "audit" else EXIT_THRESHOLD


def cmd_train_smoke(args) -> int:
    from .train import brightness_dataset, loss_ratio, train_smoke

    model = build(get_config(args.variant, num_classes=2), seed=args.seed)
    data = brightness_dataset(args.samples, args.size, args.seed)
    out = open(args.out, "w", encoding="utf-8") if args.out else contextlib.nullcontext(sys.stdout)
    with out as fh:
        def log(step, loss):
            fh.write(f"{step}\t{loss:.6f}\n")
            fh.flush()

        trace = train_smoke(model, data, args.steps, args.lr, args.momentum, args.label_smoothing, log)
    ratio = loss_ratio(trace, args.window)
    print(f"final/initial loss ratio {ratio:.4f} (threshold {args.threshold})", file=sys.stderr)
    return EXIT_OK if not math.isnan(ratio) and ratio < args.threshold else EXIT_THRESHOLD


def cmd_export(args) -> int:
    from .serialization import save_weights

    save_weights(build(_config(args), seed=args.seed), args.out)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="accvit", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: library choice)")
    p.add_argument("--debug", action="store_true", help="fail on NaN/Inf produced from finite inputs")
    sub = p.add_subparsers(dest="command", required=True)

    def variant_args(sp, default="tiny"):
        sp.add_argument("--variant", default=default, help="femto, pico, nano, tiny, small, base or micro")
        sp.add_argument("--num-classes", type=int, default=None)
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("info", help="parameter/FLOP audit against published values")
    variant_args(sp)
    sp.add_argument("--resolution", type=int, default=224)
    sp.add_argument("--tsv", action="store_true", help="print module<TAB>params<TAB>flops lines")
    sp.add_argument("--table", action="store_true", help="print the per-module table")
    sp.add_argument("--check-flops", action="store_true", help="also require FLOPs within tolerance")
    sp.add_argument("--param-tol", type=float, default=PARAM_TOLERANCE)
    sp.add_argument("--flop-tol", type=float, default=FLOP_TOLERANCE)
    sp.set_defaults(fn=cmd_info)

    sp = sub.add_parser("forward", help="classify a binary PPM image")
    variant_args(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--weights", default=None)
    sp.add_argument("--resolution", type=int, default=224)
    sp.add_argument("--top", type=int, default=5)
    sp.set_defaults(fn=cmd_forward)

    sp = sub.add_parser("verify", help="run verification suites")
    sp.add_argument("suite", choices=["partition", "gradcheck", "gating", "shapes", "audit", "all"])
    sp.add_argument("--check-flops", action="store_true", help="include FLOP tolerance in the audit suite")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("train-smoke", help="train on synthetic dark/bright images")
    sp.add_argument("--variant", default="micro")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--label-smoothing", type=float, default=0.1)
    sp.add_argument("--samples", type=int, default=16)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--window", type=int, default=10, help="losses averaged for the final value")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", default=None, help="loss trace path (default: stdout)")
    sp.set_defaults(fn=cmd_train_smoke)

    sp = sub.add_parser("export", help="write freshly initialized weights to a file")
    variant_args(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.debug:
        set_debug(True)
    limits = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(limits=args.threads)
    try:
        with limits:
            return args.fn(args)
    except AccVitError as exc:
        print(f"accvit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
