"""Command-line entry point: ``globcert <command> ...``.

Exit codes: 0 success, 1 certification inconclusive (``certify`` only),
2 bad input (missing files, malformed models, invalid arguments).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import attack, bnb, propagate, train
from .graph import GraphError, build_mlp, select_output, validate
from .io import ModelFormatError, load_idx, load_model, save_model
from .lowering import lower

log = logging.getLogger("globcert")

EXIT_OK, EXIT_UNKNOWN, EXIT_INPUT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _emit(payload: dict, out: str | None):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _bnb_config(args) -> bnb.BnBConfig | None:
    if not getattr(args, "bnb", False):
        return None
    return bnb.BnBConfig(
        max_splits=args.max_splits, timeout=args.timeout_secs, beta_steps=args.beta_steps, beta_lr=args.beta_lr
    )


def _add_bnb_flags(p):
    p.add_argument("--bnb", action="store_true", help="refine with branch-and-bound")
    p.add_argument("--max-splits", type=int, default=16)
    p.add_argument("--timeout-secs", type=float, default=60.0)
    p.add_argument("--beta-steps", type=int, default=20)
    p.add_argument("--beta-lr", type=float, default=0.05)
    p.add_argument("--history-csv", help="write branch-and-bound progress (time_s, splits, lo, hi)")


def _channels(args, graph):
    m = graph.output_size
    if args.channel is None:
        return list(range(m))
    for c in args.channel:
        if not 0 <= c < m:
            raise UsageError(f"channel {c} out of range for {m} outputs")
    return args.channel


def _bounds(args, graph):
    """Per-channel bounds, with optional branch-and-bound; returns (rows, csv text)."""
    g = lower(graph)
    cfg = _bnb_config(args)
    rows, csv_parts = [], []
    for c in _channels(args, g):
        gc = g if g.output_size == 1 else select_output(g, c)
        if cfg is None:
            cb = propagate.output_variation_bounds(gc, args.delta)
            rows.append({"channel": c, "lo": float(cb.lo[0]), "hi": float(cb.hi[0])})
        else:
            res = bnb.run(gc, args.delta, cfg)
            rows.append(
                {
                    "channel": c,
                    "lo": float(res.best.lo[0]),
                    "hi": float(res.best.hi[0]),
                    "splits": res.splits,
                    "domains_explored": res.domains_explored,
                }
            )
            text = res.history_csv(timing=not args.no_timing)
            csv_parts.append(text if not csv_parts else text.split("\n", 1)[1])
    return rows, "".join(csv_parts)


def cmd_certify(args) -> int:
    graph = load_model(args.model)
    t0 = time.perf_counter()
    rows, history = _bounds(args, graph)
    lo = [r["lo"] for r in rows]
    hi = [r["hi"] for r in rows]
    cb = propagate.ConcreteBounds(np.array(lo), np.array(hi), args.delta)
    verdicts = propagate.robust_verdict(cb, args.epsilon)
    report = propagate.CertificateReport(
        delta=args.delta,
        epsilon=args.epsilon,
        lo=lo,
        hi=hi,
        verdict=propagate.ROBUST if all(v == propagate.ROBUST for v in verdicts) else propagate.UNKNOWN,
        channel_verdicts=verdicts,
        wall_time=time.perf_counter() - t0,
        extra={"channels": [r["channel"] for r in rows]},
    )
    if args.intervals:
        report.intervals = {
            nid: {"lo": iv.lo.tolist(), "hi": iv.hi.tolist()}
            for nid, iv in propagate.compute_relu_input_intervals(lower(graph), args.delta).items()
        }
    if args.bnb:
        report.bnb = [{k: r[k] for k in ("channel", "splits", "domains_explored")} for r in rows]
        if args.history_csv:
            Path(args.history_csv).write_text(history)
    _emit(report.to_dict(timing=not args.no_timing), args.out)
    return EXIT_OK if report.verdict == propagate.ROBUST else EXIT_UNKNOWN


def cmd_bound(args) -> int:
    graph = load_model(args.model)
    t0 = time.perf_counter()
    rows, history = _bounds(args, graph)
    payload = {"delta": args.delta, "channels": rows}
    if args.intervals:
        payload["intervals"] = {
            nid: {"lo": iv.lo.tolist(), "hi": iv.hi.tolist()}
            for nid, iv in propagate.compute_relu_input_intervals(lower(graph), args.delta).items()
        }
    if args.bnb and args.history_csv:
        Path(args.history_csv).write_text(history)
    if not args.no_timing:
        payload["wall_time"] = time.perf_counter() - t0
    _emit(payload, args.out)
    return EXIT_OK


def _dataset(images, labels, split, limit=None):
    data = load_idx(images, labels, split=split)
    if limit is not None:
        data = data.subset(slice(0, limit))
    return data


def cmd_train(args) -> int:
    graph = load_model(args.model)
    data = _dataset(args.images, args.labels, "train", args.limit)
    test = None
    if args.test_images:
        if not args.test_labels:
            raise UsageError("--test-images needs --test-labels")
        test = _dataset(args.test_images, args.test_labels, "test")
    cfg = train.TrainConfig(
        lambda_reg=args.lambda_reg,
        delta=args.delta,
        lr=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        seed=args.seed,
        detach_intervals=args.detach_intervals,
        rgr_agg=args.rgr_agg,
    )
    trained, metrics = train.sgd_train(graph, data, cfg, test)
    save_model(trained, args.output, dtype=graph.dtype)
    text = train.metrics_csv(metrics)
    if args.metrics_csv:
        Path(args.metrics_csv).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_attack(args) -> int:
    graph = load_model(args.model)
    cfg = attack.AttackConfig(steps=args.steps, restarts=args.restarts, step_size=args.step_size, seed=args.seed)
    if args.images:
        if not args.labels:
            raise UsageError("--images needs --labels")
        points = _dataset(args.images, args.labels, "test", args.limit).inputs
        points = points.reshape((len(points),) + graph.input_shape)
        result = attack.pgd_variation(graph, points, args.delta, cfg)
        source = "pgd"
    else:
        result = attack.sampling_oracle(graph, args.delta, args.samples, args.seed, box=tuple(args.box))
        source = "sampling"
    payload = {"delta": args.delta, "method": source, **result.to_dict()}
    if args.witness:
        np.savez(
            args.witness,
            x=np.stack([w[0] for w in result.witnesses]),
            dx=np.stack([w[1] for w in result.witnesses]),
            eps_under=result.eps_under,
        )
        payload["witness_file"] = str(args.witness)
    _emit(payload, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    graph = load_model(args.model)
    rep = train.finite_diff_check(graph, args.delta, args.tolerance, args.detach_intervals, args.rgr_agg)
    _emit(rep.to_dict(), args.out)
    return EXIT_OK if rep.passed else EXIT_UNKNOWN


def cmd_lower(args) -> int:
    graph = load_model(args.model)
    save_model(lower(graph), args.output, dtype=graph.dtype)
    return EXIT_OK


def cmd_inspect(args) -> int:
    graph = load_model(args.model)
    payload = graph.summary()
    payload["violations"] = [str(v) for v in validate(graph)]
    payload["order"] = list(graph.order)
    payload["shapes"] = {k: list(v) for k, v in graph.shapes.items()}
    _emit(payload, args.out)
    return EXIT_OK


def cmd_init(args) -> int:
    graph = build_mlp(args.sizes, args.seed)
    save_model(graph, args.output, dtype=args.dtype)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="globcert", description="Global robustness certification and training for ReLU networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("model", help="GMF manifest")
        if out:
            sp.add_argument("--out", help="write JSON here instead of stdout")
        sp.add_argument("--no-timing", action="store_true", help="omit wall-clock fields (reproducible output)")

    sp = sub.add_parser("certify", help="decide (delta, epsilon)-global robustness")
    common(sp)
    sp.add_argument("--delta", type=float, required=True)
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--channel", type=int, action="append")
    sp.add_argument("--intervals", action="store_true", help="include ReLU input intervals")
    _add_bnb_flags(sp)
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("bound", help="certified output-variation interval per channel")
    common(sp)
    sp.add_argument("--delta", type=float, required=True)
    sp.add_argument("--channel", type=int, action="append")
    sp.add_argument("--intervals", action="store_true")
    _add_bnb_flags(sp)
    sp.set_defaults(func=cmd_bound)

    sp = sub.add_parser("train", help="SGD with the certified-width regularizer")
    common(sp, out=False)
    sp.add_argument("--images", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--test-images")
    sp.add_argument("--test-labels")
    sp.add_argument("--limit", type=int, help="use only the first N training samples")
    sp.add_argument("--lambda-reg", type=float, default=0.0)
    sp.add_argument("--delta", type=float, default=2 / 255)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--detach-intervals", action="store_true")
    sp.add_argument("--rgr-agg", choices=train.AGGREGATIONS, default="sum")
    sp.add_argument("--metrics-csv")
    sp.add_argument("--output", required=True, help="trained model manifest")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="empirical lower bound on the output variation")
    common(sp)
    sp.add_argument("--delta", type=float, required=True)
    sp.add_argument("--steps", type=int, default=40)
    sp.add_argument("--restarts", type=int, default=3)
    sp.add_argument("--step-size", type=float, default=0.25, help="fraction of delta per step")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--images")
    sp.add_argument("--labels")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--samples", type=int, default=10000, help="sampling draws when no dataset is given")
    sp.add_argument("--box", type=float, nargs=2, default=(0.0, 1.0), metavar=("LO", "HI"))
    sp.add_argument("--witness", help="write witnesses to this .npz file")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the regularizer gradient")
    common(sp)
    sp.add_argument("--delta", type=float, required=True)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--detach-intervals", action="store_true")
    sp.add_argument("--rgr-agg", choices=train.AGGREGATIONS, default="sum")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("lower", help="write the lowered (linear/relu/add/sub) model")
    sp.add_argument("model")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_lower)

    sp = sub.add_parser("inspect", help="graph summary and validation")
    common(sp)
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("init", help="write a freshly initialized fully connected model")
    sp.add_argument("output")
    sp.add_argument("--sizes", type=int, nargs="+", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    sp.set_defaults(func=cmd_init)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"globcert: {e}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, ModelFormatError, GraphError, UsageError, ValueError, IndexError) as e:
        print(f"globcert: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
