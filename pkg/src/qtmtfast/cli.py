"""Command-line entry point: encode, collect, train, eval-model, bench.

Exit status is 0 on success, 2 for usage errors (bad flags, missing files,
malformed dimensions) and 1 for failures while working. Errors are reported
as one line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

USAGE_ERROR = 2
RUNTIME_ERROR = 1
PROG = "qtmtfast"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _qp_list(text: str) -> list[int]:
    try:
        qps = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None
    if not qps:
        raise argparse.ArgumentTypeError("empty Qp list")
    return qps


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive: {v}")
    return v


def _add_input(p):
    p.add_argument("--input", required=True, help="raw 8-bit 4:2:0 file, or a .pgm picture")
    p.add_argument("--width", type=_positive, help="luma width of a raw input")
    p.add_argument("--height", type=_positive, help="luma height of a raw input")
    p.add_argument("--frames", type=_positive, default=None, help="encode at most this many frames")
    p.add_argument("--ctu", type=int, default=128, choices=(32, 64, 128), help="CTU size (default 128)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog=PROG, description="Fast QTMT partition search with learned depth caps "
                                        "and history-ordered split modes.")
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("encode", help="encode a clip and write a JSON report")
    _add_input(p)
    p.add_argument("--qp", type=int, required=True, help="quantization parameter")
    p.add_argument("--mode", choices=("oracle", "ddff", "ppbe", "full"), default="oracle",
                   help="which pruning stages to arm (default oracle)")
    p.add_argument("--model", help="depth model weights, or 'default' for the bundled ones (needed by ddff and full)")
    p.add_argument("--report", help="write the JSON report here (default: stdout)")
    p.add_argument("--recon", help="write the reconstruction as raw 4:2:0 here")
    p.add_argument("--seed", type=int, default=0, help="recorded in the report")
    p.add_argument("--closed-loop", action="store_true", help="predict from reconstructed CTUs")
    p.add_argument("--trees", action="store_true", help="include partition trees in the report")
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock fields")

    p = sub.add_parser("collect", help="build a training dataset from exhaustive encodes")
    _add_input(p)
    p.add_argument("--qps", type=_qp_list, default=[22, 27, 32, 37], help="comma-separated Qps")
    p.add_argument("--out", required=True, help="dataset file to write")

    p = sub.add_parser("train", help="train a depth model on a dataset")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=_positive, default=50)
    p.add_argument("--iterations", type=_positive, default=128, help="mini-batches per epoch")
    p.add_argument("--batch-size", type=_positive, default=256)
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")

    p = sub.add_parser("eval-model", help="confusion matrix and per-depth scores of a model")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--model", required=True, help="weights file")
    p.add_argument("--split", choices=("all", "test"), default="all",
                   help="score every record or only the held-out fifth")
    p.add_argument("--seed", type=int, default=0, help="split seed used for --split test")
    p.add_argument("--json", help="also write the scores here")

    p = sub.add_parser("bench", help="exhaustive anchor against the accelerated encoder at several Qps")
    _add_input(p)
    p.add_argument("--model", help="depth model, or 'default'; without one the anchor is compared with itself")
    p.add_argument("--qps", type=_qp_list, default=[22, 27, 32, 37], help="comma-separated Qps")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--csv", help="write per-run rows (qp, mode, time, j, psnr, rate) here")
    p.add_argument("--repeats", type=_positive, default=1, help="timing repeats per encode (median kept)")
    p.add_argument("--jobs", type=_positive, default=1, help="encodes run concurrently")
    p.add_argument("--seed", type=int, default=0, help="recorded in the report")
    p.add_argument("--closed-loop", action="store_true", help="predict from reconstructed CTUs")
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock fields from the report")
    return ap


def _require_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _load_input(args):
    from .frame_io import load_frames

    _require_file(args.input, "input")
    if not args.input.lower().endswith(".pgm"):
        if args.width is None or args.height is None:
            raise UsageError("raw input needs --width and --height")
        w, h = args.width, args.height
        frame_bytes = w * h + 2 * ((w + 1) // 2) * ((h + 1) // 2)
        size = os.path.getsize(args.input)
        if size < frame_bytes or size % frame_bytes:
            raise UsageError(f"{args.input}: size {size} is not a whole number of {w}x{h} frames")
    return lambda: load_frames(args.input, args.width, args.height, args.frames)


def _validate(args):
    """Check flags and files; returns a callable doing the work."""
    if getattr(args, "model", None) == "default":
        from .ddff import DEFAULT_MODEL_PATH
        args.model = DEFAULT_MODEL_PATH
    if args.command in ("encode", "collect", "bench"):
        loader = _load_input(args)
    if args.command == "encode":
        if args.mode in ("ddff", "full"):
            if not args.model:
                raise UsageError(f"--mode {args.mode} needs --model")
            _require_file(args.model, "model")
        if not 0 <= args.qp <= 63:
            raise UsageError(f"--qp must lie in [0, 63], got {args.qp}")
        return lambda: _encode(args, loader())
    if args.command == "collect":
        return lambda: _collect(args, loader())
    if args.command == "train":
        _require_file(args.data, "dataset")
        if not args.lr > 0:
            raise UsageError("--lr must be positive")
        return lambda: _train(args)
    if args.command == "eval-model":
        _require_file(args.data, "dataset")
        _require_file(args.model, "model")
        return lambda: _eval(args)
    if args.command == "bench":
        if args.model:
            _require_file(args.model, "model")
        if len(args.qps) < 4:
            raise UsageError("--qps needs at least 4 values for the rate comparison")
        return lambda: _bench(args, loader())
    raise UsageError(f"unknown command {args.command}")


def _write_text(path, text):
    if path:
        with open(path, "w") as f:
            f.write(text + "\n")
    else:
        print(text)


def _encode(args, frames):
    from .frame_io import write_yuv
    from .pipeline import EncodeConfig, encode_sequence

    cfg = EncodeConfig(qp=args.qp, ctu_size=args.ctu, mode=args.mode, model_path=args.model,
                       seed=args.seed, closed_loop=args.closed_loop, keep_trees=args.trees)
    rep = encode_sequence(frames, cfg)
    _write_text(args.report, rep.dumps(timing=not args.no_timing))
    if args.recon:
        write_yuv(args.recon, [r[:rep.height, :rep.width] for r in rep.recon])
    if args.report:
        print(f"{len(rep.frames)} frames, j {rep.total_j:.1f}, psnr {rep.mean_psnr:.2f} dB, "
              f"rate {rep.total_rate:.0f} bits")


def _collect(args, frames):
    from .bench import collect_dataset

    n = collect_dataset(frames, args.qps, args.out, args.ctu)
    print(f"wrote {n} records to {args.out}")


def _train(args):
    from . import ddff

    maps, labels = ddff.read_dataset(args.data)
    cfg = ddff.TrainConfig(batch_size=args.batch_size, iterations=args.iterations,
                           epochs=args.epochs, learning_rate=args.lr)
    res = ddff.train(maps, labels, cfg, seed=args.seed)
    ddff.save_model(args.out, res.model)
    print(f"train accuracy {res.train_accuracy:.4f}, test accuracy {res.test_accuracy:.4f}, "
          f"wrote {args.out}")


def _format_matrix(cm) -> str:
    head = "true\\pred " + " ".join(f"{d:>8d}" for d in range(1, cm.shape[1] + 1))
    rows = [f"{i + 1:>9d} " + " ".join(f"{v:>8d}" for v in row) for i, row in enumerate(cm)]
    return "\n".join([head] + rows)


def _eval(args):
    from . import ddff
    from .metrics import classification_metrics, confusion_matrix

    maps, labels = ddff.read_dataset(args.data)
    model = ddff.load_model(args.model)
    if args.split == "test":
        _, idx = ddff.split_indices(len(labels), args.seed)
        maps, labels = maps[idx], labels[idx]
    if len(labels) == 0:
        raise ValueError("no records to evaluate")
    pred = ddff.predict_depths(model, maps)
    cm = confusion_matrix(labels, pred)
    scores = classification_metrics(cm)
    print(_format_matrix(cm))
    print(f"{'depth':>5} {'precision':>9} {'recall':>9} {'specificity':>11} {'accuracy':>9}")
    for d in range(cm.shape[0]):
        print(f"{d + 1:>5d} {scores['precision'][d]:>9.3f} {scores['recall'][d]:>9.3f} "
              f"{scores['specificity'][d]:>11.3f} {scores['accuracy'][d]:>9.3f}")
    print(f"{'mean':>5} {scores['mean_precision']:>9.3f} {scores['mean_recall']:>9.3f} "
          f"{scores['mean_specificity']:>11.3f} {scores['mean_accuracy']:>9.3f}")
    print(f"exact-depth accuracy {scores['exact_accuracy']:.4f} over {scores['total']} records, "
          f"within one depth {scores['within_one']:.4f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"confusion": cm.tolist(), **scores}, f, indent=1, sort_keys=True)


def _bench(args, frames):
    from .bench import dumps_report, run_bench, write_csv

    rep = run_bench(frames, args.qps, model_path=args.model, ctu_size=args.ctu,
                    repeats=args.repeats, jobs=args.jobs, closed_loop=args.closed_loop)
    rep["config"]["seed"] = args.seed
    if args.report:
        _write_text(args.report, dumps_report(rep, timing=not args.no_timing))
    if args.csv:
        write_csv(args.csv, rep, timing=not args.no_timing)
    s = rep["summary"]
    for a in rep["runs"]:
        line = f"qp {a['qp']:>2} {a['mode']:>6}: j {a['j']:.1f} psnr {a['psnr']:.3f} rate {a['rate_bits']:.0f}"
        if not args.no_timing:
            line += f" time {a['time_s']:.2f}s"
        print(line)
    if not args.no_timing:
        print(f"ATS {s['ats_time_pct']:.2f}%")
    print(f"work saving {s['ats_work_pct']:.2f}%")
    print(f"BDBR {s['bdbr_pct']:.3f}%")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        work = _validate(args)
    except SystemExit as e:  # --help
        return e.code
    except UsageError as e:
        print(f"{PROG}: error: {e}", file=sys.stderr)
        return USAGE_ERROR
    try:
        work()
    except KeyboardInterrupt:
        print(f"{PROG}: interrupted", file=sys.stderr)
        return RUNTIME_ERROR
    except Exception as e:  # one-line diagnostic instead of a traceback
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"{PROG}: {type(e).__name__}: {msg}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
