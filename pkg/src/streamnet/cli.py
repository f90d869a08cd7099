"""Command-line entry point: ``streamnet <command> ...``.

Failures exit nonzero and print one JSON line on stderr:
``{"error": "<kind>", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataio, gradcheck, harness, imaging, ppm
from .errors import StreamNetError
from .model import load_checkpoint
from .training import evaluate_counts


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_data_ref(ref: str) -> dataio.Dataset:
    """``synth:k=v,...`` (test split), a CIFAR-10 directory (test batch) or a ``.sndt`` file."""
    if ref.startswith("synth:"):
        opts = dict(kv.split("=", 1) for kv in ref[len("synth:"):].split(",") if kv)
        _, test = dataio.synth_dataset(int(opts.get("n_classes", 4)), int(opts.get("per_class", 10)),
                                       int(opts.get("side", 32)), int(opts.get("seed", 0)))
        return test
    path = Path(ref)
    if path.is_dir():
        return dataio.load_cifar10(path)[1]
    if not path.exists():
        raise FileNotFoundError(f"data reference {ref!r} not found")
    return dataio.load_raw_container(path)


def cmd_train(args) -> int:
    config = harness.ExperimentConfig.from_json(args.config)
    if args.out:
        config = harness.ExperimentConfig.from_dict({**config.to_dict(), "output_dir": args.out})
    result = harness.run_experiment(config)
    _emit({"metrics": str(result.metrics_path), "checkpoint": str(result.checkpoint_path),
           "records": len(result.records)})
    return 0


def cmd_eval(args) -> int:
    spec, state = load_checkpoint(args.checkpoint)
    data = _load_data_ref(args.data)
    noise = None if args.noise is None else imaging.NoiseSpec(args.noise, args.seed)
    acc = evaluate_counts(spec, state, data, noise)
    _emit({"accuracy": acc.value, "correct": acc.correct, "total": acc.total,
           "noise": 0.0 if noise is None else noise.ratio})
    return 0


def cmd_slice(args) -> int:
    image = ppm.read_ppm(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    norm = imaging.normalize(image)
    written = []
    for k, band in enumerate(imaging.make_bands(args.bands)):
        path = out / f"band_{k:02d}.ppm"
        ppm.write_ppm(path, imaging.to_bytes(imaging.slice_image(norm, band)))
        written.append(str(path))
    _emit({"files": written})
    return 0


def cmd_corrupt(args) -> int:
    image = ppm.read_ppm(args.input)
    spec = imaging.NoiseSpec(args.ratio, args.seed)
    out = imaging.corrupt_zero_noise(image, spec)
    ppm.write_ppm(args.out, out)
    _, h, w = image.shape
    _emit({"zeroed_locations": spec.count(h, w), "out": args.out})
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seed=args.seed)
    for r in results:
        _emit({"suite": r.name, "max_rel_error": r.max_rel_error, "passed": r.passed,
               "seconds": round(r.seconds, 3), "skipped_at_kinks": r.skipped})
    return 0 if all(r.passed for r in results) else 1


def cmd_plot(args) -> int:
    csv_path = harness.emit_plot(args.metrics, args.out)
    _emit({"plot": args.out, "csv": str(csv_path)})
    return 0


def cmd_convert(args) -> int:
    if args.to != "sndt":
        raise UsageError(f"unsupported target format {args.to!r}")
    if args.source == "cifar10":
        train, test = dataio.load_cifar10(args.input)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        dataio.write_raw_container(out / "cifar10_train.sndt", train)
        dataio.write_raw_container(out / "cifar10_test.sndt", test)
        _emit({"train": str(out / "cifar10_train.sndt"), "test": str(out / "cifar10_test.sndt")})
    else:
        data = dataio.load_ppm_directory(args.input)
        dataio.write_raw_container(args.out, data)
        _emit({"out": args.out, "samples": len(data), "classes": list(data.class_names)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="streamnet", description="Streaming-network training and evaluation lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run an experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="synth:k=v,... | CIFAR-10 dir | file.sndt")
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("slice", help="write one PPM per intensity band")
    p.add_argument("--input", required=True)
    p.add_argument("--bands", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("corrupt", help="apply seeded zero-noise to a PPM")
    p.add_argument("--input", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="accuracy curves (SVG) + CSV from a metrics file")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("convert", help="convert a dataset to the SNDT container")
    p.add_argument("--from", dest="source", required=True, choices=["cifar10", "imagedir-raw"])
    p.add_argument("--to", default="sndt")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        kind, code = "usage", 2
        message = str(exc)
    except FileNotFoundError as exc:
        kind, code = "missing_file", 1
        message = str(exc)
    except StreamNetError as exc:
        kind, code = exc.kind, 1
        message = str(exc)
    except (ValueError, OSError) as exc:
        kind, code = type(exc).__name__, 1
        message = str(exc)
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
