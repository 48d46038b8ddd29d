"""Command-line entry point: ``pcn {train,eval,trace,reconstruct,flops,gradcheck}``.

Exit codes: 0 success, 1 usage, 2 data/IO, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

log = logging.getLogger("pcn")


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


ARCHES = ["A", "B", "C", "D", "E"]
DATASETS = ["mnist", "cifar10", "cifar100"]


def _common_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir", help="dataset root (default: $PCN_DATA_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcn", description="Deep predictive coding networks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    # defaults are None so that a config file can fill them in
    t = sub.add_parser("train", help="train a plain CNN or a PCN")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--arch", choices=ARCHES)
    t.add_argument("--dataset", choices=DATASETS)
    t.add_argument("--cycles", type=int, help="recursive cycles T")
    t.add_argument("--plain", action="store_const", const=True, help="feedforward-only model")
    t.add_argument("--tied", action="store_const", const=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--subset", type=int, dest="subset_size", help="first N training images")
    t.add_argument("--epochs", type=int)
    t.add_argument("--optimizer", choices=["adam", "sgd"])
    t.add_argument("--lr", type=float)
    t.add_argument("--milestones", type=lambda s: tuple(int(v) for v in s.split(",") if v),
                   help="comma-separated epochs at which the lr drops 10x")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--deterministic", action="store_const", const=True)
    t.add_argument("--repeats", type=int, default=1, help="train N derived seeds")
    t.add_argument("--out", dest="out_dir")
    _common_data(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--cycles", type=int, help="override the trained T")
    e.add_argument("--dataset", choices=DATASETS)
    e.add_argument("--split", choices=["test", "train"], default="test")
    e.add_argument("--subset", type=int)
    e.add_argument("--out")
    _common_data(e)

    tr = sub.add_parser("trace", help="per-cycle probabilities and error energies")
    tr.add_argument("checkpoint")
    tr.add_argument("--index", type=int, default=0, help="test image index")
    tr.add_argument("--cycles", type=int)
    tr.add_argument("--dataset", choices=DATASETS)
    tr.add_argument("--normalized", action="store_true", help="variance-normalized energies")
    tr.add_argument("--out", required=True)
    _common_data(tr)

    r = sub.add_parser("reconstruct", help="write top-down reconstructions as PGM/PPM")
    r.add_argument("checkpoint")
    r.add_argument("--index", type=int, action="append", help="test image index (repeatable)")
    r.add_argument("--cycles", type=int)
    r.add_argument("--dataset", choices=DATASETS)
    r.add_argument("--out", required=True)
    _common_data(r)

    f = sub.add_parser("flops", help="FLOP accounting table")
    f.add_argument("--arch", choices=ARCHES, required=True)
    f.add_argument("--cycles", type=int, default=0)
    f.add_argument("--tied", action="store_true")
    f.add_argument("--input-size", type=int, default=32)
    f.add_argument("--input-channels", type=int, default=3)
    f.add_argument("--classes", type=int, default=10)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--arch", choices=ARCHES, default="E")
    g.add_argument("--cycles", type=int, default=1)
    g.add_argument("--plain", action="store_true")
    g.add_argument("--tied", action="store_true")
    g.add_argument("--dataset", choices=DATASETS, default="mnist")
    g.add_argument("--samples", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--precision", choices=["32", "64"], default="32")
    g.add_argument("--threshold", type=float, help="default 1e-2 (32-bit) / 1e-5 (64-bit)")
    return parser


# --------------------------------------------------------------- commands


def _echo_config(out: Path, d: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(d, indent=2, sort_keys=True, default=str))


def resolve_train_config(args: argparse.Namespace):
    from pcn.train import TrainConfig

    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(base, dict):
            raise UsageError("config file must hold a JSON object")
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    if base.get("out_dir") is None:
        base["out_dir"] = "runs/" + _run_name(base)
    try:
        return TrainConfig.from_dict(base)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _run_name(d: dict) -> str:
    kind = "plain" if d.get("plain") else f"pcn{d.get('cycles', 1)}" + ("t" if d.get("tied") else "")
    return f"{d.get('arch', 'E')}-{kind}-{d.get('dataset', 'mnist')}-s{d.get('seed', 0)}"


def cmd_train(args) -> int:
    from pcn import train

    cfg = resolve_train_config(args)
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if args.repeats == 1:
        ckpt, metrics = train.train_run(cfg)
        print(f"{cfg.model_name}: final test accuracy {metrics.final_test_acc:.4f} "
              f"(best {metrics.best_test_acc:.4f} at epoch {metrics.best_epoch})"
              if metrics.epoch else f"{cfg.model_name}: initialized, no epochs run")
        print(f"artifacts in {cfg.out_dir}")
        return EXIT_OK
    res = train.repeat_runs(cfg, args.repeats)
    _echo_config(Path(cfg.out_dir), {**cfg.to_dict(), "repeats": args.repeats, "seeds": res.seeds})
    summary = {"model": res.name, "seeds": res.seeds, "accuracies": res.accuracies,
               "error_cell": res.table_cell()}
    (Path(cfg.out_dir) / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"{res.name}  error % best(mean±std): {res.table_cell()}")
    return EXIT_OK


def _dataset_of(ckpt, override: str | None) -> str:
    if override:
        return override
    name = ckpt.metadata.get("train_config", {}).get("dataset")
    if name:
        return name
    cfg = ckpt.config
    if cfg.input_channels == 1:
        return "mnist"
    return "cifar100" if cfg.num_classes == 100 else "cifar10"


def _load_checkpoint(path: str):
    from pcn.train import Checkpoint

    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    try:
        return Checkpoint.load(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise FileNotFoundError(f"{p}: unreadable checkpoint ({exc})") from exc


def _test_split(ckpt, args):
    from pcn import datasets

    train_split, test_split = datasets.load(_dataset_of(ckpt, args.dataset), args.data_dir)
    return train_split, test_split


def cmd_eval(args) -> int:
    from pcn import train

    ckpt = _load_checkpoint(args.checkpoint)
    train_split, test_split = _test_split(ckpt, args)
    split = (test_split if args.split == "test" else train_split).subset(args.subset)
    acc, loss = train.evaluate(ckpt, split, args.cycles)
    T = args.cycles if args.cycles is not None else ckpt.cycles
    name = ckpt.name if args.cycles is None else f"{ckpt.name} @ T={T}"
    print(f"{name}: {args.split} accuracy {acc:.4f}  error {100 * (1 - acc):.2f}%  loss {loss:.4f}")
    if args.out:
        out = Path(args.out)
        _echo_config(out, vars(args))
        (out / "eval.json").write_text(json.dumps(
            {"model": ckpt.name, "T": T, "split": args.split, "n": len(split),
             "accuracy": acc, "loss": loss}, indent=2))
    return EXIT_OK


def _image_at(split, index: int) -> np.ndarray:
    if not 0 <= index < len(split):
        raise UsageError(f"image index {index} outside 0..{len(split) - 1}")
    return split.images[index]


def cmd_trace(args) -> int:
    from pcn import analysis

    ckpt = _load_checkpoint(args.checkpoint)
    _, test_split = _test_split(ckpt, args)
    image = _image_at(test_split, args.index)
    trace = analysis.cycle_trace(ckpt, image, args.cycles)
    out = Path(args.out)
    _echo_config(out, vars(args))
    analysis.write_trace_csv(trace, out / "energies.csv", out / "probabilities.csv",
                             args.normalized)
    label = int(test_split.labels[args.index])
    print(f"image {args.index} (label {label})")
    for t, row in enumerate(trace.probabilities):
        print(f"cycle {t}: predicted {int(row.argmax())}  p={row.max():.4f}  "
              f"p(label)={row[label]:.4f}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from pcn import analysis

    ckpt = _load_checkpoint(args.checkpoint)
    _, test_split = _test_split(ckpt, args)
    indices = args.index or [0]
    images = [_image_at(test_split, i) for i in indices]
    out = Path(args.out)
    _echo_config(out, vars(args))
    for i, image in zip(indices, images):
        rec = analysis.reconstruct(ckpt, image, args.cycles, out / f"img{i:05d}")
        print(f"{rec.input_path.name} -> {rec.recon_path.name}  "
              f"||p0-r0||^2={rec.squared_error:.4f}")
    return EXIT_OK


def cmd_flops(args) -> int:
    from pcn import analysis

    if args.cycles < 0:
        raise UsageError("--cycles must be >= 0")
    rep = analysis.count_flops(args.arch, args.tied, args.cycles, args.input_size,
                               args.input_channels, args.classes)
    print(rep.table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from pcn import gradcheck

    dtype = np.float32 if args.precision == "32" else np.float64
    threshold = args.threshold if args.threshold is not None else (
        1e-2 if args.precision == "32" else 1e-5)
    if args.cycles < 0:
        raise UsageError("--cycles must be >= 0")
    rep = gradcheck.check_gradients(args.arch, None if args.plain else args.cycles, args.tied,
                                    args.dataset, args.samples, dtype, args.seed)
    print(rep.table())
    ok = rep.max_rel_error < threshold
    print(f"max relative error {rep.max_rel_error:.3e} {'<' if ok else '>='} {threshold:g}: "
          f"{'PASS' if ok else 'FAIL'}")
    if not ok:
        raise NumericalFailure("gradient check above threshold")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "trace": cmd_trace,
            "reconstruct": cmd_reconstruct, "flops": cmd_flops, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    from pcn import datasets, tensor, train

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command is None:
        build_parser().print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except datasets.DatasetError as exc:
        print(f"data error: {exc}\nhint: put the dataset files under --data-dir or "
              f"${datasets.DATA_DIR_ENV} (see README, 'Datasets')", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (train.TrainingDiverged, tensor.NonFiniteError, NumericalFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
