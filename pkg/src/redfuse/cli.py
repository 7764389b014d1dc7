"""Command line: train, fuse, eval, bench-mem and synth.

Exit codes: 0 ok, 1 usage/config, 2 data/checkpoint, 3 numeric failure.
Errors print a single line ``error[<kind>]: <reason>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .bench import bench_memory
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .dataio import SYNTH_KINDS, DataError, pair_dataset, read_pgm, save_pairs, synth_pairs, write_pgm
from .metrics import MetricsReport, evaluate_triple, viff_scales
from .tensor import ShapeError
from .training import fuse_pair, load_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("redfuse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _run_options(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--t", dest="T", type=int, help="chain length T")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patch", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--precision", choices=("single", "double"))
    p.add_argument("--no-reverse1", dest="reverse1", action="store_false", default=None)
    p.add_argument("--no-reverse2", dest="reverse2", action="store_false", default=None)
    p.add_argument("--no-ddim", dest="ddim", action="store_false", default=None)
    p.add_argument("--synth", choices=SYNTH_KINDS, help="train on synthetic pairs of this kind")
    p.add_argument("--data", help="data root with vis/ and ir/")
    p.add_argument("--out", help="output root")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="redfuse", description="Reversible diffusion fusion of visible/infrared image pairs.")
    p.add_argument("--version", action="version", version=f"redfuse {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write a checkpoint + JSON-lines log")
    _run_options(t)

    f = sub.add_parser("fuse", help="fuse every pair under a data root")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--pad-to-even", action="store_true", help="mirror-pad to the estimator's size multiple, crop after")
    f.add_argument("--no-ddim", dest="ddim", action="store_false", default=None)

    e = sub.add_parser("eval", help="score fused images against their sources")
    e.add_argument("--data", required=True)
    e.add_argument("--fused", required=True, help="directory of fused PGMs (or an output root containing fused/)")
    e.add_argument("--json", help="write the JSON report here ('-' for stdout)")
    e.add_argument("--range", type=int, choices=(1, 255), default=1, help="intensity range for EI/AG/SF")

    b = sub.add_parser("bench-mem", help="peak activation memory and time per step over T and modes")
    _run_options(b)
    b.add_argument("--ts", default="2,4,6,8", help="comma-separated chain lengths")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--json", help="write the report here instead of stdout")

    s = sub.add_parser("synth", help="write synthetic pairs as <out>/vis and <out>/ir")
    s.add_argument("--kind", choices=SYNTH_KINDS, default="complementary-halves")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    keys = ("seed", "T", "steps", "lr", "patch", "batch", "precision", "reverse1", "reverse2", "ddim", "synth", "data", "out")
    cfg = cfg.updated(**{k: getattr(args, k, None) for k in keys})
    if not cfg.synth and not cfg.data:
        raise ConfigError("no training data: pass --data <root> or --synth <kind>")
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    outcome = train(cfg)
    summary = {"steps": cfg.steps, "checkpoint": str(outcome.checkpoint_path), "log": str(outcome.log_path)}
    if outcome.losses:
        summary.update(initial_loss=outcome.losses[0], final_loss=outcome.losses[-1], w=outcome.ws[-1])
    print(json.dumps(summary))
    return EXIT_OK


def cmd_fuse(args) -> int:
    model, _ = load_model(args.checkpoint)
    if args.ddim is not None:
        model = model.with_flags(ddim=args.ddim)
    root = Path(args.data)
    pairs = pair_dataset(root / "vis", root / "ir")
    out = Path(args.out) / "fused"
    for pair in pairs:
        write_pgm(fuse_pair(model, pair, args.pad_to_even), out / f"{pair.name}.pgm")
    print(json.dumps({"fused": len(pairs), "out": str(out)}))
    return EXIT_OK


def _fused_dir(path: Path) -> Path:
    return path / "fused" if (path / "fused").is_dir() else path


def cmd_eval(args) -> int:
    root, fdir = Path(args.data), _fused_dir(Path(args.fused))
    files = sorted(fdir.glob("*.pgm"))
    if not files:
        raise DataError(f"no fused images in {fdir}")
    report = MetricsReport(scale=float(args.range))
    for fp in files:
        vp, ip = root / "vis" / fp.name, root / "ir" / fp.name
        missing = [str(p) for p in (vp, ip) if not p.is_file()]
        if missing:
            raise DataError(f"fused image {fp} has no source pair (missing {', '.join(missing)})")
        v, i, f = read_pgm(vp), read_pgm(ip), read_pgm(fp)
        if not v.shape == i.shape == f.shape:
            raise DataError(f"{fp.name}: shapes differ vis {v.shape[2:]} ir {i.shape[2:]} fused {f.shape[2:]}")
        report.viff_scales = viff_scales(f.shape[2:])
        report.add(evaluate_triple(fp.stem, v, i, f, scale=float(args.range)))
    print(report.to_table())
    if args.json == "-":
        print(report.to_json())
    elif args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_bench_mem(args) -> int:
    cfg = RunConfig() if not args.config else load_config(args.config)
    cfg = cfg.updated(**{k: getattr(args, k, None) for k in ("seed", "T", "patch", "batch", "precision", "ddim", "synth")})
    try:
        ts = tuple(int(x) for x in args.ts.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"--ts must be comma-separated integers, got {args.ts!r}") from None
    if not ts or min(ts) < 2:
        raise UsageError("--ts needs chain lengths >= 2")
    report = json.dumps(bench_memory(cfg, ts, max(1, args.repeats)), indent=2)
    if args.json:
        Path(args.json).write_text(report + "\n")
    else:
        print(report)
    return EXIT_OK


def cmd_synth(args) -> int:
    pairs = synth_pairs(args.kind, args.size, args.count, args.seed)
    save_pairs(pairs, args.out)
    print(json.dumps({"pairs": len(pairs), "out": args.out}))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "fuse": cmd_fuse, "eval": cmd_eval, "bench-mem": cmd_bench_mem, "synth": cmd_synth}


def _fail(kind: str, code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error[{kind}]: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            raise UsageError("missing command (train, fuse, eval, bench-mem, synth)")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        return _fail("usage", EXIT_USAGE, e)
    except (DataError, CheckpointError, ShapeError, OSError) as e:
        return _fail("data", EXIT_DATA, e)
    except (FloatingPointError, ZeroDivisionError) as e:
        return _fail("numeric", EXIT_NUMERIC, e)
    except ValueError as e:
        return _fail("usage", EXIT_USAGE, e)


if __name__ == "__main__":
    sys.exit(main())
