"""``seqdensity`` command line: one entry point, one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration error, 3 data/artifact error,
4 numerical failure, 1 anything else raised by the suite.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import ExperimentConfig, config_leaves, load_config, parse_leaf, with_overrides
from .errors import SeqDensityError

_LEAVES = dict(config_leaves())
# top-level field names that clash with path arguments
_RENAMED = {"data": "data-kind"}


def _dest(path: str) -> str:
    return "cfg__" + path.replace(".", "__")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON config file (defaults if omitted)")
    grp = parser.add_argument_group("config fields", "override any field of the config file")
    for path, default in _LEAVES.items():
        if path == "schema_version":
            continue
        grp.add_argument(f"--{_RENAMED.get(path, path)}", dest=_dest(path), default=None, metavar="VALUE",
                         help=f"(default {json.dumps(default)})")


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(Path(args.config)) if args.config else ExperimentConfig()
    overrides = {}
    for path, default in _LEAVES.items():
        text = getattr(args, _dest(path), None)
        if text is not None:
            overrides[path] = parse_leaf(path, text, default)
    return with_overrides(cfg, overrides)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqdensity", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic dataset directory")
    _add_config_flags(g)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model; writes checkpoints and a JSONL log")
    _add_config_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")

    d = sub.add_parser("distill", help="re-label the training split with a teacher's beam output")
    _add_config_flags(d)
    d.add_argument("--teacher", required=True, help="teacher checkpoint (.npz)")
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--width", type=int, default=None)

    e = sub.add_parser("evaluate", help="test LL, BLEU, pairwise BLEU, pass counts")
    _add_config_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=["dev", "test"])
    e.add_argument("--speed", action="store_true", help="also time decoding (not reproducible)")
    e.add_argument("--model-id", default=None)

    i = sub.add_parser("infer", help="decode a file of tokenised sources")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--k", type=int, default=1, help="refinement steps (latent models)")
    i.add_argument("--width", type=int, default=4, help="beam width (AR models)")
    i.add_argument("--length-mode", default="predicted", choices=["predicted"])

    c = sub.add_parser("correlate", help="LL vs BLEU correlation tables")
    c.add_argument("--logs", nargs="*", default=[])
    c.add_argument("--reports", nargs="*", default=[])
    c.add_argument("--grouping", default="checkpoints", choices=["checkpoints", "models"])
    c.add_argument("--out", required=True)

    r = sub.add_parser("report", help="summary tables and the quality-diversity figure")
    r.add_argument("--reports", nargs="*", default=[])
    r.add_argument("--table2", default=None, help="JSON correlation grid to format")
    r.add_argument("--out", required=True)

    m = sub.add_parser("matrix", help="run a family x {raw, distilled} grid from a manifest")
    m.add_argument("--manifest", required=True)
    m.add_argument("--root", required=True)
    m.add_argument("--jobs", type=int, default=1, help="cells trained in parallel")
    return p


def run(args: argparse.Namespace) -> int:
    cmd = args.command
    if cmd == "generate-data":
        out = harness.cmd_generate_data(_config(args), Path(args.out))
        print(out)
    elif cmd == "train":
        best = harness.cmd_train(_config(args), Path(args.data), Path(args.out),
                                 resume=not args.no_resume)
        print(best)
    elif cmd == "distill":
        out = harness.cmd_distill(_config(args), Path(args.teacher), Path(args.data),
                                  Path(args.out), args.width)
        print(out)
    elif cmd == "evaluate":
        rep = harness.cmd_evaluate(_config(args), Path(args.checkpoint), Path(args.data),
                                   Path(args.out), args.split, args.speed, args.model_id)
        print(f"test_ll={rep.test_ll:.4f} test_bleu={rep.test_bleu:.2f}")
    elif cmd == "infer":
        n = harness.cmd_infer(Path(args.checkpoint), Path(args.input), Path(args.out), args.k,
                              args.width, args.length_mode)
        print(f"decoded {n} sources")
    elif cmd == "correlate":
        rows = harness.cmd_correlate(Path(args.out), [Path(x) for x in args.logs],
                                     [Path(x) for x in args.reports], args.grouping)
        for row in rows:
            print(row.group, row.n, row.pearson, row.spearman, row.note)
    elif cmd == "report":
        written = harness.cmd_report(Path(args.out), [Path(x) for x in args.reports],
                                     Path(args.table2) if args.table2 else None)
        for name, path in written.items():
            print(f"{name}: {path}")
    elif cmd == "matrix":
        for cell in harness.cmd_matrix(Path(args.manifest), Path(args.root), args.jobs):
            print(cell["name"], "skipped" if cell["skipped"] else "done", cell["dir"])
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except SeqDensityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
