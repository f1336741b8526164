"""``multiamp`` command line.

Exit codes: 0 success, 1 runtime failure (including missing upstream
artifacts), 2 configuration or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, desk_config, load_config
from .evaluation import ONE_TO_ONE, VARIANTS
from .virtual_amps import AmpConfigError
from . import pipeline

log = logging.getLogger("multiamp")

COMMANDS = ("render-dataset", "train-encoder", "train-generator", "eval", "zero-shot", "infer",
            "export-embeddings", "query-index", "demo")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config (overlaid on the desk-scale defaults)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", help="run directory (overrides the config and MULTIAMP_OUT)")
    p.add_argument("--force", action="store_true", help="overwrite stage outputs made with another config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiamp", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _common(p)
        if name == "train-generator":
            p.add_argument("--variant", action="append", choices=list(VARIANTS) + [ONE_TO_ONE],
                           help="variant to train (repeatable; default: all configured)")
            p.add_argument("--amp", action="append", help="amp for one-to-one training (repeatable)")
        elif name == "infer":
            p.add_argument("--input", required=True, help="clean input WAV")
            p.add_argument("--output", required=True, help="wet output WAV")
            p.add_argument("--variant", choices=list(VARIANTS) + [ONE_TO_ONE])
            g = p.add_mutually_exclusive_group(required=True)
            g.add_argument("--amp", help="condition on a seen amp id")
            g.add_argument("--reference", help="condition on a reference WAV (zero-shot)")
            p.add_argument("--strategy", choices=["direct", "nearest", "mean"], default="direct")
        elif name == "query-index":
            p.add_argument("--reference", required=True, help="reference WAV to look up")
        elif name == "export-embeddings":
            p.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    return parser


def _resolve(args):
    cfg = load_config(args.config, base=desk_config())
    if args.seed is not None:
        cfg.seed = cfg.encoder.seed = cfg.train.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg, Path(cfg.out)


def run(args) -> int:
    cfg, root = _resolve(args)
    root.mkdir(parents=True, exist_ok=True)
    pipeline._save_config(cfg, root, args.command)
    cmd = args.command
    if cmd == "render-dataset":
        print(pipeline.render_dataset(cfg, root, args.force))
    elif cmd == "train-encoder":
        print(pipeline.train_encoder_stage(cfg, root, args.force))
    elif cmd == "train-generator":
        chosen = args.variant or list(cfg.experiment.variants) + ([ONE_TO_ONE] if cfg.experiment.one_to_one else [])
        variants = [v for v in chosen if v != ONE_TO_ONE]
        amps = None
        if ONE_TO_ONE in chosen:
            amps = args.amp
        elif args.variant:
            amps = []
        for d in pipeline.train_generators(cfg, root, variants, amps, args.force):
            print(d)
    elif cmd == "eval":
        for k, v in pipeline.evaluate(cfg, root, args.force).items():
            print(f"{k}: {v}")
        print((root / "eval" / "table1.txt").read_text())
        print((root / "eval" / "table2.txt").read_text())
    elif cmd == "zero-shot":
        path = pipeline.zero_shot_stage(cfg, root, args.force)
        print(path.with_suffix(".txt").read_text())
    elif cmd == "infer":
        print(pipeline.infer(cfg, root, args.input, args.output, args.variant, args.amp,
                             args.reference, args.strategy))
    elif cmd == "export-embeddings":
        parts = ("train", "val", "test") if args.split == "all" else (args.split,)
        print(pipeline.export_embeddings(cfg, root, parts))
    elif cmd == "query-index":
        print(json.dumps(pipeline.query_index(cfg, root, args.reference), indent=1))
    elif cmd == "demo":
        summary = pipeline.demo(cfg, root, args.force)
        print((root / "eval" / "table1.txt").read_text())
        print((root / "eval" / "table2.txt").read_text())
        print(json.dumps(summary["embedding"], indent=1))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return run(args)
    except (ConfigError, AmpConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the exit code is the contract
        log.exception("failed")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
