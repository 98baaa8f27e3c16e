"""``cheffctl`` command-line entry point."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from cheff import pipeline
from cheff.config import load_config
from cheff.errors import CheffError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CHECKPOINT, EXIT_NUMERIC = 0, 2, 3, 4, 5


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {text} is not a u64")
    return value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {' '.join(message.split())}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the same flags are accepted before and after the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="INI configuration file")
    p.add_argument("--seed", type=_u64, default=d(None), help="run seed (overrides [run] seed)")
    p.add_argument("--out", default=d("cheff-out"), help="output / checkpoint directory")
    p.add_argument("--keep-intermediate", action="store_true", default=d(False),
                   help="also write intermediate low-resolution images")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cheffctl", parents=[_global_flags(False)],
                                     description="Cascaded latent diffusion for single-channel images.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="<subcommand>")
    common = [_global_flags(True)]

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=common)

    p = add("build-index", "scan dataset roots into an index JSON")
    p.add_argument("--source", action="append", default=[], metavar="NAME=DIR", help="dataset root (repeatable)")
    p.add_argument("--index-out", help="index path (default <out>/index.json)")

    for name, help_ in (("train-ae", "train the autoencoder"), ("train-sdm", "train the latent prior"),
                        ("train-sr", "train the super-resolution model"),
                        ("finetune-sr", "fine-tune SR on decoded-latent conditioning")):
        p = add(name, help_)
        p.add_argument("--index", required=True, help="index JSON")
        if name == "train-sdm":
            p.add_argument("--conditional", action="store_true", default=None,
                           help="condition on report text through a jointly trained encoder")
        if name == "finetune-sr":
            p.add_argument("--steps", type=int, help="override [sr] finetune_steps")

    p = add("sample", "run the full cascade from noise")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--prompt")

    p = add("reconstruct", "evaluate a reconstruction workflow")
    p.add_argument("--index", required=True)
    p.add_argument("--workflow", required=True, choices=pipeline.WORKFLOWS)
    p.add_argument("--limit", type=int, help="use only the first N images")

    p = add("inpaint", "regenerate a masked region")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True, help="binary PGM; white marks the region to synthesize")
    p.add_argument("--space", choices=("pixel", "latent"), default="pixel")
    p.add_argument("--prompt")

    p = add("metrics", "compare two directories of PGM images")
    p.add_argument("--reference", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--mode", choices=("pairwise", "distribution"), default="pairwise")

    p = add("diagnose-schedule", "check that the SDM schedule ends in (near) pure noise")
    p.add_argument("--threshold", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--probe", help="image whose terminal latent is decoded (needs an AE checkpoint)")
    return parser


def _emit(pairs) -> None:
    for item in pairs:
        key, value = item if isinstance(item, tuple) else item.split("=", 1)
        print(f"{key}={value}")


def run(args: argparse.Namespace) -> None:
    cfg = load_config(args.config).with_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "build-index":
        target = Path(args.index_out) if args.index_out else out / "index.json"
        index = pipeline.build_index_cmd(args.source, target)
        _emit([("index", str(target)), ("records", str(len(index.records)))]
              + [(f"count.{k}", str(v)) for k, v in index.counts.items()])
    elif cmd == "train-ae":
        _emit(pipeline.train_ae(cfg, args.index, out).lines())
    elif cmd == "train-sdm":
        _emit(pipeline.train_sdm(cfg, args.index, out, args.conditional).lines())
    elif cmd == "train-sr":
        _emit(pipeline.train_sr(cfg, args.index, out).lines())
    elif cmd == "finetune-sr":
        _emit(pipeline.finetune_sr(cfg, args.index, out, args.steps).lines())
    elif cmd == "sample":
        manifest = pipeline.sample_cascade(cfg, out, args.n, args.prompt, args.keep_intermediate)
        _emit([("manifest", str(out / "manifest.json"))] + [("output", o) for o in manifest["outputs"]]
              + [("intermediate", o) for o in manifest["intermediates"]])
    elif cmd == "reconstruct":
        _emit(pipeline.reconstruct(cfg, args.index, args.workflow, out, args.limit).lines())
    elif cmd == "inpaint":
        _emit(pipeline.inpaint_cmd(cfg, args.image, args.mask, args.space, out, args.prompt).items())
    elif cmd == "metrics":
        _emit(pipeline.metrics_cmd(args.reference, args.candidate, args.mode))
    elif cmd == "diagnose-schedule":
        _emit(pipeline.diagnose_schedule(cfg, out, args.threshold, args.beta_end, args.probe))


def exit_code_for(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, CheffError):
        return exc.exit_code, exc.code
    if isinstance(exc, (NumericError, FloatingPointError)):
        return EXIT_NUMERIC, "numeric"
    if isinstance(exc, OSError):
        return EXIT_IO, "io"
    if isinstance(exc, (ValueError, KeyError)):
        return EXIT_CONFIG, "invalid-input"
    raise exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with np.errstate(all="ignore"):
            run(args)
    except (CheffError, OSError, ValueError, KeyError, FloatingPointError) as exc:
        code, name = exit_code_for(exc)
        detail = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {name}: {detail}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
