"""Command line: ``laganet {synth,train,embed,eval,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import checkpoint
from .config import Config, load_config
from .data import Manifest, synth_generate
from .errors import ConfigError, DataError, LagaError, UsageError

log = logging.getLogger("laganet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="laganet", description="Multi-branch attention re-identification at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic identity dataset")
    s.add_argument("--out", required=True, help="output directory (manifest.tsv + images/)")
    s.add_argument("--config", help="JSON config; its 'synth' section is used")
    s.add_argument("--n-identities", type=int)
    s.add_argument("--images-per-identity", type=int)
    s.add_argument("--cameras", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--protocol", choices=["closed", "open"])

    t = sub.add_parser("train", help="train a model on the manifest's train split")
    t.add_argument("--config")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="per-epoch metrics CSV")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--epochs", type=int, help="run at most this many more epochs")

    e = sub.add_parser("embed", help="write flip-averaged test embeddings")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--split", choices=["train", "query", "gallery"], help="restrict to one split")
    e.add_argument("--no-flip", action="store_true", help="skip flip averaging")

    v = sub.add_parser("eval", help="score query embeddings against a gallery")
    v.add_argument("--query", required=True)
    v.add_argument("--gallery", required=True)
    grp = v.add_mutually_exclusive_group()
    grp.add_argument("--no-camera-filter", dest="camera_filter", action="store_false", default=None)
    grp.add_argument("--camera-filter", dest="camera_filter", action="store_true")
    v.add_argument("--report", required=True)
    v.add_argument("--repeats", type=int, default=1,
                   help="re-draw one gallery image per identity this many times and average")
    v.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="train and score the cumulative branch variants")
    a.add_argument("--config")
    a.add_argument("--manifest", required=True)
    a.add_argument("--variants", default="global,+local,+CAM,+SAM-RPE")
    a.add_argument("--seeds", default="0")
    a.add_argument("--epochs", type=int)
    a.add_argument("--out", help="write the table as JSON")
    return p


def _cmd_synth(args) -> None:
    cfg = load_config(args.config)
    spec = cfg.synth
    overrides = {
        "n_identities": args.n_identities,
        "images_per_identity": args.images_per_identity,
        "n_cameras": args.cameras,
        "seed": args.seed,
        "protocol": args.protocol,
    }
    spec = replace(spec, **{k: v for k, v in overrides.items() if v is not None})
    manifest = synth_generate(spec, args.out)
    print(f"wrote {len(manifest)} images to {Path(args.out) / 'manifest.tsv'}")


def _cmd_train(args) -> None:
    from .training import train

    cfg = load_config(args.config)
    manifest = Manifest.load(args.manifest)
    _, history = train(manifest, cfg, out=args.out, log_path=args.log, resume=args.resume, epochs=args.epochs)
    if history:
        print(f"trained {len(history)} epochs; final loss {history[-1].loss_total:.6f}")


def _model_from_checkpoint(path, cfg: Config):
    from .model import LAGANet
    from .nn import Module

    state = checkpoint.load(path)
    classifiers = [v for k, v in state.items() if k.startswith("head.") and k.endswith(".classifier.w")]
    if not classifiers:
        raise ConfigError(f"{path} has no classifier weights")
    model = LAGANet(replace(cfg.model, n_classes=classifiers[0].shape[1]))
    Module.load_state_dict(model, {k: v for k, v in state.items() if not k.startswith(("optim.", "train."))})
    return model


def _cmd_embed(args) -> None:
    from .evaluation import EmbeddingRecord, embed_images, write_embeddings

    cfg = load_config(args.config)
    if args.no_flip:
        cfg.eval = replace(cfg.eval, flip_average=False)
    manifest = Manifest.load(args.manifest)
    model = _model_from_checkpoint(args.ckpt, cfg)
    splits = [args.split] if args.split else ["train", "query", "gallery"]
    records = []
    for split in splits:
        rows = manifest.split(split)
        if not rows:
            continue
        vectors = embed_images(model, manifest.load_images(split), cfg)
        records += [EmbeddingRecord(vec, s.identity, s.camera, s.path) for s, vec in zip(rows, vectors)]
    write_embeddings(args.out, records)
    print(f"wrote {len(records)} embeddings to {args.out}")


def _cmd_eval(args) -> None:
    from .evaluation import evaluate, evaluate_repeated, read_embeddings

    queries, gallery = read_embeddings(args.query), read_embeddings(args.gallery)
    if not gallery:
        raise DataError("gallery is empty")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if args.repeats == 1:
        report = evaluate(queries, gallery, args.camera_filter)
    else:
        report = evaluate_repeated(queries + gallery, args.repeats, args.seed, args.camera_filter)
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))


def _cmd_ablate(args) -> None:
    from .evaluation import ablate, format_table

    try:
        seeds = [int(s) for s in args.seeds.split(",") if s]
    except ValueError as exc:
        raise UsageError(f"--seeds must be comma-separated integers: {exc}") from exc
    cfg = load_config(args.config)
    manifest = Manifest.load(args.manifest)
    variants = [v for v in args.variants.split(",") if v]
    rows = ablate(manifest, cfg, variants, seeds, epochs=args.epochs)
    print(format_table(rows))
    if args.out:
        Path(args.out).write_text(json.dumps([asdict(r) for r in rows], indent=2) + "\n")


COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "embed": _cmd_embed, "eval": _cmd_eval, "ablate": _cmd_ablate}


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (LagaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
