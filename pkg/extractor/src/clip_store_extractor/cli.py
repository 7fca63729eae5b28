"""Command-line entry point for store extraction."""

from __future__ import annotations

import argparse
import logging
import sys

from .datasets import DatasetError
from .encoders import EncoderError
from .extract import ExtractJob, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clip-store-extract",
        description="Encode an image dataset with pretrained contrastive "
        "backbones and write an embedding store.",
    )
    parser.add_argument(
        "--dataset",
        required=True,
        help="dataset directory (class subdirectories, optionally under train/ "
        "and test/), or a name under $CLIP_STORE_DATASETS",
    )
    parser.add_argument(
        "--backbones",
        required=True,
        help="comma-separated backbone ids, e.g. rn50,rn101,vit-b-32,vit-b-16,"
        "vit-l-14 or mock:<dim>[:<seed>]",
    )
    parser.add_argument(
        "--template",
        default="an image of {label}",
        help="prompt template with a {label} slot",
    )
    parser.add_argument("--out", required=True, help="store output directory")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--split-seed", type=int, default=7)
    parser.add_argument("--test-fraction", type=float, default=0.5)
    parser.add_argument("--holdout-fraction", type=float, default=0.1)
    parser.add_argument(
        "--fail-on-error",
        action="store_true",
        help="abort on undecodable images instead of skipping them",
    )
    parser.add_argument("--overwrite", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    job = ExtractJob(
        dataset=args.dataset,
        backbones=[b.strip() for b in args.backbones.split(",") if b.strip()],
        template=args.template,
        out=args.out,
        batch_size=args.batch_size,
        device=args.device,
        split_seed=args.split_seed,
        test_fraction=args.test_fraction,
        holdout_fraction=args.holdout_fraction,
        fail_on_error=args.fail_on_error,
        overwrite=args.overwrite,
    )
    try:
        out = extract(job)
    except (ValueError, DatasetError, EncoderError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote store to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
