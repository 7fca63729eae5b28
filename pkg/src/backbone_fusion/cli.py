"""Command-line entry point.

One executable with subcommands covering the whole pipeline: synthesize a
store, score backbones, train probes, calibrate temperatures, fuse
predictions, and analyze agreement.  All randomness flows through explicit
--seed flags; identical flags on an identical store produce byte-identical
output files.

Exit codes: 0 success, 2 configuration error, 3 store validation error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import calibrate
from .analyze import Report, delta_table, emit_report, oracle_accuracy, venn_partition
from .combine import GacConfig, TrainConfig
from .embedstore import load_store, save_store, synth_generate
from .errors import (
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_STORE,
    ConfigError,
    NumericalError,
    StoreValidationError,
)
from .normalize import NormalizationMode
from .pipeline import (
    DnSettings,
    FUSION_METHODS,
    correctness_on_split,
    probe_logit_matrices,
    run_fusion,
    zeroshot_logit_matrices,
    zeroshot_report,
)
from .probe import init_from_language_weights, save_probe, train_probe
from .zeroshot import accuracy, predict

THREADS_ENV_VAR = "BACKBONE_FUSION_THREADS"


def _add_store_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--store", required=True, help="embedding store directory")


def _add_norm_args(p: argparse.ArgumentParser) -> None:
    # the half-mean flags default to None so that passing them alongside a
    # regime that never uses them can be flagged as inconsistent
    p.add_argument("--norm", default="l2", choices=[m.value for m in NormalizationMode])
    p.add_argument("--dn-subset", type=int, default=None, help="image subset size for the half-mean estimate (default 100)")
    p.add_argument("--dn-seed", type=int, default=None, help="subset draw seed (default 7)")
    p.add_argument("--dn-order", default=None, choices=["l2-first", "dn-first"])


def _add_output_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output file path")
    p.add_argument("--format", default="json", choices=["json", "csv"])


def _parse_noise(text: str, count: int) -> list[float]:
    """Either a comma list with one value per backbone or a lo:hi ramp."""
    if ":" in text:
        lo, hi = (float(part) for part in text.split(":", 1))
        return np.linspace(lo, hi, count).tolist()
    values = [float(part) for part in text.split(",")]
    if len(values) == 1:
        return values * count
    if len(values) != count:
        raise ConfigError(f"expected {count} noise values, got {len(values)}")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backbone-fusion",
        description="Fuse and analyze multi-backbone zero-shot classifiers "
        "over precomputed embedding stores.",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"cap worker threads (also via {THREADS_ENV_VAR}); modules are "
        "deterministic regardless",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic store")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--backbones", type=int, default=5)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--shared-noise", type=float, default=0.3)
    p.add_argument("--backbone-noise", default="0.8:1.2", help="comma list or lo:hi ramp")
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--holdout-fraction", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("zeroshot", help="per-backbone accuracies and the oracle bound")
    _add_store_arg(p)
    p.add_argument("--backbone", default="all")
    _add_norm_args(p)
    p.add_argument("--split", default="test", choices=["train", "probe_holdout", "test"])
    _add_output_args(p)

    p = sub.add_parser("probe", help="train linear probes on the train split")
    _add_store_arg(p)
    p.add_argument("--backbone", default="all")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out", required=True, help="directory for probe files")

    p = sub.add_parser("calibrate", help="fit per-backbone temperatures by NLL")
    _add_store_arg(p)
    _add_norm_args(p)
    p.add_argument("--split", default="train", choices=["train", "probe_holdout", "test"])
    _add_output_args(p)

    p = sub.add_parser("combine", help="fit and evaluate a fusion method")
    _add_store_arg(p)
    p.add_argument("--source", default="zeroshot", choices=["zeroshot", "probe"])
    _add_norm_args(p)
    p.add_argument("--method", required=True, choices=list(FUSION_METHODS))
    p.add_argument("--shots", type=int, default=None, help="samples per class for the fit split")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--nnc-epochs", type=int, default=50)
    p.add_argument("--nnc-lr", type=float, default=1e-4)
    p.add_argument("--nnc-batch-size", type=int, default=256)
    p.add_argument("--probe-epochs", type=int, default=100)
    p.add_argument("--probe-lr", type=float, default=1e-3)
    p.add_argument("--gac-population", type=int, default=64)
    p.add_argument("--gac-generations", type=int, default=200)
    _add_output_args(p)

    p = sub.add_parser("oracle", help="oracle accuracy over the backbones")
    _add_store_arg(p)
    _add_norm_args(p)
    p.add_argument("--split", default="test", choices=["train", "probe_holdout", "test"])
    _add_output_args(p)

    p = sub.add_parser("venn", help="exact-subset partition of correct predictions")
    _add_store_arg(p)
    _add_norm_args(p)
    p.add_argument("--split", default="test", choices=["train", "probe_holdout", "test"])
    _add_output_args(p)

    p = sub.add_parser("report", help="aggregate fused-minus-best deltas across reports")
    p.add_argument("--inputs", nargs="+", required=True, help="report JSON files")
    _add_output_args(p)

    return parser


def _resolve_threads(args: argparse.Namespace) -> int:
    value = args.threads
    if value is None:
        env = os.environ.get(THREADS_ENV_VAR)
        value = int(env) if env else 1
    if value < 1:
        raise ConfigError(f"--threads must be >= 1, got {value}")
    return value


def _dn_settings(args: argparse.Namespace) -> DnSettings:
    mode = NormalizationMode.from_flag(args.norm)
    given = {
        name: value
        for name, value in (
            ("--dn-subset", args.dn_subset),
            ("--dn-seed", args.dn_seed),
            ("--dn-order", args.dn_order),
        )
        if value is not None
    }
    if given and not mode.uses_dn:
        raise ConfigError(
            f"{', '.join(sorted(given))} only apply to the dn / dn+l2 regimes, "
            f"not --norm {mode.value}"
        )
    subset = args.dn_subset if args.dn_subset is not None else 100
    if subset < 1:
        raise ConfigError(f"--dn-subset must be >= 1, got {subset}")
    return DnSettings(
        subset_size=subset,
        seed=args.dn_seed if args.dn_seed is not None else 7,
        order=args.dn_order if args.dn_order is not None else "l2-first",
    )


def _select_backbones(store, which: str):
    if which == "all":
        return store
    names = store.backbone_names
    if which not in names:
        raise ConfigError(f"unknown backbone {which!r}; store has {names}")
    # narrow the store view to the single requested backbone
    from dataclasses import replace

    manifest = store.manifest
    keep = [b for b in manifest.backbones if b["name"] == which]
    narrowed = replace(store, backbones=[store.backbone(which)])
    narrowed.manifest = replace(manifest, backbones=keep)
    return narrowed


def _split_indices(store, name: str) -> np.ndarray:
    idx = getattr(store.splits, name)
    if idx.size == 0:
        raise ConfigError(f"split {name!r} is empty")
    return idx


def _logits_for(args: argparse.Namespace, store, mode: NormalizationMode):
    if getattr(args, "source", "zeroshot") == "probe":
        if mode is not NormalizationMode.L2:
            raise ConfigError(
                "probes consume unit-normalized inputs; use --norm l2 with --source probe"
            )
        cfg = TrainConfig(
            learning_rate=args.probe_lr, epochs=args.probe_epochs, seed=args.seed
        )
        matrices, _ = probe_logit_matrices(store, cfg)
        return matrices
    return zeroshot_logit_matrices(store, mode, _dn_settings(args))


def cmd_synth(args: argparse.Namespace) -> None:
    noise = _parse_noise(args.backbone_noise, args.backbones)
    store = synth_generate(
        seed=args.seed,
        num_backbones=args.backbones,
        num_samples=args.samples,
        num_classes=args.classes,
        dim=args.dim,
        per_backbone_noise=noise,
        shared_noise=args.shared_noise,
        test_fraction=args.test_fraction,
        holdout_fraction=args.holdout_fraction,
    )
    save_store(store, args.out, overwrite=args.overwrite)
    print(f"wrote store with {args.backbones} backbones, {args.samples} samples to {args.out}")


def cmd_zeroshot(args: argparse.Namespace) -> None:
    store = _select_backbones(load_store(args.store), args.backbone)
    mode = NormalizationMode.from_flag(args.norm)
    logits = zeroshot_logit_matrices(store, mode, _dn_settings(args))
    split = _split_indices(store, args.split)
    payload = zeroshot_report(logits, store.labels, split)
    payload["normalization"] = mode.value
    payload["split"] = args.split
    emit_report(payload, args.format, args.out)
    print(f"best single {payload['best_single']:.4f}, oracle {payload['oracle_accuracy']:.4f}")


def cmd_probe(args: argparse.Namespace) -> None:
    store = _select_backbones(load_store(args.store), args.backbone)
    cfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    reserved = np.concatenate([store.splits.probe_holdout, store.splits.test])
    for rec in store.backbones:
        probe = init_from_language_weights(rec)
        trained, diag = train_probe(
            probe, rec, store.labels, store.splits.train, cfg, reserved=reserved
        )
        save_probe(trained, args.out)
        print(f"{rec.name}: train accuracy {diag['final_train_accuracy']:.4f}")


def cmd_calibrate(args: argparse.Namespace) -> None:
    store = load_store(args.store)
    mode = NormalizationMode.from_flag(args.norm)
    logits = zeroshot_logit_matrices(store, mode, _dn_settings(args))
    split = _split_indices(store, args.split)
    temps = {}
    for lm in logits:
        result = calibrate.fit_temperature(lm, store.labels, split)
        temps[lm.backbone_name] = {
            "temperature": result.temperature,
            "nll": result.final_nll,
        }
    emit_report({"normalization": mode.value, "split": args.split, "temperatures": temps},
                args.format, args.out)
    for name, info in sorted(temps.items()):
        print(f"{name}: t={info['temperature']:.4f} nll={info['nll']:.4f}")


def cmd_combine(args: argparse.Namespace) -> None:
    store = load_store(args.store)
    mode = NormalizationMode.from_flag(args.norm)
    logits = _logits_for(args, store, mode)
    report = run_fusion(
        store,
        logits,
        method=args.method,
        source=args.source,
        seed=args.seed,
        shots=args.shots,
        gac_cfg=GacConfig(
            population=args.gac_population,
            generations=args.gac_generations,
            seed=args.seed,
        ),
        nnc_cfg=TrainConfig(
            learning_rate=args.nnc_lr,
            epochs=args.nnc_epochs,
            batch_size=args.nnc_batch_size,
            seed=args.seed,
        ),
    )
    emit_report(report, args.format, args.out)
    print(
        f"{args.method}: fused {report.fused_accuracy:.4f} vs best {report.best_single:.4f} "
        f"(delta {report.delta:+.4f})"
    )


def cmd_oracle(args: argparse.Namespace) -> None:
    store = load_store(args.store)
    mode = NormalizationMode.from_flag(args.norm)
    logits = zeroshot_logit_matrices(store, mode, _dn_settings(args))
    split = _split_indices(store, args.split)
    cm = correctness_on_split(logits, store.labels, split)
    per_acc = {
        lm.backbone_name: accuracy(predict(lm), store.labels, split) for lm in logits
    }
    payload = {
        "normalization": mode.value,
        "split": args.split,
        "per_backbone_accuracy": dict(sorted(per_acc.items())),
        "best_single": max(per_acc.values()),
        "oracle_accuracy": oracle_accuracy(cm),
    }
    emit_report(payload, args.format, args.out)
    print(f"oracle {payload['oracle_accuracy']:.4f} vs best {payload['best_single']:.4f}")


def cmd_venn(args: argparse.Namespace) -> None:
    store = load_store(args.store)
    mode = NormalizationMode.from_flag(args.norm)
    logits = zeroshot_logit_matrices(store, mode, _dn_settings(args))
    split = _split_indices(store, args.split)
    cm = correctness_on_split(logits, store.labels, split)
    venn = venn_partition(cm)
    emit_report(venn, args.format, args.out)
    print(f"{len(venn.counts)} non-empty subsets, {venn.none_correct} samples missed by all")


def cmd_report(args: argparse.Namespace) -> None:
    reports = []
    for path in args.inputs:
        try:
            reports.append(Report.from_dict(json.loads(Path(path).read_text("utf-8"))))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from exc
    aggregate = delta_table(reports)
    emit_report(aggregate, args.format, args.out)
    print(
        f"mean delta {aggregate['mean_delta']:+.4f}, "
        f"max {aggregate['max_delta']:+.4f}, min {aggregate['min_delta']:+.4f}"
    )


_COMMANDS = {
    "synth": cmd_synth,
    "zeroshot": cmd_zeroshot,
    "probe": cmd_probe,
    "calibrate": cmd_calibrate,
    "combine": cmd_combine,
    "oracle": cmd_oracle,
    "venn": cmd_venn,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _resolve_threads(args)
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StoreValidationError as exc:
        print(f"store error: {exc}", file=sys.stderr)
        return EXIT_STORE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
