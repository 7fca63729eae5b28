"""Orchestration shared by the CLI and the test suite: store -> logits ->
fusion method -> report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import calibrate
from .analyze import CorrectnessMatrix, Report, correctness, oracle_accuracy
from .combine import (
    GacConfig,
    TrainConfig,
    average_logits,
    combine_with_temperatures,
    gac_search,
    nnc_apply,
    nnc_train,
    select_by_confidence,
    vote_top1,
    vote_top3,
)
from .embedstore import EmbeddingStore, subsample_per_class
from .errors import ConfigError
from .normalize import NormalizationMode, prepare_record
from .probe import init_from_language_weights, probe_logits, train_probe
from .zeroshot import (
    LogitMatrix,
    accuracy,
    compute_logits,
    predict,
    probabilities,
)

FUSION_METHODS = ("vote1", "vote3", "conf", "logavg", "cconf", "clogavg", "gac", "nnc")


@dataclass
class DnSettings:
    subset_size: int = 100
    seed: int = 7
    order: str = "l2-first"


def zeroshot_logit_matrices(
    store: EmbeddingStore,
    mode: NormalizationMode,
    dn: DnSettings | None = None,
    dn_candidates: np.ndarray | None = None,
) -> list[LogitMatrix]:
    """Normalize each backbone and score it against its class texts.

    The half-mean statistics, when needed, are estimated from the evaluation
    split's images by default (labels never enter the computation).
    """
    dn = dn or DnSettings()
    if dn_candidates is None:
        dn_candidates = store.splits.test if store.splits.test.size else None
    out = []
    for rec in store.backbones:
        prepared = prepare_record(
            rec,
            mode,
            dn_subset=dn.subset_size,
            dn_seed=dn.seed,
            dn_order=dn.order,
            candidate_indices=dn_candidates,
        )
        out.append(compute_logits(prepared, mode))
    return out


def probe_logit_matrices(
    store: EmbeddingStore, cfg: TrainConfig | None = None
) -> tuple[list[LogitMatrix], list[dict]]:
    """Train one language-initialized probe per backbone and score all samples."""
    cfg = cfg or TrainConfig(learning_rate=1e-3, epochs=100)
    reserved = np.concatenate([store.splits.probe_holdout, store.splits.test])
    matrices, diags = [], []
    for rec in store.backbones:
        probe = init_from_language_weights(rec)
        trained, diag = train_probe(
            probe, rec, store.labels, store.splits.train, cfg, reserved=reserved
        )
        matrices.append(probe_logits(trained, rec))
        diags.append(diag)
    return matrices, diags


def fit_split_for(store: EmbeddingStore, source: str) -> np.ndarray:
    """Zero-shot combiners fit on the train split, probe combiners on the holdout."""
    if source == "zeroshot":
        return store.splits.train
    if source == "probe":
        return store.splits.probe_holdout
    raise ConfigError(f"unknown source {source!r}")


def per_model_temperatures(
    logits: list[LogitMatrix], labels: np.ndarray, fit_split: np.ndarray
) -> list[float]:
    return [
        calibrate.fit_temperature(lm, labels, fit_split).temperature for lm in logits
    ]


def run_fusion(
    store: EmbeddingStore,
    logits: list[LogitMatrix],
    method: str,
    source: str = "zeroshot",
    seed: int = 7,
    shots: int | None = None,
    gac_cfg: GacConfig | None = None,
    nnc_cfg: TrainConfig | None = None,
    nnc_nonneg: bool = False,
    eval_split: np.ndarray | None = None,
) -> Report:
    """Fit one fusion method and evaluate it on the test split."""
    if method not in FUSION_METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {FUSION_METHODS}")
    labels = store.labels
    test = eval_split if eval_split is not None else store.splits.test
    fit_split = fit_split_for(store, source)
    if shots is not None:
        fit_split = subsample_per_class(fit_split, labels, shots, seed)

    per_preds = [predict(lm) for lm in logits]
    per_acc = {
        lm.backbone_name: accuracy(pv, labels, test) for lm, pv in zip(logits, per_preds)
    }
    best_single = max(per_acc.values())
    config: dict = {"source": source, "fit_split_size": int(len(fit_split))}
    if shots is not None:
        config["shots"] = shots

    if method == "vote1":
        fused = vote_top1(per_preds)
    elif method == "vote3":
        fused = vote_top3([probabilities(lm) for lm in logits])
    elif method == "conf":
        fused = select_by_confidence([probabilities(lm) for lm in logits])
    elif method == "logavg":
        fused = average_logits(logits)
    elif method == "cconf":
        temps = per_model_temperatures(logits, labels, fit_split)
        fused = select_by_confidence([probabilities(lm) for lm in logits], temps)
        config["temperatures"] = temps
    elif method == "clogavg":
        temps = per_model_temperatures(logits, labels, fit_split)
        fused = average_logits(logits, temps)
        config["temperatures"] = temps
    elif method == "gac":
        cfg = gac_cfg or GacConfig(seed=seed)
        result = gac_search(logits, labels, fit_split, cfg)
        fused, _ = combine_with_temperatures(logits, result.temperatures)
        config["temperatures"] = result.temperatures.tolist()
        config["fit_accuracy"] = result.best_fitness
        config["generations"] = cfg.generations
    else:  # nnc
        cfg = nnc_cfg or TrainConfig(seed=seed)
        model = nnc_train(store, logits, fit_split, cfg, nonneg=nnc_nonneg)
        preds, _ = nnc_apply(model, store, logits, split=test)
        fused_acc = float((preds.preds == np.asarray(labels, dtype=np.int64)[test]).mean())
        config["epochs"] = cfg.epochs
        config["learning_rate"] = cfg.learning_rate
        if nnc_nonneg:
            config["nonneg"] = True
        return Report(
            method=method,
            normalization=logits[0].mode.value,
            per_backbone_accuracy=per_acc,
            fused_accuracy=fused_acc,
            best_single=best_single,
            delta=fused_acc - best_single,
            config=config,
            seed=seed,
        )

    fused_acc = accuracy(fused, labels, test)
    return Report(
        method=method,
        normalization=logits[0].mode.value,
        per_backbone_accuracy=per_acc,
        fused_accuracy=fused_acc,
        best_single=best_single,
        delta=fused_acc - best_single,
        config=config,
        seed=seed,
    )


def correctness_on_split(
    logits: list[LogitMatrix], labels: np.ndarray, split: np.ndarray
) -> CorrectnessMatrix:
    preds = [predict(lm) for lm in logits]
    return correctness(preds, labels, split, [lm.backbone_name for lm in logits])


def zeroshot_report(
    logits: list[LogitMatrix], labels: np.ndarray, split: np.ndarray
) -> dict:
    """Per-backbone accuracies plus the oracle upper bound on one split."""
    per_acc = {
        lm.backbone_name: accuracy(predict(lm), labels, split) for lm in logits
    }
    cm = correctness_on_split(logits, labels, split)
    return {
        "per_backbone_accuracy": dict(sorted(per_acc.items())),
        "best_single": max(per_acc.values()),
        "oracle_accuracy": oracle_accuracy(cm),
        "split_size": int(len(split)),
    }
