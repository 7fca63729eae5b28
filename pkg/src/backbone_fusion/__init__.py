"""Fusion and agreement analysis for multi-backbone zero-shot classifiers.

The package operates entirely on precomputed embedding stores (a bit-exact
directory format bundling per-backbone image/text embeddings, labels, and
splits), so scoring, calibration, fusion, and analysis are decoupled from
model inference.
"""

from .analyze import (
    CorrectnessMatrix,
    Report,
    VennPartition,
    correctness,
    delta_table,
    emit_report,
    oracle_accuracy,
    venn_partition,
)
from .calibrate import CalibrationResult, apply_temperature, fit_temperature, nll
from .combine import (
    GacConfig,
    GacResult,
    NncModel,
    TrainConfig,
    average_logits,
    combine_with_temperatures,
    gac_search,
    nnc_apply,
    nnc_init,
    nnc_train,
    select_by_confidence,
    vote_top1,
    vote_top3,
)
from .embedstore import (
    BackboneRecord,
    EmbeddingStore,
    Manifest,
    SplitSpec,
    load_store,
    save_store,
    subsample_per_class,
    synth_generate,
)
from .errors import ConfigError, NumericalError, StoreValidationError
from .normalize import (
    NormalizationMode,
    NormalizationStats,
    apply_mode,
    compute_dn_stats,
    dn_score,
    l2_normalize,
)
from .probe import (
    LinearProbe,
    init_from_language_weights,
    load_probe,
    probe_logits,
    save_probe,
    train_probe,
)
from .zeroshot import (
    LogitMatrix,
    PredictionVector,
    accuracy,
    compute_logits,
    entropy,
    predict,
    probabilities,
    softmax,
)

__version__ = "0.1.0"
