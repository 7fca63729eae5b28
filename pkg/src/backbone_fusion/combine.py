"""Fusion methods: voting, confidence selection, logit averaging, and the
two temperature-learning approaches (genetic search and a per-sample linear
temperature network).

Temperature combination forms a fused distribution

    p(y | x) = softmax(sum_b t_b * z_b)

where t_b weighs backbone b's logit row.  The genetic search finds one
global weight vector; the temperature network maps each sample's
concatenated (unit-normalized) image embeddings to its own weight vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedstore import EmbeddingStore
from .errors import NumericalError
from .normalize import l2_normalize
from .zeroshot import LogitMatrix, PredictionVector, entropy, softmax


@dataclass
class GacConfig:
    """Genetic-search settings; defaults sized to run in seconds at small scale."""

    population: int = 64
    generations: int = 200
    mutation_rate: float = 0.2
    mutation_sigma: float = 0.1
    tournament_size: int = 3
    elitism: int = 2
    bounds: tuple[float, float] = (0.0, 10.0)
    seed: int = 7

    def validate(self) -> None:
        if self.population < self.elitism + 2:
            raise ValueError("population must be >= elitism + 2")
        if not self.bounds[0] < self.bounds[1]:
            raise ValueError("bounds must satisfy lo < hi")
        if self.tournament_size < 1 or self.generations < 1:
            raise ValueError("tournament_size and generations must be >= 1")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must be in [0, 1]")
        if self.mutation_sigma <= 0.0:
            raise ValueError("mutation_sigma must be > 0")


@dataclass
class GacResult:
    temperatures: np.ndarray        # (B,) best chromosome found
    best_fitness: float             # its fit-split accuracy
    fitness_trace: list[float]      # best-so-far accuracy per generation


@dataclass
class TrainConfig:
    """Gradient-training settings shared by the temperature network and probes."""

    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 256
    seed: int = 7
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class NncModel:
    """Linear map from concatenated image embeddings to per-backbone weights.

    With ``nonneg`` the raw outputs pass through softplus, forcing the
    produced temperatures positive; otherwise they may go negative, which
    lets the network invert a systematically wrong backbone.
    """

    weight: np.ndarray      # (B, sum of input dims)
    bias: np.ndarray        # (B,)
    input_dims: list[int]
    nonneg: bool = False


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow for large positive x
    return np.logaddexp(0.0, x)


def _stack(logits: list[LogitMatrix]) -> np.ndarray:
    arrs = [lm.values for lm in logits]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValueError(f"logit matrices disagree in shape: {sorted(shapes)}")
    return np.stack(arrs)


def vote_top1(preds: list[PredictionVector]) -> PredictionVector:
    """Majority vote over top-1 predictions.

    Tied labels resolve to the one backed by the highest single-backbone
    confidence; residual ties go to the lowest class index.
    """
    votes = np.stack([p.preds for p in preds])        # (B, N)
    confs = np.stack([p.confidence for p in preds])   # (B, N)
    n = votes.shape[1]
    out_pred = np.empty(n, dtype=np.int64)
    out_conf = np.empty(n, dtype=np.float64)
    for i in range(n):
        labels, counts = np.unique(votes[:, i], return_counts=True)
        tied = labels[counts == counts.max()]
        best_label, best_conf = None, -1.0
        for label in tied:  # ascending label order: lowest index wins residual ties
            conf = confs[votes[:, i] == label, i].max()
            if conf > best_conf:
                best_label, best_conf = label, conf
        out_pred[i] = best_label
        out_conf[i] = best_conf
    return PredictionVector(preds=out_pred, confidence=out_conf)


def vote_top3(probs: list[np.ndarray]) -> PredictionVector:
    """Position-weighted vote over each backbone's three most likely classes.

    Ranks 1..3 contribute weights 3, 2, 1.  Ties on total weight resolve by
    the higher summed probability, then the lowest class index.
    """
    stacked = np.stack(probs)  # (B, N, C)
    n_backbones, n, c = stacked.shape
    if c < 3:
        raise ValueError(f"top-3 voting needs at least 3 classes, got {c}")
    # argsort on (-p, class index) gives rank order with lowest-index ties
    order = np.argsort(-stacked, axis=2, kind="stable")[:, :, :3]  # (B, N, 3)
    weights = np.zeros((n, c))
    for rank, w in enumerate((3.0, 2.0, 1.0)):
        for b in range(n_backbones):
            np.add.at(weights, (np.arange(n), order[b, :, rank]), w)
    summed_probs = stacked.sum(axis=0)  # (N, C)
    # lexicographic argmax: weight, then summed probability, then lowest index
    out_pred = np.empty(n, dtype=np.int64)
    for i in range(n):
        row = weights[i]
        tied = np.flatnonzero(row == row.max())
        if len(tied) > 1:
            tied = tied[summed_probs[i, tied] == summed_probs[i, tied].max()]
        out_pred[i] = tied[0]
    out_conf = summed_probs[np.arange(n), out_pred] / n_backbones
    return PredictionVector(preds=out_pred, confidence=out_conf)


def select_by_confidence(
    probs: list[np.ndarray], temps: list[float] | None = None
) -> PredictionVector:
    """Adopt the prediction of the lowest-entropy backbone per sample.

    With per-model temperatures, each backbone's distribution is first
    recalibrated as softmax(log p / t), which equals rescaling its original
    logits since softmax is shift-invariant per row.  Entropy ties go to the
    lowest backbone index.
    """
    stacked = np.stack(probs)  # (B, N, C)
    if temps is not None:
        if len(temps) != stacked.shape[0]:
            raise ValueError("one temperature per backbone required")
        stacked = np.stack(
            [softmax(np.log(stacked[b]) / temps[b]) for b in range(stacked.shape[0])]
        )
    entropies = entropy(stacked)             # (B, N)
    chosen = entropies.argmin(axis=0)        # lowest backbone index on ties
    n = stacked.shape[1]
    rows = stacked[chosen, np.arange(n)]     # (N, C)
    preds = rows.argmax(axis=1)
    return PredictionVector(
        preds=preds.astype(np.int64), confidence=rows[np.arange(n), preds]
    )


def average_logits(
    logits: list[LogitMatrix], temps: list[float] | None = None
) -> PredictionVector:
    """Mean of (optionally temperature-divided) logit rows, then argmax."""
    stacked = _stack(logits)
    if temps is not None:
        if len(temps) != stacked.shape[0]:
            raise ValueError("one temperature per backbone required")
        stacked = stacked / np.asarray(temps, dtype=np.float64)[:, None, None]
    mean = stacked.mean(axis=0)
    preds = mean.argmax(axis=1)
    probs = softmax(mean)
    n = mean.shape[0]
    return PredictionVector(
        preds=preds.astype(np.int64), confidence=probs[np.arange(n), preds]
    )


def combine_with_temperatures(
    logits: list[LogitMatrix], temps: np.ndarray
) -> tuple[PredictionVector, np.ndarray]:
    """Fuse logits as softmax(sum_b t_b * z_b).

    ``temps`` is either a global (B,) vector or an (N, B) matrix of
    per-sample weights.  Returns the fused predictions and the (N, C)
    probability matrix.
    """
    stacked = _stack(logits)  # (B, N, C)
    temps = np.asarray(temps, dtype=np.float64)
    if not np.isfinite(temps).all():
        raise ValueError("temperatures must be finite")
    if temps.ndim == 1:
        if temps.shape[0] != stacked.shape[0]:
            raise ValueError(f"expected {stacked.shape[0]} temperatures, got {temps.shape[0]}")
        combined = np.einsum("b,bnc->nc", temps, stacked)
    elif temps.ndim == 2:
        if temps.shape != (stacked.shape[1], stacked.shape[0]):
            raise ValueError(
                f"per-sample temperatures must be (N, B) = {(stacked.shape[1], stacked.shape[0])}, "
                f"got {temps.shape}"
            )
        combined = np.einsum("nb,bnc->nc", temps, stacked)
    else:
        raise ValueError("temperatures must be a vector or an (N, B) matrix")
    probs = softmax(combined)
    preds = combined.argmax(axis=1)
    n = combined.shape[0]
    pv = PredictionVector(
        preds=preds.astype(np.int64), confidence=probs[np.arange(n), preds]
    )
    return pv, probs


def _fused_accuracies(
    population: np.ndarray, stacked: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Accuracy of each chromosome's fused argmax (softmax-free)."""
    combined = np.einsum("pb,bnc->pnc", population, stacked)
    return (combined.argmax(axis=2) == labels).mean(axis=1)


def gac_search(
    logits: list[LogitMatrix],
    labels: np.ndarray,
    fit_split: np.ndarray,
    cfg: GacConfig | None = None,
) -> GacResult:
    """Real-valued genetic search for a global temperature vector.

    Tournament selection, uniform crossover (per-gene coin flip), Gaussian
    mutation clipped to the bounds, and elitism; fitness is fused accuracy on
    the fit split.  Deterministic given the seed; returns the all-time best
    chromosome, whose trace is non-decreasing by construction.
    """
    cfg = cfg or GacConfig()
    cfg.validate()
    fit_split = np.asarray(fit_split, dtype=np.int64)
    if fit_split.size == 0:
        raise ValueError("fit split is empty")
    stacked = _stack(logits)[:, fit_split]          # (B, n, C)
    y = np.asarray(labels, dtype=np.int64)[fit_split]
    n_backbones = stacked.shape[0]
    lo, hi = cfg.bounds
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))

    population = rng.uniform(lo, hi, size=(cfg.population, n_backbones))
    fitness = _fused_accuracies(population, stacked, y)
    best_idx = int(fitness.argmax())
    best_temps = population[best_idx].copy()
    best_fitness = float(fitness[best_idx])
    trace = [best_fitness]

    for _ in range(cfg.generations):
        order = np.argsort(-fitness, kind="stable")
        next_population = [population[order[i]].copy() for i in range(cfg.elitism)]
        while len(next_population) < cfg.population:
            parents = []
            for _ in range(2):
                entrants = rng.integers(0, cfg.population, size=cfg.tournament_size)
                parents.append(population[entrants[np.argmax(fitness[entrants])]])
            child = np.where(rng.random(n_backbones) < 0.5, parents[0], parents[1])
            mutate = rng.random(n_backbones) < cfg.mutation_rate
            child = np.clip(
                child + mutate * rng.normal(0.0, cfg.mutation_sigma, n_backbones), lo, hi
            )
            next_population.append(child)
        population = np.asarray(next_population)
        fitness = _fused_accuracies(population, stacked, y)
        gen_best = int(fitness.argmax())
        if fitness[gen_best] > best_fitness:
            best_fitness = float(fitness[gen_best])
            best_temps = population[gen_best].copy()
        trace.append(best_fitness)

    return GacResult(temperatures=best_temps, best_fitness=best_fitness, fitness_trace=trace)


def nnc_inputs(store: EmbeddingStore) -> np.ndarray:
    """Concatenate every backbone's unit-normalized image embeddings row-wise."""
    return np.concatenate(
        [l2_normalize(rec.image_embeddings) for rec in store.backbones], axis=1
    )


def nnc_init(store: EmbeddingStore, nonneg: bool = False) -> NncModel:
    """Zero weights and a uniform bias: the untrained model averages logits.

    The averaging identity holds under ``nonneg`` too, since softplus maps
    the uniform bias to a (different) uniform positive weight per backbone.
    """
    dims = [rec.image_embeddings.shape[1] for rec in store.backbones]
    n_backbones = len(dims)
    return NncModel(
        weight=np.zeros((n_backbones, sum(dims))),
        bias=np.full(n_backbones, 1.0 / n_backbones),
        input_dims=dims,
        nonneg=nonneg,
    )


def nnc_forward_backward(
    w: np.ndarray,
    b: np.ndarray,
    xb: np.ndarray,
    zb: np.ndarray,
    yb: np.ndarray,
    nonneg: bool = False,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch-mean cross-entropy of the fused softmax plus analytic gradients.

    ``xb`` is (m, sum D) concatenated embeddings, ``zb`` is (B, m, C) logits,
    ``yb`` the integer labels.
    """
    m = len(yb)
    raw = xb @ w.T + b                         # (m, B)
    temps = _softplus(raw) if nonneg else raw
    fused = np.einsum("mb,bmc->mc", temps, zb)
    probs = softmax(fused)
    loss = float(-np.log(probs[np.arange(m), yb]).mean())
    grad_fused = probs.copy()
    grad_fused[np.arange(m), yb] -= 1.0
    grad_fused /= m                            # (m, C)
    grad_temps = np.einsum("mc,bmc->mb", grad_fused, zb)
    if nonneg:
        grad_temps = grad_temps * _sigmoid(raw)  # softplus' = sigmoid
    return loss, grad_temps.T @ xb, grad_temps.sum(axis=0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    expx = np.exp(x[~positive])
    out[~positive] = expx / (1.0 + expx)
    return out


def nnc_train(
    store: EmbeddingStore,
    logits: list[LogitMatrix],
    fit_split: np.ndarray,
    cfg: TrainConfig | None = None,
    nonneg: bool = False,
) -> NncModel:
    """Train the per-sample temperature network with Adam on cross-entropy.

    The forward pass is t_i = W x_i + b followed by the fused softmax over
    sum_b t_ib * z_ib.  Shuffling, batching and updates all derive from the
    seeded Philox stream, so training is bit-reproducible.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    fit_split = np.asarray(fit_split, dtype=np.int64)
    if fit_split.size == 0:
        raise ValueError("fit split is empty")
    stacked = _stack(logits)                       # (B, N, C)
    x_all = nnc_inputs(store)                      # (N, sum D)
    y = np.asarray(store.labels, dtype=np.int64)
    model = nnc_init(store, nonneg=nonneg)
    if x_all.shape[1] != model.weight.shape[1]:
        raise ValueError("embedding dims do not match the model input")

    w, b = model.weight, model.bias
    beta1, beta2 = cfg.adam_betas
    m_w = np.zeros_like(w)
    v_w = np.zeros_like(w)
    m_b = np.zeros_like(b)
    v_b = np.zeros_like(b)
    step = 0
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(fit_split))
        for start in range(0, len(order), cfg.batch_size):
            idx = fit_split[order[start : start + cfg.batch_size]]
            loss, grad_w, grad_b = nnc_forward_backward(
                w, b, x_all[idx], stacked[:, idx], y[idx], nonneg=nonneg
            )
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}"
                )

            step += 1
            for param, grad, m1, v1 in ((w, grad_w, m_w, v_w), (b, grad_b, m_b, v_b)):
                m1 *= beta1
                m1 += (1.0 - beta1) * grad
                v1 *= beta2
                v1 += (1.0 - beta2) * grad * grad
                m_hat = m1 / (1.0 - beta1**step)
                v_hat = v1 / (1.0 - beta2**step)
                param -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

    return model


def nnc_apply(
    model: NncModel,
    store: EmbeddingStore,
    logits: list[LogitMatrix],
    split: np.ndarray | None = None,
) -> tuple[PredictionVector, np.ndarray]:
    """Predict with per-sample temperatures over ``split`` (default: all rows).

    Returns the fused predictions (aligned with the split order) and the
    per-sample temperature matrix.
    """
    stacked = _stack(logits)
    x_all = nnc_inputs(store)
    if x_all.shape[1] != model.weight.shape[1]:
        raise ValueError("embedding dims do not match the model input")
    if split is None:
        split = np.arange(stacked.shape[1])
    split = np.asarray(split, dtype=np.int64)
    temps = x_all[split] @ model.weight.T + model.bias   # (n, B)
    if model.nonneg:
        temps = _softplus(temps)
    restricted = [
        LogitMatrix(values=lm.values[split], backbone_name=lm.backbone_name, mode=lm.mode)
        for lm in logits
    ]
    preds, _ = combine_with_temperatures(restricted, temps)
    return preds, temps
