"""Drift scoring: how far a model's BN running statistics sit from live batch statistics.

Per layer, every (sample, channel) pair contributes the distance between the
activation normalized by the batch's own statistics and the same activation
normalized by the stored running estimates. Layer scores average those terms;
the model score averages layers. Three distances are supported: cosine on the
per-sample spatial vectors, and two closed forms (Wasserstein, Gaussian KL)
evaluated on the statistics alone.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .batchnorm import BatchStats, BnLayerState, batch_stats, bn_forward, source_normalize, target_normalize
from .linalg import as_tensor4, refine_low_rank

__all__ = [
    "Metric",
    "DriftConfig",
    "DriftReport",
    "DriftError",
    "NoBnLayersError",
    "cosine_distance",
    "layer_drift",
    "wasserstein_layer_drift",
    "gaussian_kl_drift",
    "aggregate",
    "mde_score",
    "score_layer_inputs",
    "score_stats",
    "fake_batches",
    "fakedata_report",
    "normalize_by_fakedata",
    "minibatch_stream",
]

# Norm threshold below which a channel vector has no usable direction and the
# cosine term is skipped (removed from the averaging denominator).
_NORM_FLOOR = 1e-12
# Variance floor keeping the closed forms finite when eps = 0 meets a
# degenerate (zero-variance) channel.
_VAR_FLOOR = 1e-24


class DriftError(RuntimeError):
    """Raised when drift scoring cannot proceed (bad stream, incompatible model)."""


class NoBnLayersError(DriftError):
    """Raised when asked to score a model that has no BN layers."""


class Metric(enum.Enum):
    COSINE = "cosine"
    WASSERSTEIN = "wasserstein"
    GAUSSIAN_KL = "gaussian_kl"

    @classmethod
    def coerce(cls, value) -> "Metric":
        if isinstance(value, cls):
            return value
        name = str(value).strip().lower().replace("-", "_")
        if name == "kl":
            name = "gaussian_kl"
        for m in cls:
            if m.value == name:
                return m
        raise ValueError(f"unknown metric {value!r}; expected cosine, wasserstein, or kl")


@dataclass(frozen=True)
class DriftConfig:
    """Scoring configuration.

    truncation_ratio None disables low-rank refinement; when set, each
    sample's C x (H*W) view is replaced by its rank-truncated reconstruction
    before batch statistics and target-side vectors are formed. The BN
    forward pass (source side) always sees the raw activations.
    """

    metric: Metric = Metric.COSINE
    truncation_ratio: float | None = None
    batch_size: int = 64
    iterations: int = 8
    layer_weights: tuple[float, ...] | None = None
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric.coerce(self.metric))
        if self.truncation_ratio is not None and not 0.0 < self.truncation_ratio <= 1.0:
            raise ValueError(f"truncation_ratio must lie in (0, 1], got {self.truncation_ratio}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be at least 1, got {self.iterations}")
        if self.layer_weights is not None:
            w = tuple(float(v) for v in self.layer_weights)
            if any(not 0.0 <= v <= 1.0 for v in w):
                raise ValueError("layer weights must lie in [0, 1]")
            object.__setattr__(self, "layer_weights", w)
        if self.eps < 0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")


@dataclass(frozen=True)
class DriftReport:
    """Per-layer drift scores and their weighted average."""

    per_layer: tuple[float, ...]
    aggregate: float
    config: DriftConfig
    model_id: str
    dataset_id: str
    channels_skipped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "per_layer", tuple(float(v) for v in self.per_layer))
        weights = self.config.layer_weights
        if weights is None:
            weights = (1.0,) * len(self.per_layer)
        recomputed = aggregate(self.per_layer, weights)
        if abs(recomputed - self.aggregate) > 1e-12:
            raise ValueError("aggregate does not match the weighted mean of per-layer scores")


def cosine_distance(a, b) -> float | None:
    """Cosine distance (1 - cos)/2 in [0, 1]; None when either vector has no direction."""
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    if av.shape != bv.shape:
        raise ValueError(f"length mismatch: {av.shape[0]} vs {bv.shape[0]}")
    if av.shape[0] < 1:
        raise ValueError("vectors must have length >= 1")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na < _NORM_FLOOR or nb < _NORM_FLOOR:
        return None
    cos = float(av @ bv) / (na * nb)
    return float(np.clip((1.0 - cos) / 2.0, 0.0, 1.0))


def _cosine_terms(x: np.ndarray, s: BnLayerState, eps: float, r_tr: float | None):
    """Summed per-(sample, channel) cosine distances for one batch.

    Returns (sum of distances, number of counted pairs, number skipped).
    """
    xt = refine_low_rank(x, r_tr) if r_tr is not None else x
    stats = batch_stats(xt)
    target = target_normalize(xt, stats, eps)
    source = source_normalize(bn_forward(x, s), s)
    b, c = x.shape[:2]
    tv = target.reshape(b, c, -1)
    sv = source.reshape(b, c, -1)
    nt = np.linalg.norm(tv, axis=2)
    ns = np.linalg.norm(sv, axis=2)
    valid = (nt >= _NORM_FLOOR) & (ns >= _NORM_FLOOR)
    dots = np.einsum("bcv,bcv->bc", tv, sv)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(valid, dots / (nt * ns), 0.0)
    dist = np.clip((1.0 - cos) / 2.0, 0.0, 1.0)
    return float(dist[valid].sum()), int(valid.sum()), int(b * c - valid.sum())


def _stats_terms(stats: BatchStats, s: BnLayerState, eps: float, metric: Metric) -> np.ndarray:
    """Per-channel closed-form terms for one batch's statistics."""
    if stats.channels != s.channels:
        raise ValueError(f"channel mismatch: stats have {stats.channels}, state has {s.channels}")
    run_var = np.maximum(s.running_var + eps, _VAR_FLOOR)
    bat_var = np.maximum(stats.var + eps, _VAR_FLOOR)
    if metric is Metric.WASSERSTEIN:
        terms = ((stats.mean - s.running_mean) ** 2 + (np.sqrt(bat_var) - np.sqrt(run_var)) ** 2) / run_var
    elif metric is Metric.GAUSSIAN_KL:
        v = bat_var / run_var
        m2 = (stats.mean - s.running_mean) ** 2 / run_var
        terms = (v + m2 - 1.0 - np.log(v)) / 2.0
    else:
        raise ValueError(f"{metric} is not a statistics-based metric")
    # both forms are non-negative exactly; rounding must not leak a -1e-17
    return np.maximum(terms, 0.0)


def wasserstein_layer_drift(stats_per_batch: Sequence[BatchStats], s: BnLayerState, eps: float | None = None) -> float:
    """Closed-form layer drift: mean over (batch, channel) of
    [(batch_mean - run_mean)^2 + (batch_std - run_std)^2] / run_std^2,
    with both standard deviations eps-guarded. `eps` defaults to the state's."""
    return _stats_drift(stats_per_batch, s, eps, Metric.WASSERSTEIN)


def gaussian_kl_drift(stats_per_batch: Sequence[BatchStats], s: BnLayerState, eps: float | None = None) -> float:
    """Closed-form layer drift: mean over (batch, channel) of the KL divergence
    between N((batch_mean - run_mean)/run_std, (batch_std/run_std)^2) and N(0, 1)."""
    return _stats_drift(stats_per_batch, s, eps, Metric.GAUSSIAN_KL)


def _stats_drift(stats_per_batch: Sequence[BatchStats], s: BnLayerState, eps: float | None, metric: Metric) -> float:
    stats_per_batch = list(stats_per_batch)
    if not stats_per_batch:
        raise ValueError("need statistics from at least one batch")
    if eps is None:
        eps = s.eps
    terms = [_stats_terms(b, s, eps, metric) for b in stats_per_batch]
    return float(np.mean(np.concatenate(terms)))


def layer_drift(x, s: BnLayerState, cfg: DriftConfig) -> float:
    """Drift score of one BN layer for one batch of its pre-normalization inputs."""
    a = as_tensor4(x)
    if a.shape[1] != s.channels:
        raise ValueError(f"channel mismatch: batch has {a.shape[1]}, state has {s.channels}")
    if cfg.metric is Metric.COSINE:
        total, count, _ = _cosine_terms(a, s, cfg.eps, cfg.truncation_ratio)
        return total / count if count else 0.0
    xt = refine_low_rank(a, cfg.truncation_ratio) if cfg.truncation_ratio is not None else a
    return float(np.mean(_stats_terms(batch_stats(xt), s, cfg.eps, cfg.metric)))


def aggregate(per_layer: Sequence[float], weights: Sequence[float]) -> float:
    """Weighted mean over layers: (1/L) * sum(w_l * d_l)."""
    d = np.asarray(per_layer, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if d.ndim != 1 or w.shape != d.shape:
        raise ValueError(f"length mismatch: {d.shape} scores vs {w.shape} weights")
    if d.shape[0] < 1:
        raise ValueError("need at least one layer")
    if np.any((w < 0.0) | (w > 1.0)):
        raise ValueError("weights must lie in [0, 1]")
    return float(np.mean(w * d))


class _LayerAccumulator:
    """Pools per-term sums across batches for one layer."""

    def __init__(self):
        self.total = 0.0
        self.count = 0
        self.skipped = 0

    def add_cosine(self, x: np.ndarray, s: BnLayerState, eps: float, r_tr: float | None):
        total, count, skipped = _cosine_terms(x, s, eps, r_tr)
        self.total += total
        self.count += count
        self.skipped += skipped

    def add_stats(self, stats: BatchStats, s: BnLayerState, eps: float, metric: Metric):
        terms = _stats_terms(stats, s, eps, metric)
        self.total += float(terms.sum())
        self.count += terms.shape[0]

    @property
    def score(self) -> float:
        return self.total / self.count if self.count else 0.0


def _resolve_weights(cfg: DriftConfig, layers: int) -> tuple[float, ...]:
    if cfg.layer_weights is None:
        return (1.0,) * layers
    if len(cfg.layer_weights) != layers:
        raise ValueError(f"{len(cfg.layer_weights)} layer weights for {layers} BN layers")
    return cfg.layer_weights


def score_layer_inputs(
    bn_states: Sequence[BnLayerState],
    batches_of_layer_inputs: Iterable[Sequence[np.ndarray]],
    cfg: DriftConfig,
    model_id: str = "model",
    dataset_id: str = "data",
) -> DriftReport:
    """Score from already-captured BN inputs: one list of per-layer tensors per batch.

    This is the pooling core behind mde_score; trace files feed it directly.
    Exactly cfg.iterations batches are consumed from the iterable.
    """
    states = list(bn_states)
    if not states:
        raise NoBnLayersError(f"model {model_id!r} has no BN layers")
    weights = _resolve_weights(cfg, len(states))
    accums = [_LayerAccumulator() for _ in states]
    it = iter(batches_of_layer_inputs)
    for t in range(cfg.iterations):
        try:
            layer_inputs = next(it)
        except StopIteration:
            raise DriftError(f"batch stream exhausted after {t} of {cfg.iterations} iterations") from None
        if len(layer_inputs) != len(states):
            raise DriftError(f"batch {t} supplied {len(layer_inputs)} layer inputs for {len(states)} BN layers")
        for acc, s, x in zip(accums, states, layer_inputs):
            a = as_tensor4(x)
            if a.shape[1] != s.channels:
                raise ValueError(f"channel mismatch: batch has {a.shape[1]}, state has {s.channels}")
            if cfg.metric is Metric.COSINE:
                acc.add_cosine(a, s, cfg.eps, cfg.truncation_ratio)
            else:
                xt = refine_low_rank(a, cfg.truncation_ratio) if cfg.truncation_ratio is not None else a
                acc.add_stats(batch_stats(xt), s, cfg.eps, cfg.metric)
    per_layer = tuple(acc.score for acc in accums)
    return DriftReport(
        per_layer=per_layer,
        aggregate=aggregate(per_layer, weights),
        config=cfg,
        model_id=model_id,
        dataset_id=dataset_id,
        channels_skipped=sum(acc.skipped for acc in accums),
    )


def score_stats(
    bn_states: Sequence[BnLayerState],
    batches_of_layer_stats: Iterable[Sequence[BatchStats]],
    cfg: DriftConfig,
    model_id: str = "model",
    dataset_id: str = "data",
) -> DriftReport:
    """Statistics-only scoring for the closed-form metrics (no activations needed)."""
    if cfg.metric is Metric.COSINE:
        raise ValueError("cosine drift needs full activations; use score_layer_inputs")
    if cfg.truncation_ratio is not None:
        raise ValueError("low-rank refinement needs full activations; use score_layer_inputs")
    states = list(bn_states)
    if not states:
        raise NoBnLayersError(f"model {model_id!r} has no BN layers")
    weights = _resolve_weights(cfg, len(states))
    accums = [_LayerAccumulator() for _ in states]
    consumed = 0
    for batch in batches_of_layer_stats:
        if len(batch) != len(states):
            raise DriftError(f"batch supplied {len(batch)} layer stats for {len(states)} BN layers")
        for acc, s, st in zip(accums, states, batch):
            acc.add_stats(st, s, cfg.eps, cfg.metric)
        consumed += 1
    if consumed < 1:
        raise DriftError("no batch statistics supplied")
    per_layer = tuple(acc.score for acc in accums)
    return DriftReport(
        per_layer=per_layer,
        aggregate=aggregate(per_layer, weights),
        config=cfg,
        model_id=model_id,
        dataset_id=dataset_id,
    )


def mde_score(model, batches: Iterable[np.ndarray], cfg: DriftConfig, dataset_id: str = "data") -> DriftReport:
    """Drift of `model` against a stream of input batches.

    Runs cfg.iterations inference-mode forward passes, captures every BN
    layer's pre-normalization input, and pools the per-(sample, channel)
    terms across batches. Deterministic for a seeded stream.
    """
    from .toynet import forward  # local import; toynet builds on batchnorm only

    if not model.bn_states:
        raise NoBnLayersError(f"model {model.model_id!r} has no BN layers")

    def captured() -> Iterator[Sequence[np.ndarray]]:
        for batch in batches:
            _, bn_inputs = forward(model, batch, mode="eval", trace=True)
            yield bn_inputs

    return score_layer_inputs(model.bn_states, captured(), cfg, model_id=model.model_id, dataset_id=dataset_id)


def fake_batches(input_shape: Sequence[int], cfg: DriftConfig, seed: int = 0) -> Iterator[np.ndarray]:
    """Standard-normal noise batches shaped like real inputs, for maximal-drift normalization."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    for _ in range(cfg.iterations):
        yield rng.standard_normal((cfg.batch_size, c, h, w))


def fakedata_report(model, cfg: DriftConfig, seed: int = 0) -> DriftReport:
    """Drift of `model` against seeded standard-normal inputs (dataset id "fakedata")."""
    return mde_score(model, fake_batches(model.input_shape, cfg, seed), cfg, dataset_id="fakedata")


def normalize_by_fakedata(report: DriftReport, fake_report: DriftReport) -> float:
    """Express a drift score as a fraction of the same model's noise-input drift."""
    if report.model_id != fake_report.model_id:
        raise ValueError(f"model mismatch: {report.model_id!r} vs {fake_report.model_id!r}")
    if report.config != fake_report.config:
        raise ValueError("reports were produced with different configurations")
    if fake_report.aggregate <= 0.0:
        raise ValueError("fake-data drift is zero; cannot normalize")
    return report.aggregate / fake_report.aggregate


def minibatch_stream(images, batch_size: int, iterations: int, seed: int = 0) -> Iterator[np.ndarray]:
    """Seeded stream of `iterations` batches drawn from `images`.

    Each epoch is a fresh permutation split into full batches; datasets
    smaller than one batch are sampled with replacement.
    """
    a = as_tensor4(images)
    n = a.shape[0]
    rng = np.random.default_rng(seed)
    produced = 0
    while produced < iterations:
        if n < batch_size:
            yield a[rng.integers(0, n, size=batch_size)]
            produced += 1
            continue
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            if produced >= iterations:
                return
            yield a[order[start : start + batch_size]]
            produced += 1
