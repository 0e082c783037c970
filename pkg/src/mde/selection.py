"""Model ranking and selection on drift scores, plus the supervised comparison metrics.

Selection picks the candidate with the smallest drift. Quality is reported as
top-k selection accuracy (the chosen model's true accuracy ranks within the
best k), regret against the oracle choice, and Spearman rank agreement
between drift and accuracy. NLL, Brier, and expected calibration error are
provided as the label-dependent baselines drift is compared against.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats as sstats

__all__ = [
    "CandidateScore",
    "SelectionOutcome",
    "LinearFit",
    "select_model",
    "spearman_rank_corr",
    "linear_fit",
    "nll",
    "brier",
    "ece",
    "run_concept_recovery",
    "write_csv",
]


@dataclass(frozen=True)
class CandidateScore:
    model_id: str
    drift: float
    true_accuracy: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.drift):
            raise ValueError(f"drift for {self.model_id!r} is not finite")


@dataclass(frozen=True)
class SelectionOutcome:
    """Ranking by ascending drift; topk_hit and regret need true accuracies."""

    ranking: tuple[str, ...]
    chosen: str
    topk_hit: dict[int, bool]
    regret: float | None


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float
    confidence_band: np.ndarray  # per-x half-width of the 95% mean-prediction band


def select_model(candidates: Sequence[CandidateScore], ks: Sequence[int] = (1, 3, 5)) -> SelectionOutcome:
    """Pick the smallest-drift candidate; ties break toward the smaller model id.

    topk_hit[k] is true when fewer than k candidates beat the chosen model's
    true accuracy; regret is the accuracy gap to the best candidate. Both stay
    empty/None when any accuracy is missing.
    """
    cands = list(candidates)
    if not cands:
        raise ValueError("no candidates to select from")
    ranked = sorted(cands, key=lambda c: (c.drift, c.model_id))
    chosen = ranked[0]
    topk_hit: dict[int, bool] = {}
    regret = None
    if all(c.true_accuracy is not None for c in cands):
        accs = np.asarray([c.true_accuracy for c in cands])
        better = int((accs > chosen.true_accuracy).sum())
        topk_hit = {int(k): better < k for k in ks}
        regret = float(accs.max() - chosen.true_accuracy)
    return SelectionOutcome(
        ranking=tuple(c.model_id for c in ranked),
        chosen=chosen.model_id,
        topk_hit=topk_hit,
        regret=regret,
    )


def spearman_rank_corr(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks on ties; errors on constant input."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least two observations")
    rx = sstats.rankdata(x)
    ry = sstats.rankdata(y)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        raise ValueError("rank correlation undefined for constant input")
    rho = float(np.corrcoef(rx, ry)[0, 1])
    return float(np.clip(rho, -1.0, 1.0))


def linear_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    """Ordinary least squares with a 95% confidence band for the mean prediction."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape or xv.ndim != 1:
        raise ValueError("x and y must be 1-D with equal length")
    n = xv.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 points, got {n}")
    sxx = float(((xv - xv.mean()) ** 2).sum())
    if sxx <= 0:
        raise ValueError("x is constant; fit is degenerate")
    slope = float(((xv - xv.mean()) * (yv - yv.mean())).sum() / sxx)
    intercept = float(yv.mean() - slope * xv.mean())
    resid = yv - (slope * xv + intercept)
    sse = float((resid**2).sum())
    sst = float(((yv - yv.mean()) ** 2).sum())
    r_squared = 1.0 if sst == 0.0 else float(np.clip(1.0 - sse / sst, 0.0, 1.0))
    s = np.sqrt(sse / (n - 2))
    t = float(sstats.t.ppf(0.975, n - 2))
    band = t * s * np.sqrt(1.0 / n + (xv - xv.mean()) ** 2 / sxx)
    return LinearFit(slope=slope, intercept=intercept, r_squared=r_squared, confidence_band=band)


def _check_probabilities(probabilities, labels):
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("probabilities must be (samples, classes)")
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 within 1e-6")
    y = np.asarray(labels)
    if y.shape != (p.shape[0],):
        raise ValueError("one label per row required")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise ValueError(f"labels must lie in [0, {p.shape[1]})")
    return p, y.astype(np.int64)


def nll(probabilities, labels) -> float:
    """Mean negative log-likelihood of the true labels, probabilities floored at 1e-12."""
    p, y = _check_probabilities(probabilities, labels)
    picked = np.maximum(p[np.arange(p.shape[0]), y], 1e-12)
    return float(-np.log(picked).mean())


def brier(probabilities, labels) -> float:
    """Mean squared distance between the probability row and the one-hot label."""
    p, y = _check_probabilities(probabilities, labels)
    onehot = np.zeros_like(p)
    onehot[np.arange(p.shape[0]), y] = 1.0
    return float(((p - onehot) ** 2).sum(axis=1).mean())


def ece(probabilities, labels, bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins on the max probability."""
    if bins < 1:
        raise ValueError(f"bins must be at least 1, got {bins}")
    p, y = _check_probabilities(probabilities, labels)
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    n = p.shape[0]
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.digitize(conf, edges[1:-1], right=True), 0, bins - 1)
    total = 0.0
    for b in range(bins):
        mask = idx == b
        if not mask.any():
            continue
        total += (mask.sum() / n) * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def thread_count() -> int:
    """Worker cap for candidate scoring; MDE_THREADS overrides, 0 or unset means auto."""
    raw = os.environ.get("MDE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n > 0:
        return n
    return min(4, os.cpu_count() or 1)


def run_concept_recovery(zoo, stream, cfg, seed: int = 0, ks: Sequence[int] = (1, 3, 5)):
    """Score every zoo model against every cycle's data and select per cycle.

    Returns (outcomes, rows): one SelectionOutcome per cycle plus flat
    per-(cycle, model) records with drift, accuracy, and the chosen flag.
    Candidates are scored in parallel (capped by MDE_THREADS) but collected in
    zoo order, so results are deterministic for fixed seeds end to end.
    """
    from .drift import mde_score, minibatch_stream
    from .toynet import subset_accuracy

    zoo = list(zoo)
    if not zoo:
        raise ValueError("empty model zoo")

    def score_one(model, data, cycle):
        batches = minibatch_stream(data.images, cfg.batch_size, cfg.iterations, seed=seed + cycle)
        report = mde_score(model, batches, cfg, dataset_id=f"cycle{cycle}")
        acc = subset_accuracy(model, data.images, data.labels)
        return CandidateScore(model_id=model.model_id, drift=report.aggregate, true_accuracy=acc)

    workers = min(thread_count(), len(zoo))
    outcomes = []
    rows = []
    for cycle, data in enumerate(stream):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                candidates = list(pool.map(lambda m: score_one(m, data, cycle), zoo))
        else:
            candidates = [score_one(m, data, cycle) for m in zoo]
        outcome = select_model(candidates, ks=ks)
        outcomes.append(outcome)
        for c in candidates:
            rows.append(
                {
                    "cycle": cycle,
                    "model_id": c.model_id,
                    "drift": c.drift,
                    "accuracy": c.true_accuracy,
                    "chosen": int(c.model_id == outcome.chosen),
                }
            )
    return outcomes, rows


def write_csv(path, rows: Iterable[dict], columns: Sequence[str]):
    """Write dict rows as RFC-4180 CSV with a header line."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
