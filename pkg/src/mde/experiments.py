"""Desk-scale experiment drivers: severity sweeps, overlap trends, and cycle recovery.

Each driver trains small models on synthetic data, scores drift, and returns
(rows, summary) dictionaries ready for CSV emission. The command-line layer
and the acceptance suite both run these.
"""

from __future__ import annotations

import numpy as np

from .drift import DriftConfig, fakedata_report, mde_score, minibatch_stream
from .selection import linear_fit, run_concept_recovery, spearman_rank_corr
from .shiftlab import (
    Brightness,
    CutOut,
    GaussianNoise,
    Rotation,
    SyntheticDataset,
    apply_shift,
    generate_dataset,
)
from .toynet import TrainConfig, default_model, subset_accuracy, train

__all__ = [
    "make_shift_spec",
    "train_on_subset",
    "covariate_sweep",
    "concept_overlap",
    "recovery_run",
    "fakedata_comparison",
]

SHIFT_KINDS = ("noise", "rotation", "brightness", "cutout")


def make_shift_spec(kind: str, level: float, hole_size: int = 4):
    if kind == "noise":
        return GaussianNoise(level)
    if kind == "rotation":
        return Rotation(level)
    if kind == "brightness":
        return Brightness(level)
    if kind == "cutout":
        return CutOut(int(level), hole_size)
    raise ValueError(f"unknown shift kind {kind!r}; expected one of {SHIFT_KINDS}")


def train_on_subset(sub: SyntheticDataset, seed: int, epochs: int = 25, batch_size: int = 32,
                    learning_rate: float = 0.05, model_id: str | None = None):
    """Train the default net on a class subset; original ids become class_labels."""
    classes = tuple(sub.class_ids)
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[int(v)] for v in sub.labels])
    model = default_model(len(classes), seed=seed, class_labels=classes, model_id=model_id or f"toy-{seed}")
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, learning_rate=learning_rate, seed=seed)
    return train(model, sub.images, labels, cfg)


def _default_cfg(cfg: DriftConfig | None) -> DriftConfig:
    return cfg if cfg is not None else DriftConfig(batch_size=32, iterations=4)


def covariate_sweep(kind: str, levels, seed: int = 0, cfg: DriftConfig | None = None,
                    classes: int = 4, per_class: int = 80, epochs: int = 25):
    """Train on clean data, then walk perturbation severities on held-out samples:
    drift up, accuracy down.

    Rows carry (severity, drift, accuracy); the summary reports the rank
    correlations and the accuracy-versus-drift line.
    """
    cfg = _default_cfg(cfg)
    ds = generate_dataset(classes, 2 * per_class, seed=seed)
    train_side = ds.subset(np.arange(0, len(ds), 2))
    eval_side = ds.subset(np.arange(1, len(ds), 2))
    model = train_on_subset(train_side, seed=seed, epochs=epochs)
    train_accuracy = subset_accuracy(model, train_side.images, train_side.labels)
    rows = []
    for i, level in enumerate(levels):
        shifted = apply_shift(eval_side.images, make_shift_spec(kind, level), seed=seed + 1000 + i)
        report = mde_score(model, minibatch_stream(shifted, cfg.batch_size, cfg.iterations, seed=seed + i), cfg)
        accuracy = subset_accuracy(model, shifted, eval_side.labels)
        rows.append({"severity": float(level), "drift": report.aggregate, "accuracy": accuracy})
    drifts = [r["drift"] for r in rows]
    accs = [r["accuracy"] for r in rows]
    sevs = [r["severity"] for r in rows]
    summary = {"kind": kind, "seed": seed, "train_accuracy": train_accuracy}
    try:
        summary["rho_severity_drift"] = spearman_rank_corr(sevs, drifts)
        summary["rho_drift_accuracy"] = spearman_rank_corr(drifts, accs)
    except ValueError:
        summary["rho_severity_drift"] = float("nan")
        summary["rho_drift_accuracy"] = float("nan")
    if len(rows) >= 3:
        fit = linear_fit(drifts, accs)
        summary.update(slope=fit.slope, intercept=fit.intercept, r_squared=fit.r_squared)
    return rows, summary


def concept_overlap(ps, seed: int = 0, cfg: DriftConfig | None = None, classes: int = 8,
                    per_class: int = 100, classes_per_split: int = 4, epochs: int = 14,
                    repeats: int = 6):
    """Class-overlap protocol: drift and accuracy gap as the shared class fraction varies.

    Per repeat, one class permutation fixes the train side (c classes, half of
    each class's samples) and one model is trained on it; every overlap level
    p then composes a test side from round(p*c) shared classes' held-out
    halves plus whole unseen classes. Test and baseline streams share a seed,
    so paired batch partitions cancel composition noise. Averaging the
    repeats averages out which classes landed unseen.

    Rows carry one record per (repeat, p); the summary fits mean drift per p
    against the mean accuracy gap and reports the p=1 drift as a fraction of
    the in-distribution baseline.
    """
    cfg = cfg if cfg is not None else DriftConfig(batch_size=8, iterations=80)
    c = classes_per_split
    for p in ps:
        shared_n = int(round(p * c))
        if 2 * c - shared_n > classes:
            raise ValueError(f"overlap p={p} infeasible: needs {2 * c - shared_n} distinct classes of {classes}")
    ds = generate_dataset(classes, per_class, seed=seed)
    rows = []
    for rep in range(repeats):
        rng = np.random.default_rng(seed * 1009 + rep)
        perm = [int(v) for v in rng.permutation(classes)]
        train_classes = perm[:c]
        unseen_pool = perm[c:]
        halves = {}
        for cls in range(classes):
            idx = np.flatnonzero(ds.labels == cls)
            idx = idx[rng.permutation(idx.shape[0])]
            halves[cls] = (idx[: idx.shape[0] // 2], idx[idx.shape[0] // 2 :])
        train_side = ds.subset(np.sort(np.concatenate([halves[cls][0] for cls in train_classes])))
        model = train_on_subset(train_side, seed=seed + rep, epochs=epochs)
        source_acc = subset_accuracy(model, train_side.images, train_side.labels)
        self_drift = mde_score(
            model, minibatch_stream(train_side.images, cfg.batch_size, cfg.iterations, seed=seed + rep), cfg
        ).aggregate
        for p in ps:
            shared_n = int(round(p * c))
            parts = [halves[cls][1] for cls in train_classes[:shared_n]]
            parts += [halves[cls][0] for cls in unseen_pool[: c - shared_n]]
            test_side = ds.subset(np.sort(np.concatenate(parts)))
            target_acc = subset_accuracy(model, test_side.images, test_side.labels)
            drift = mde_score(
                model, minibatch_stream(test_side.images, cfg.batch_size, cfg.iterations, seed=seed + rep), cfg
            ).aggregate
            rows.append(
                {
                    "repeat": rep,
                    "overlap_p": float(p),
                    "shared_classes": shared_n,
                    "drift": drift,
                    "self_drift": self_drift,
                    "source_accuracy": source_acc,
                    "target_accuracy": target_acc,
                    "accuracy_gap": source_acc - target_acc,
                }
            )
    summary = {"seed": seed}
    mean_gap = {p: float(np.mean([r["accuracy_gap"] for r in rows if r["overlap_p"] == float(p)])) for p in ps}
    mean_drift = {p: float(np.mean([r["drift"] for r in rows if r["overlap_p"] == float(p)])) for p in ps}
    if len(ps) >= 3:
        fit = linear_fit([mean_gap[p] for p in ps], [mean_drift[p] for p in ps])
        summary.update(slope=fit.slope, intercept=fit.intercept, r_squared=fit.r_squared)
        summary["rho_gap_drift"] = spearman_rank_corr([mean_gap[p] for p in ps], [mean_drift[p] for p in ps])
    if any(float(p) == 1.0 for p in ps):
        baseline = float(np.mean([r["self_drift"] for r in rows]))
        if baseline > 0:
            summary["p1_drift_over_baseline"] = mean_drift[1.0] / baseline
    return rows, summary


def recovery_run(experts: int = 5, cycles: int = 25, seed: int = 0, cfg: DriftConfig | None = None,
                 classes_per_expert: int = 2, per_class: int = 60, epochs: int = 20):
    """Disjoint-class experts, a stream revisiting their class subsets, per-cycle selection.

    Each class's samples are split between a training half (experts) and a
    held-out half (the stream). Returns per-(cycle, model) rows and a summary
    with top-k selection rates, mean regret, the exact random-selection
    regret, and the mean per-cycle drift/accuracy rank correlation.
    """
    cfg = _default_cfg(cfg)
    total_classes = experts * classes_per_expert
    ds = generate_dataset(total_classes, per_class, seed=seed)
    rng = np.random.default_rng(seed)

    train_idx, held_idx = [], []
    for cls in range(total_classes):
        idx = np.flatnonzero(ds.labels == cls)
        idx = idx[rng.permutation(idx.shape[0])]
        half = idx.shape[0] // 2
        train_idx.append(idx[:half])
        held_idx.append(idx[half:])

    class_order = rng.permutation(total_classes)
    groups = [tuple(sorted(int(c) for c in class_order[i * classes_per_expert : (i + 1) * classes_per_expert]))
              for i in range(experts)]
    zoo = []
    for i, group in enumerate(groups):
        sub = ds.subset(np.sort(np.concatenate([train_idx[c] for c in group])))
        zoo.append(train_on_subset(sub, seed=seed + i, epochs=epochs, model_id=f"expert{i}"))

    picks = rng.integers(0, experts, size=cycles)
    stream = [ds.subset(np.sort(np.concatenate([held_idx[c] for c in groups[int(g)]]))) for g in picks]

    outcomes, rows = run_concept_recovery(zoo, stream, cfg, seed=seed)

    regrets = [o.regret for o in outcomes]
    rhos = []
    random_regrets = []
    for cycle in range(cycles):
        cycle_rows = [r for r in rows if r["cycle"] == cycle]
        accs = np.array([r["accuracy"] for r in cycle_rows])
        drifts = np.array([r["drift"] for r in cycle_rows])
        random_regrets.append(float(accs.max() - accs.mean()))  # exact expectation over a uniform pick
        try:
            rhos.append(spearman_rank_corr(drifts, accs))
        except ValueError:
            pass
    summary = {
        "seed": seed,
        "experts": experts,
        "cycles": cycles,
        "top1_rate": float(np.mean([o.topk_hit[1] for o in outcomes])),
        "top3_rate": float(np.mean([o.topk_hit[3] for o in outcomes])),
        "top5_rate": float(np.mean([o.topk_hit[5] for o in outcomes])),
        "mean_regret": float(np.mean(regrets)),
        "random_regret": float(np.mean(random_regrets)),
        "rho_drift_accuracy": float(np.mean(rhos)) if rhos else float("nan"),
    }
    return rows, summary, outcomes


def fakedata_comparison(seed: int = 0, cfg: DriftConfig | None = None, classes: int = 4,
                        per_class: int = 60, epochs: int = 20):
    """Drift on the model's own training data versus seeded standard-normal inputs."""
    cfg = _default_cfg(cfg)
    ds = generate_dataset(classes, per_class, seed=seed)
    model = train_on_subset(ds, seed=seed, epochs=epochs)
    own = mde_score(model, minibatch_stream(ds.images, cfg.batch_size, cfg.iterations, seed=seed + 1), cfg)
    fake = fakedata_report(model, cfg, seed=seed + 2)
    return own, fake
