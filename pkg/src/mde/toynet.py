"""A small deterministic CNN stack so the whole drift pipeline runs framework-free.

Supports Conv2d, BatchNorm, Relu, AvgPool, Flatten, and Linear layers with
softmax cross-entropy SGD training, seeded initialization, and tracing of
every BN layer's pre-normalization input. Train-mode BN normalizes by batch
statistics and advances the running estimates; eval mode normalizes by the
stored running estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .batchnorm import BatchStats, BnLayerState, ema_update
from .linalg import as_tensor4

__all__ = [
    "Conv2d",
    "BatchNorm",
    "Relu",
    "AvgPool",
    "Flatten",
    "Linear",
    "LayerSpec",
    "ToyModel",
    "TrainConfig",
    "build_model",
    "default_specs",
    "default_model",
    "forward",
    "train",
    "evaluate",
    "subset_accuracy",
    "finite_difference_check",
    "softmax",
]


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class BatchNorm:
    pass


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class AvgPool:
    kernel: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    out_features: int


LayerSpec = Union[Conv2d, BatchNorm, Relu, AvgPool, Flatten, Linear]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum_alpha: float = 0.9  # BN running-estimate retain factor
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be at least 2, got {self.batch_size}")
        if not 0.0 <= self.momentum_alpha <= 1.0:
            raise ValueError(f"momentum_alpha must lie in [0, 1], got {self.momentum_alpha}")


@dataclass
class ToyModel:
    """Layer specs plus their weights; bn_states aligns 1:1 with BatchNorm specs in order."""

    specs: tuple[LayerSpec, ...]
    weights: list[dict[str, np.ndarray] | None]
    bn_states: list[BnLayerState]
    input_shape: tuple[int, int, int]
    class_count: int
    class_labels: tuple[int, ...]
    rng_seed: int
    model_id: str

    def clone(self) -> "ToyModel":
        return ToyModel(
            specs=self.specs,
            weights=[None if w is None else {k: v.copy() for k, v in w.items()} for w in self.weights],
            bn_states=list(self.bn_states),
            input_shape=self.input_shape,
            class_count=self.class_count,
            class_labels=self.class_labels,
            rng_seed=self.rng_seed,
            model_id=self.model_id,
        )

    def parameter_count(self) -> int:
        n = sum(v.size for w in self.weights if w is not None for v in w.values())
        n += sum(2 * s.channels for s in self.bn_states)
        return n


def _shape_chain(specs: Sequence[LayerSpec], input_shape: tuple[int, int, int]) -> list:
    """Walk the layer chain and return each layer's input shape; raises on inconsistency."""
    shape: tuple = input_shape  # (C, H, W) until Flatten, then (features,)
    shapes = []
    for i, spec in enumerate(specs):
        shapes.append(shape)
        if isinstance(spec, Conv2d):
            if len(shape) != 3:
                raise ValueError(f"layer {i}: Conv2d needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            if spec.kernel < 1 or spec.stride < 1 or spec.pad < 0 or spec.out_channels < 1:
                raise ValueError(f"layer {i}: bad Conv2d parameters {spec}")
            oh = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
            ow = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
            if oh < 1 or ow < 1:
                raise ValueError(f"layer {i}: Conv2d kernel {spec.kernel} too large for input {shape}")
            shape = (spec.out_channels, oh, ow)
        elif isinstance(spec, (BatchNorm, Relu)):
            if isinstance(spec, BatchNorm) and len(shape) != 3:
                raise ValueError(f"layer {i}: BatchNorm needs a (C, H, W) input, got {shape}")
        elif isinstance(spec, AvgPool):
            if len(shape) != 3:
                raise ValueError(f"layer {i}: AvgPool needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            if spec.kernel < 1 or h % spec.kernel or w % spec.kernel:
                raise ValueError(f"layer {i}: AvgPool kernel {spec.kernel} does not divide {h}x{w}")
            shape = (c, h // spec.kernel, w // spec.kernel)
        elif isinstance(spec, Flatten):
            if len(shape) != 3:
                raise ValueError(f"layer {i}: Flatten needs a (C, H, W) input, got {shape}")
            shape = (int(np.prod(shape)),)
        elif isinstance(spec, Linear):
            if len(shape) != 1:
                raise ValueError(f"layer {i}: Linear needs a flat input; add Flatten first")
            shape = (spec.out_features,)
        else:
            raise TypeError(f"layer {i}: unknown layer spec {spec!r}")
    shapes.append(shape)
    return shapes


def build_model(
    specs: Sequence[LayerSpec],
    input_shape: tuple[int, int, int],
    class_count: int,
    seed: int = 0,
    retain_alpha: float = 0.9,
    eps: float = 1e-5,
    class_labels: Sequence[int] | None = None,
    model_id: str | None = None,
) -> ToyModel:
    """Validate the shape chain and He-initialize a model (seeded, deterministic)."""
    specs = tuple(specs)
    shapes = _shape_chain(specs, input_shape)
    if len(shapes[-1]) != 1 or shapes[-1][0] != class_count:
        raise ValueError(f"network produces {shapes[-1]} but class_count is {class_count}")
    rng = np.random.default_rng(seed)
    weights: list[dict[str, np.ndarray] | None] = []
    bn_states: list[BnLayerState] = []
    for spec, shape in zip(specs, shapes):
        if isinstance(spec, Conv2d):
            c = shape[0]
            fan_in = c * spec.kernel * spec.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.out_channels, c, spec.kernel, spec.kernel))
            weights.append({"b": np.zeros(spec.out_channels), "w": w})
        elif isinstance(spec, Linear):
            fan_in = shape[0]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.out_features, fan_in))
            weights.append({"b": np.zeros(spec.out_features), "w": w})
        elif isinstance(spec, BatchNorm):
            bn_states.append(BnLayerState.identity(shape[0], retain_alpha=retain_alpha, eps=eps))
            weights.append(None)
        else:
            weights.append(None)
    labels = tuple(range(class_count)) if class_labels is None else tuple(int(c) for c in class_labels)
    if len(labels) != class_count:
        raise ValueError(f"{len(labels)} class labels for {class_count} classes")
    return ToyModel(
        specs=specs,
        weights=weights,
        bn_states=bn_states,
        input_shape=tuple(input_shape),
        class_count=class_count,
        class_labels=labels,
        rng_seed=seed,
        model_id=model_id or f"toy-{seed}",
    )


def default_specs(class_count: int) -> tuple[LayerSpec, ...]:
    """Conv(8)-BN-Relu-Pool(2)-Conv(16)-BN-Relu-Pool(2)-Flatten-Linear; two BN layers, trains in seconds."""
    return (
        Conv2d(8, 3, stride=1, pad=1),
        BatchNorm(),
        Relu(),
        AvgPool(2),
        Conv2d(16, 3, stride=1, pad=1),
        BatchNorm(),
        Relu(),
        AvgPool(2),
        Flatten(),
        Linear(class_count),
    )


def default_model(class_count: int, seed: int = 0, input_shape: tuple[int, int, int] = (1, 16, 16), **kwargs) -> ToyModel:
    return build_model(default_specs(class_count), input_shape, class_count, seed=seed, **kwargs)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _conv_forward(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (w.shape[2], w.shape[3]), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.einsum("bchwij,ocij->bohw", win, w, optimize=True) + b[None, :, None, None]
    return y, (xp.shape, win)


def _conv_backward(dy, cache, w, stride, pad, in_shape):
    xp_shape, win = cache
    dw = np.einsum("bchwij,bohw->ocij", win, dy, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    k = w.shape[2]
    oh, ow = dy.shape[2], dy.shape[3]
    dxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.einsum(
                "bohw,oc->bchw", dy, w[:, :, i, j]
            )
    h, w_ = in_shape[1], in_shape[2]
    dx = dxp[:, :, pad : pad + h, pad : pad + w_] if pad else dxp
    return dx, {"w": dw, "b": db}


def _bn_train_forward(x, s: BnLayerState):
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(v + s.eps)
    xhat = (x - m[None, :, None, None]) * inv[None, :, None, None]
    y = s.gamma[None, :, None, None] * xhat + s.beta[None, :, None, None]
    return y, (xhat, inv), BatchStats(mean=m, var=v)


def _bn_train_backward(dy, cache, gamma):
    xhat, inv = cache
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = (inv[None, :, None, None] / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


def _bn_eval_forward(x, s: BnLayerState):
    inv = 1.0 / np.sqrt(s.running_var + s.eps)
    scale = (s.gamma * inv)[None, :, None, None]
    y = (x - s.running_mean[None, :, None, None]) * scale + s.beta[None, :, None, None]
    return y, ((x - s.running_mean[None, :, None, None]) * inv[None, :, None, None], scale)


def _bn_eval_backward(dy, cache):
    xhat, scale = cache
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    return dy * scale, dgamma, dbeta


def _avgpool_forward(x, k):
    b, c, h, w = x.shape
    y = x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
    return y, None


def _avgpool_backward(dy, k):
    return np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)


def _run(model: ToyModel, x, train: bool, with_cache: bool):
    """Forward pass. Returns (logits, caches, bn_inputs, bn_batch_stats). No side effects."""
    a = as_tensor4(x)
    if tuple(a.shape[1:]) != model.input_shape:
        raise ValueError(f"input shape {tuple(a.shape[1:])} does not match model input {model.input_shape}")
    caches: list = []
    bn_inputs: list[np.ndarray] = []
    stats_list: list[BatchStats] = []
    bn_i = 0
    h = a
    for spec, wd in zip(model.specs, model.weights):
        if isinstance(spec, Conv2d):
            in_shape = h.shape[1:]
            h, cache = _conv_forward(h, wd["w"], wd["b"], spec.stride, spec.pad)
            caches.append((cache, in_shape) if with_cache else None)
        elif isinstance(spec, BatchNorm):
            s = model.bn_states[bn_i]
            bn_inputs.append(h)
            if train:
                h, cache, st = _bn_train_forward(h, s)
                stats_list.append(st)
            else:
                h, cache = _bn_eval_forward(h, s)
            caches.append(cache if with_cache else None)
            bn_i += 1
        elif isinstance(spec, Relu):
            caches.append((h > 0) if with_cache else None)
            h = np.maximum(h, 0.0)
        elif isinstance(spec, AvgPool):
            h, _ = _avgpool_forward(h, spec.kernel)
            caches.append(None)
        elif isinstance(spec, Flatten):
            caches.append(h.shape if with_cache else None)
            h = h.reshape(h.shape[0], -1)
        elif isinstance(spec, Linear):
            caches.append(h if with_cache else None)
            h = h @ wd["w"].T + wd["b"]
    return h, caches, bn_inputs, stats_list


def _backward(model: ToyModel, caches, dlogits, train: bool):
    """Gradients for every learnable parameter, walking the chain in reverse."""
    layer_grads: list[dict[str, np.ndarray] | None] = [None] * len(model.specs)
    bn_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.bn_states)
    bn_i = len(model.bn_states)
    dh = dlogits
    for i in range(len(model.specs) - 1, -1, -1):
        spec, wd, cache = model.specs[i], model.weights[i], caches[i]
        if isinstance(spec, Linear):
            layer_grads[i] = {"w": dh.T @ cache, "b": dh.sum(axis=0)}
            dh = dh @ wd["w"]
        elif isinstance(spec, Flatten):
            dh = dh.reshape(cache)
        elif isinstance(spec, AvgPool):
            dh = _avgpool_backward(dh, spec.kernel)
        elif isinstance(spec, Relu):
            dh = dh * cache
        elif isinstance(spec, BatchNorm):
            bn_i -= 1
            if train:
                dh, dgamma, dbeta = _bn_train_backward(dh, cache, model.bn_states[bn_i].gamma)
            else:
                dh, dgamma, dbeta = _bn_eval_backward(dh, cache)
            bn_grads[bn_i] = (dgamma, dbeta)
        elif isinstance(spec, Conv2d):
            conv_cache, in_shape = cache
            dh, g = _conv_backward(dh, conv_cache, wd["w"], spec.stride, spec.pad, in_shape)
            layer_grads[i] = g
    return layer_grads, bn_grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits, labels):
    p = softmax(logits)
    n = logits.shape[0]
    loss = float(-np.log(np.maximum(p[np.arange(n), labels], 1e-300)).mean())
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad, p


def forward(model: ToyModel, x, mode: str = "eval", trace: bool = False):
    """Run the network. Returns (logits, bn_inputs or None).

    mode "train" normalizes BN by batch statistics and advances the model's
    running estimates; "eval" normalizes by the stored running estimates and
    leaves the model untouched. trace=True also returns each BN layer's
    pre-normalization input, in layer order.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train_mode = mode == "train"
    logits, _, bn_inputs, stats_list = _run(model, x, train_mode, with_cache=False)
    if train_mode:
        for i, st in enumerate(stats_list):
            model.bn_states[i] = ema_update(model.bn_states[i], st)
    return logits, (bn_inputs if trace else None)


def _check_labels(labels, class_count: int, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match {n} samples")
    if y.size and (y.min() < 0 or y.max() >= class_count):
        raise ValueError(f"labels must lie in [0, {class_count})")
    return y.astype(np.int64)


def train(model: ToyModel, images, labels, cfg: TrainConfig) -> ToyModel:
    """SGD on softmax cross-entropy; returns a trained copy, input model untouched.

    Running estimates advance after every batch with retain factor
    cfg.momentum_alpha. Deterministic for a fixed seed. Trailing partial
    batches of fewer than 2 samples are dropped (batch statistics need >= 2).
    """
    a = as_tensor4(images)
    n = a.shape[0]
    if n < 1:
        raise ValueError("dataset is empty")
    y = _check_labels(labels, model.class_count, n)
    m = model.clone()
    m.bn_states = [replace(s, retain_alpha=cfg.momentum_alpha) for s in m.bn_states]
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.shape[0] < 2:
                continue
            xb, yb = a[idx], y[idx]
            logits, caches, _, stats_list = _run(m, xb, train=True, with_cache=True)
            _, dlogits, _ = _cross_entropy(logits, yb)
            layer_grads, bn_grads = _backward(m, caches, dlogits, train=True)
            for wd, g in zip(m.weights, layer_grads):
                if g is not None:
                    for key in g:
                        wd[key] -= lr * g[key]
            for i, (dgamma, dbeta) in enumerate(bn_grads):
                s = m.bn_states[i]
                s = replace(s, gamma=s.gamma - lr * dgamma, beta=s.beta - lr * dbeta)
                m.bn_states[i] = ema_update(s, stats_list[i])
    return m


def evaluate(model: ToyModel, images, labels):
    """Eval-mode accuracy and per-sample softmax probabilities (rows sum to 1)."""
    a = as_tensor4(images)
    n = a.shape[0]
    if n < 1:
        raise ValueError("dataset is empty")
    y = _check_labels(labels, model.class_count, n)
    logits, _ = forward(model, a, mode="eval")
    probs = softmax(logits)
    accuracy = float((logits.argmax(axis=1) == y).mean())
    return accuracy, probs


def subset_accuracy(model: ToyModel, images, labels) -> float:
    """Accuracy against labels in the original class-id space.

    The model's class_labels map its output indices to original ids; ids the
    model was never trained on cannot be predicted and count as wrong.
    """
    mapping = {cid: i for i, cid in enumerate(model.class_labels)}
    mapped = np.asarray([mapping.get(int(v), -1) for v in np.asarray(labels)])
    logits, _ = forward(model, images, mode="eval")
    return float((logits.argmax(axis=1) == mapped).mean())


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def _param_slots(model: ToyModel):
    slots = []
    for i, wd in enumerate(model.weights):
        if wd is None:
            continue
        for key in sorted(wd):
            slots.append(("layer", i, key, wd[key].shape, wd[key].size))
    for i in range(len(model.bn_states)):
        c = model.bn_states[i].channels
        for key in ("gamma", "beta"):
            slots.append(("bn", i, key, (c,), c))
    return slots


def _get_params(model: ToyModel, slots) -> np.ndarray:
    parts = []
    for kind, i, key, _, _ in slots:
        parts.append(model.weights[i][key].ravel() if kind == "layer" else getattr(model.bn_states[i], key))
    return np.concatenate(parts)


def _set_params(model: ToyModel, slots, vec: np.ndarray):
    pos = 0
    for kind, i, key, shape, size in slots:
        chunk = vec[pos : pos + size].reshape(shape)
        if kind == "layer":
            model.weights[i][key] = chunk.copy()
        else:
            model.bn_states[i] = replace(model.bn_states[i], **{key: chunk.copy()})
        pos += size


def _flat_grads(model: ToyModel, slots, layer_grads, bn_grads) -> np.ndarray:
    parts = []
    for kind, i, key, _, _ in slots:
        if kind == "layer":
            parts.append(layer_grads[i][key].ravel())
        else:
            parts.append(bn_grads[i][0] if key == "gamma" else bn_grads[i][1])
    return np.concatenate(parts)


def finite_difference_check(model: ToyModel, x, labels, step: float = 1e-4) -> float:
    """Max normalized gradient error, backprop vs central differences.

    The loss is the train-mode cross-entropy (batch-stat BN, no running-stat
    update). Errors are normalized by max(|analytic|, |numeric|, 1), which
    guards vanishing denominators without hiding absolute errors.
    """
    m = model.clone()
    slots = _param_slots(m)
    total = sum(s[4] for s in slots)
    if total > 5000:
        raise ValueError(f"model has {total} parameters; the check is meant for small models (<= 5000)")
    a = as_tensor4(x)
    y = _check_labels(labels, m.class_count, a.shape[0])

    logits, caches, _, _ = _run(m, a, train=True, with_cache=True)
    _, dlogits, _ = _cross_entropy(logits, y)
    analytic = _flat_grads(m, slots, *_backward(m, caches, dlogits, train=True))

    def loss_at(vec: np.ndarray) -> float:
        _set_params(m, slots, vec)
        logits, _, _, _ = _run(m, a, train=True, with_cache=False)
        return _cross_entropy(logits, y)[0]

    base = _get_params(m, slots)
    worst = 0.0
    for i in range(total):
        v = base.copy()
        v[i] = base[i] + step
        up = loss_at(v)
        v[i] = base[i] - step
        down = loss_at(v)
        fd = (up - down) / (2.0 * step)
        err = abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), 1.0)
        worst = max(worst, err)
    _set_params(m, slots, base)
    return worst
