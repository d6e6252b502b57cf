"""A small CNN with exact forward/backward passes, trained by SGD with momentum.

Everything runs in float64 numpy for determinism at desk scale. The network
is three conv blocks (conv 3x3, stride 1, padding 1 -> batch norm -> 2x2 max
pool -> ReLU) followed by two fully connected layers with inverted dropout
after the first; the head is a 2-class softmax.

Layer functions return ``(output, cache)`` and have a matching ``*_backward``
producing exact gradients; tests validate every layer against central finite
differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Shape bookkeeping for the CNN; defaults follow the classifier setup."""

    input_shape: tuple[int, int] = (128, 64)
    channels: tuple[int, int, int] = (32, 64, 128)
    kernel_size: int = 3
    fc_width: int = 256
    n_classes: int = 2

    def __post_init__(self):
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ValueError("channels must be three positive widths")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")

    def block_shapes(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) after each conv block's pooling."""
        h, w = self.input_shape
        out = []
        for c in self.channels:
            h = (h + 1) // 2
            w = (w + 1) // 2
            out.append((c, h, w))
        return out

    @property
    def flat_features(self) -> int:
        c, h, w = self.block_shapes()[-1]
        return c * h * w


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr0: float = 0.001
    lr_step_epochs: int = 8
    lr_factor: float = 0.1
    epochs: int = 20
    dropout_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0,1)")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: lr0 * factor^(epoch // step)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_factor ** (epoch // cfg.lr_step_epochs)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def conv2d_forward(x, w, b, stride: int = 1, padding: int = 1):
    """Cross-correlation of (N,C,H,W) with (Co,C,KH,KW) kernels, zero padded."""
    n, c, h, wid = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"kernel expects {ci} input channels, got {c}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    y = cols @ w.reshape(co, -1).T + b
    y = y.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, w, stride, padding, (oh, ow))
    return y, cache


def conv2d_backward(dy, cache):
    x_shape, cols, w, stride, padding, (oh, ow) = cache
    n, c, h, wid = x_shape
    co, ci, kh, kw = w.shape
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
    db = dy_mat.sum(axis=0)
    dw = (dy_mat.T @ cols).reshape(w.shape)
    dcols = (dy_mat @ w.reshape(co, -1)).reshape(n, oh, ow, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * padding, wid + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, padding : padding + h, padding : padding + wid] if padding else dxp
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps=1e-5,
                      momentum=0.1, train=True):
    """Per-channel batch normalization over (N,H,W).

    Train mode uses batch statistics (biased variance) and returns updated
    running statistics blended with the given momentum; eval mode uses the
    running statistics unchanged.
    """
    if train:
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode requires batch size >= 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_mean = (1.0 - momentum) * running_mean + momentum * mean
        new_var = (1.0 - momentum) * running_var + momentum * var
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, gamma, inv_std, train)
    return y, cache, (new_mean, new_var)


def batchnorm_backward(dy, cache):
    xhat, gamma, inv_std, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    g = gamma[None, :, None, None] * inv_std[None, :, None, None]
    if not train:
        return dy * g, dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dxhat = dy * gamma[None, :, None, None]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


def maxpool2x2_forward(x):
    """Non-overlapping 2x2 max pooling; odd edges padded with -inf."""
    n, c, h, w = x.shape
    ph, pw = (h + 1) // 2 * 2, (w + 1) // 2 * 2
    xp = x
    if (ph, pw) != (h, w):
        xp = np.full((n, c, ph, pw), -np.inf)
        xp[:, :, :h, :w] = x
    tiles = xp.reshape(n, c, ph // 2, 2, pw // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = tiles.reshape(n, c, ph // 2, pw // 2, 4)
    arg = flat.argmax(axis=-1)  # first index wins ties
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = (arg, (n, c, h, w), (ph, pw))
    return y, cache


def maxpool2x2_backward(dy, cache):
    arg, (n, c, h, w), (ph, pw) = cache
    dflat = np.zeros((n, c, ph // 2, pw // 2, 4))
    np.put_along_axis(dflat, arg[..., None], dy[..., None], axis=-1)
    dxp = dflat.reshape(n, c, ph // 2, pw // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ph, pw)
    return dxp[:, :, :h, :w]


def relu_forward(x):
    y = np.maximum(x, 0.0)
    return y, (x > 0.0)


def relu_backward(dy, cache):
    return dy * cache


def dropout_forward(x, p: float, rng: Optional[np.random.Generator], train: bool):
    """Inverted dropout: train-mode output has the same expectation as eval."""
    if not train or p == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def dense_forward(x, w, b):
    return x @ w + b, (x, w)


def dense_backward(dy, cache):
    x, w = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, labels, eps: float = 1e-12) -> float:
    """Mean negative log-likelihood of the true class, with clamped logs."""
    n = probs.shape[0]
    picked = probs[np.arange(n), labels]
    return float(-np.mean(np.log(np.clip(picked, eps, 1.0))))


def cross_entropy_backward_logits(probs, labels):
    """Gradient of mean cross-entropy w.r.t. the softmax logits."""
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return grad / n


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class CnnModel:
    descriptor: ArchitectureDescriptor
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray]
    trained: bool = False

    def param_names(self) -> list[str]:
        return sorted(self.params)


def init_model(descriptor: ArchitectureDescriptor = ArchitectureDescriptor(), seed: int = 0) -> CnnModel:
    """He-uniform initialized model; batch-norm scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    k = descriptor.kernel_size
    params: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}
    in_ch = 1
    for i, out_ch in enumerate(descriptor.channels, start=1):
        fan_in = in_ch * k * k
        limit = np.sqrt(6.0 / fan_in)
        params[f"conv{i}_w"] = rng.uniform(-limit, limit, size=(out_ch, in_ch, k, k))
        params[f"conv{i}_b"] = np.zeros(out_ch)
        params[f"bn{i}_gamma"] = np.ones(out_ch)
        params[f"bn{i}_beta"] = np.zeros(out_ch)
        running[f"bn{i}_mean"] = np.zeros(out_ch)
        running[f"bn{i}_var"] = np.ones(out_ch)
        in_ch = out_ch
    flat = descriptor.flat_features
    limit = np.sqrt(6.0 / flat)
    params["fc1_w"] = rng.uniform(-limit, limit, size=(flat, descriptor.fc_width))
    params["fc1_b"] = np.zeros(descriptor.fc_width)
    limit = np.sqrt(6.0 / descriptor.fc_width)
    params["fc2_w"] = rng.uniform(-limit, limit, size=(descriptor.fc_width, descriptor.n_classes))
    params["fc2_b"] = np.zeros(descriptor.n_classes)
    return CnnModel(descriptor, params, running)


def _as_input_batch(images, descriptor: ArchitectureDescriptor) -> np.ndarray:
    """Coerce uint8 images (or floats already in [0,1]) to a (N,1,H,W) batch."""
    x = np.asarray(images)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (H,W) or (N,H,W) images, got shape {x.shape}")
    if x.shape[1:] != descriptor.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match descriptor {descriptor.input_shape}")
    if x.dtype == np.uint8:
        x = x.astype(np.float64) / 255.0
    else:
        x = x.astype(np.float64)
    return x[:, None, :, :]


def forward(model: CnnModel, x: np.ndarray, train: bool = False,
            rng: Optional[np.random.Generator] = None, dropout_p: float = 0.5,
            update_running: bool = False):
    """Run the network on a (N,1,H,W) float batch; returns (probs, caches).

    Train mode uses batch statistics and applies dropout (requires ``rng``
    unless ``dropout_p`` is 0); eval mode is deterministic. Running batch-norm
    statistics are mutated only when ``update_running`` is set.
    """
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != model.descriptor.input_shape:
        raise ValueError(f"bad input shape {x.shape} for descriptor {model.descriptor}")
    p = model.params
    caches = {}
    h = x
    for i in (1, 2, 3):
        h, caches[f"conv{i}"] = conv2d_forward(h, p[f"conv{i}_w"], p[f"conv{i}_b"])
        h, caches[f"bn{i}"], new_stats = batchnorm_forward(
            h, p[f"bn{i}_gamma"], p[f"bn{i}_beta"],
            model.running[f"bn{i}_mean"], model.running[f"bn{i}_var"], train=train,
        )
        if train and update_running:
            model.running[f"bn{i}_mean"], model.running[f"bn{i}_var"] = new_stats
        h, caches[f"pool{i}"] = maxpool2x2_forward(h)
        h, caches[f"relu{i}"] = relu_forward(h)
    n = h.shape[0]
    caches["flat_shape"] = h.shape
    h = h.reshape(n, -1)
    h, caches["fc1"] = dense_forward(h, p["fc1_w"], p["fc1_b"])
    h, caches["relu_fc"] = relu_forward(h)
    h, caches["dropout"] = dropout_forward(h, dropout_p if train else 0.0, rng, train)
    logits, caches["fc2"] = dense_forward(h, p["fc2_w"], p["fc2_b"])
    probs = softmax(logits)
    return probs, caches


def loss_and_grads(model: CnnModel, x: np.ndarray, labels: np.ndarray,
                   rng: Optional[np.random.Generator] = None, dropout_p: float = 0.5,
                   update_running: bool = False):
    """Cross-entropy loss and exact gradients for every parameter."""
    probs, caches = forward(model, x, train=True, rng=rng, dropout_p=dropout_p,
                            update_running=update_running)
    loss = cross_entropy(probs, labels)
    grads: dict[str, np.ndarray] = {}
    d = cross_entropy_backward_logits(probs, labels)
    d, grads["fc2_w"], grads["fc2_b"] = dense_backward(d, caches["fc2"])
    d = dropout_backward(d, caches["dropout"])
    d = relu_backward(d, caches["relu_fc"])
    d, grads["fc1_w"], grads["fc1_b"] = dense_backward(d, caches["fc1"])
    d = d.reshape(caches["flat_shape"])
    for i in (3, 2, 1):
        d = relu_backward(d, caches[f"relu{i}"])
        d = maxpool2x2_backward(d, caches[f"pool{i}"])
        d, grads[f"bn{i}_gamma"], grads[f"bn{i}_beta"] = batchnorm_backward(d, caches[f"bn{i}"])
        d, grads[f"conv{i}_w"], grads[f"conv{i}_b"] = conv2d_backward(d, caches[f"conv{i}"])
    return loss, grads


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """In-place momentum update: v <- mu*v + g (+ wd*w); w <- w - lr*v."""
    for name, w in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * w
        velocity[name] = momentum * velocity[name] + g
        w -= lr * velocity[name]


@dataclass
class TrainHistory:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_lrs: list[float] = field(default_factory=list)


def train(dataset, cfg: TrainConfig, descriptor: Optional[ArchitectureDescriptor] = None):
    """Train on (images, labels) for cfg.epochs of shuffled mini-batches.

    Deterministic given cfg.seed. Mini-batches of size 1 (a possible final
    remainder) are skipped because train-mode batch norm needs two samples.
    Returns the trained model and the per-epoch loss/learning-rate history.
    """
    images, labels = dataset
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise ValueError("images and labels must be parallel")
    if descriptor is None:
        descriptor = ArchitectureDescriptor(input_shape=images.shape[1:])
    rng = np.random.default_rng(cfg.seed)
    model = init_model(descriptor, seed=cfg.seed)
    x_all = _as_input_batch(images, descriptor)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    history = TrainHistory()
    n = len(labels)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss, grads = loss_and_grads(
                model, x_all[idx], labels[idx], rng=rng,
                dropout_p=cfg.dropout_p, update_running=True,
            )
            sgd_step(model.params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            losses.append(loss)
        history.epoch_losses.append(float(np.mean(losses)))
        history.epoch_lrs.append(lr)
    model.trained = True
    return model, history


def predict_proba(model: CnnModel, images):
    """Eval-mode class-1 probability for one image or a batch."""
    if not model.trained:
        raise ValueError("model has not been trained (or loaded from a trained file)")
    single = np.asarray(images).ndim == 2
    x = _as_input_batch(images, model.descriptor)
    probs, _ = forward(model, x, train=False)
    return float(probs[0, 1]) if single else probs[:, 1]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(model: CnnModel, path) -> None:
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "trained": model.trained,
        "descriptor": {
            "input_shape": list(model.descriptor.input_shape),
            "channels": list(model.descriptor.channels),
            "kernel_size": model.descriptor.kernel_size,
            "fc_width": model.descriptor.fc_width,
            "n_classes": model.descriptor.n_classes,
        },
    }
    arrays = {f"param__{k}": v for k, v in model.params.items()}
    arrays.update({f"running__{k}": v for k, v in model.running.items()})
    np.savez(path, meta=json.dumps(meta, sort_keys=True), **arrays)


def load_model(path) -> CnnModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["format_version"] != MODEL_FORMAT_VERSION:
            raise ValueError(
                f"model format version {meta['format_version']} unsupported "
                f"(expected {MODEL_FORMAT_VERSION})"
            )
        d = meta["descriptor"]
        descriptor = ArchitectureDescriptor(
            input_shape=tuple(d["input_shape"]),
            channels=tuple(d["channels"]),
            kernel_size=d["kernel_size"],
            fc_width=d["fc_width"],
            n_classes=d["n_classes"],
        )
        params = {k[len("param__"):]: data[k] for k in data.files if k.startswith("param__")}
        running = {k[len("running__"):]: data[k] for k in data.files if k.startswith("running__")}
    model = CnnModel(descriptor, params, running, trained=bool(meta["trained"]))
    expected = set(init_model(descriptor).params)
    if set(params) != expected:
        raise ValueError("model file is missing parameter arrays")
    return model
