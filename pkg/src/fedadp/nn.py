"""A small NumPy neural-network engine for the VGG-style family.

Only what the simulator needs: 3x3 same-padded convolutions (im2col),
2x2 max-pooling, dense layers, ReLU, softmax cross-entropy, and plain
SGD.  Parameters are float64 throughout so that aggregation and the
structure transformations can make exact-arithmetic guarantees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arch import CONV_KERNEL, ArchitectureSpec, validate_arch
from .errors import ShapeError

_EVAL_BATCH = 128


@dataclass(frozen=True)
class ModelParams:
    """An architecture plus one (weight, bias) pair per conv/dense layer.

    Treated as immutable: every operation returns a new instance and
    never writes to the arrays in place.
    """

    arch: ArchitectureSpec
    params: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", tuple((w, b) for w, b in self.params))

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.params)


def init_model(arch: ArchitectureSpec, seed: int) -> ModelParams:
    """He-normal init for ReLU layers, Xavier for the linear classifier.

    Biases start at zero.  Raises ArchitectureError if ``arch`` breaks a
    structural invariant.
    """
    validate_arch(arch)
    rng = np.random.default_rng(seed)
    params = []
    for layer in arch.layers:
        if layer.kind == "conv":
            fan_in = layer.in_dim * CONV_KERNEL * CONV_KERNEL
            std = np.sqrt(2.0 / fan_in)
            w = rng.normal(0.0, std, (layer.out_dim, layer.in_dim, CONV_KERNEL, CONV_KERNEL))
        elif layer.kind == "dense":
            if layer.activation == "relu":
                std = np.sqrt(2.0 / layer.in_dim)
            else:
                std = np.sqrt(2.0 / (layer.in_dim + layer.out_dim))
            w = rng.normal(0.0, std, (layer.out_dim, layer.in_dim))
        else:
            continue
        params.append((w, np.zeros(layer.out_dim)))
    return ModelParams(arch, tuple(params))


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B,C,H,W) -> (B, C*9, H*W) patch matrix for a 3x3 same-pad conv."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((b, c, 9, h, w), dtype=x.dtype)
    k = 0
    for dh in range(3):
        for dw in range(3):
            cols[:, :, k] = xp[:, :, dh:dh + h, dw:dw + w]
            k += 1
    return cols.reshape(b, c * 9, h * w)


def _col2im3(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Scatter-add the im2col gradient back to (B,C,H,W)."""
    b, c, h, w = shape
    dxp = np.zeros((b, c, h + 2, w + 2), dtype=dcols.dtype)
    d = dcols.reshape(b, c, 9, h, w)
    k = 0
    for dh in range(3):
        for dw in range(3):
            dxp[:, :, dh:dh + h, dw:dw + w] += d[:, :, k]
            k += 1
    return dxp[:, :, 1:-1, 1:-1]


def _pool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, tuple]:
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    xc = x[:, :, : h2 * 2, : w2 * 2]
    windows = xc.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    idx = windows.argmax(axis=4)
    out = np.take_along_axis(windows, idx[..., None], axis=4)[..., 0]
    return out, idx, x.shape


def _pool_backward(dy: np.ndarray, idx: np.ndarray, in_shape: tuple) -> np.ndarray:
    b, c, h, w = in_shape
    h2, w2 = h // 2, w // 2
    dwin = np.zeros((b, c, h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=4)
    dxc = dwin.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2 * 2, w2 * 2)
    if h2 * 2 == h and w2 * 2 == w:
        return dxc
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:, :, : h2 * 2, : w2 * 2] = dxc
    return dx


def _check_inputs(arch: ArchitectureSpec, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 4 or inputs.shape[1:] != tuple(arch.input_shape):
        raise ShapeError(
            f"expected inputs of shape (batch, {', '.join(map(str, arch.input_shape))}), "
            f"got {inputs.shape}"
        )
    return inputs


def _forward(model: ModelParams, x: np.ndarray, keep: bool):
    """Run the stack; optionally keep per-layer caches for backward."""
    caches: list[tuple] = []
    a = x
    p = 0
    for layer in model.arch.layers:
        if layer.kind == "conv":
            w, b = model.params[p]
            p += 1
            in_shape = a.shape
            cols = _im2col3(a)
            wm = w.reshape(w.shape[0], -1)
            z = np.matmul(wm, cols).reshape(a.shape[0], w.shape[0], a.shape[2], a.shape[3])
            z += b[None, :, None, None]
            mask = z > 0
            a = np.where(mask, z, 0.0)
            if keep:
                caches.append(("conv", cols, in_shape, w, mask))
        elif layer.kind == "pool":
            a, idx, in_shape = _pool_forward(a)
            if keep:
                caches.append(("pool", idx, in_shape))
        elif layer.kind == "flatten":
            in_shape = a.shape
            a = a.reshape(a.shape[0], -1)
            if keep:
                caches.append(("flatten", in_shape))
        else:  # dense
            w, b = model.params[p]
            p += 1
            a_in = a
            z = a @ w.T + b
            if layer.activation == "relu":
                mask = z > 0
                a = np.where(mask, z, 0.0)
            else:
                mask = None
                a = z
            if keep:
                caches.append(("dense", a_in, w, mask))
    return a, caches


def forward(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Logits for a batch shaped (batch, C, H, W)."""
    x = _check_inputs(model.arch, inputs)
    logits, _ = _forward(model, x, keep=False)
    return logits


def _softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and d(loss)/d(logits), log-sum-exp stabilised."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def _check_labels(arch: ArchitectureSpec, labels: np.ndarray, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected labels of shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= arch.num_classes):
        raise ValueError(
            f"labels must lie in [0, {arch.num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels.astype(np.int64)


Grads = tuple[tuple[np.ndarray, np.ndarray], ...]


def loss_and_backward(
    model: ModelParams, inputs: np.ndarray, labels: np.ndarray
) -> tuple[float, Grads]:
    """Mean softmax cross-entropy and its gradient w.r.t. every parameter."""
    x = _check_inputs(model.arch, inputs)
    if x.shape[0] == 0:
        raise ValueError("cannot train on an empty batch")
    y = _check_labels(model.arch, labels, x.shape[0])
    logits, caches = _forward(model, x, keep=True)
    loss, d = _softmax_ce(logits, y)

    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for cache in reversed(caches):
        kind = cache[0]
        if kind == "conv":
            _, cols, in_shape, w, mask = cache
            d = np.where(mask, d, 0.0)
            b_, o = d.shape[0], d.shape[1]
            dm = d.reshape(b_, o, -1)
            dw = np.matmul(dm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            db = d.sum(axis=(0, 2, 3))
            d = _col2im3(np.matmul(w.reshape(o, -1).T, dm), in_shape)
            grads.append((dw, db))
        elif kind == "pool":
            _, idx, in_shape = cache
            d = _pool_backward(d, idx, in_shape)
        elif kind == "flatten":
            d = d.reshape(cache[1])
        else:  # dense
            _, a_in, w, mask = cache
            if mask is not None:
                d = np.where(mask, d, 0.0)
            grads.append((d.T @ a_in, d.sum(axis=0)))
            d = d @ w
    grads.reverse()
    return loss, tuple(grads)


def sgd_step(model: ModelParams, grads: Grads, lr: float) -> ModelParams:
    """One plain gradient step: w <- w - lr * g.  lr = 0 is a no-op."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if len(grads) != len(model.params):
        raise ShapeError(f"expected {len(model.params)} gradient pairs, got {len(grads)}")
    new_params = []
    for (w, b), (dw, db) in zip(model.params, grads):
        if dw.shape != w.shape or db.shape != b.shape:
            raise ShapeError(f"gradient shape {dw.shape} does not match weight {w.shape}")
        new_params.append((w - lr * dw, b - lr * db))
    return ModelParams(model.arch, tuple(new_params))


def evaluate(model: ModelParams, inputs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(accuracy, mean loss) over the whole set, batched internally.

    Predictions take the argmax over logits; ties go to the lowest class
    index.
    """
    x = _check_inputs(model.arch, inputs)
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    y = _check_labels(model.arch, labels, n)
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, _EVAL_BATCH):
        xb = x[start : start + _EVAL_BATCH]
        yb = y[start : start + _EVAL_BATCH]
        logits, _ = _forward(model, xb, keep=False)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss_sum += float(-logp[np.arange(xb.shape[0]), yb].sum())
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / n, loss_sum / n
