"""Minimal tensor/layer kit with reverse-mode gradients.

All tensors are float64 numpy arrays in channels-last layout: images are
(n, height, width, channels), sequences are (n, length, channels). Every
layer caches what its backward pass needs during forward; backward returns
the gradient with respect to the layer input and accumulates parameter
gradients in place. Convolutions use the cross-correlation convention with
stride 1 and same padding; average pooling uses non-overlapping windows
(truncating rows/columns that do not fill a window).

Checkpoint format (see save_checkpoint): an 8-byte magic ``STCKPT01``,
a little-endian uint64 header length, a UTF-8 JSON header holding the model
identifier, config, seed, scalar extras, and a tensor manifest (name,
shape, offset, count), followed by the concatenated raw little-endian
float64 tensor payloads. Offsets are relative to the payload start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ShapeMismatchError

CHECKPOINT_MAGIC = b"STCKPT01"


class Param:
    """A named parameter tensor with a same-shape gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class Layer:
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []

    def _require_forward(self, cached) -> None:
        if cached is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = Param(f"{name}.w", he_uniform(rng, (in_dim, out_dim), in_dim))
        self.b = Param(f"{name}.b", np.zeros(out_dim))
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatchError(
                f"dense expects (n, {self.in_dim}), got {x.shape}"
            )
        self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, grad_out):
        self._require_forward(self._x)
        self.w.grad += self._x.T @ grad_out
        self.b.grad += grad_out.sum(axis=0)
        return grad_out @ self.w.value.T

    def params(self):
        return [self.w, self.b]


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0.0
        return x * self._mask

    def backward(self, grad_out):
        self._require_forward(self._mask)
        return grad_out * self._mask


class Conv2d(Layer):
    """k x k cross-correlation, stride 1, same (zero) padding, odd kernel."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int, rng: np.random.Generator, name: str):
        if ksize % 2 != 1:
            raise ShapeMismatchError(f"conv2d kernel size must be odd, got {ksize}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        fan_in = ksize * ksize * in_ch
        self.w = Param(f"{name}.w", he_uniform(rng, (ksize, ksize, in_ch, out_ch), fan_in))
        self.b = Param(f"{name}.b", np.zeros(out_ch))
        self._cols = None
        self._in_shape = None

    def _wmat(self) -> np.ndarray:
        # (kh, kw, cin, cout) -> (cin*kh*kw, cout), matching the im2col layout
        return self.w.value.transpose(2, 0, 1, 3).reshape(
            self.in_ch * self.ksize * self.ksize, self.out_ch
        )

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise ShapeMismatchError(
                f"conv2d expects (n, h, w, {self.in_ch}), got {x.shape}"
            )
        n, h, w, _ = x.shape
        k = self.ksize
        self._in_shape = x.shape
        if k == 1:  # 1x1 conv is a plain per-pixel matmul
            cols = x.reshape(n * h * w, self.in_ch)
            self._cols = cols
            out = cols @ self.w.value.reshape(self.in_ch, self.out_ch) + self.b.value
            return out.reshape(n, h, w, self.out_ch)
        pad = k // 2
        padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
        # windows: (n, h, w, c, kh, kw) flattened in (c, kh, kw) order
        cols = windows.reshape(n * h * w, self.in_ch * k * k)
        self._cols = cols
        self._in_shape = x.shape
        out = cols @ self._wmat() + self.b.value
        return out.reshape(n, h, w, self.out_ch)

    def backward(self, grad_out):
        self._require_forward(self._cols)
        n, h, w, _ = self._in_shape
        k = self.ksize
        g = grad_out.reshape(n * h * w, self.out_ch)
        self.b.grad += g.sum(axis=0)
        if k == 1:
            self.w.grad += (self._cols.T @ g).reshape(self.w.value.shape)
            return (g @ self.w.value.reshape(self.in_ch, self.out_ch).T).reshape(self._in_shape)
        pad = k // 2
        gw = (self._cols.T @ g).reshape(self.in_ch, k, k, self.out_ch)
        self.w.grad += gw.transpose(1, 2, 0, 3)
        grad_cols = (g @ self._wmat().T).reshape(n, h, w, self.in_ch, k, k)
        grad_padded = np.zeros((n, h + 2 * pad, w + 2 * pad, self.in_ch))
        for i in range(k):
            for j in range(k):
                grad_padded[:, i : i + h, j : j + w, :] += grad_cols[:, :, :, :, i, j]
        return grad_padded[:, pad : pad + h, pad : pad + w, :]

    def params(self):
        return [self.w, self.b]


class Conv1d(Layer):
    """Length-k cross-correlation on (n, length, channels), same padding."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int, rng: np.random.Generator, name: str):
        if ksize % 2 != 1:
            raise ShapeMismatchError(f"conv1d kernel size must be odd, got {ksize}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        fan_in = ksize * in_ch
        self.w = Param(f"{name}.w", he_uniform(rng, (ksize, in_ch, out_ch), fan_in))
        self.b = Param(f"{name}.b", np.zeros(out_ch))
        self._cols = None
        self._in_shape = None

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.in_ch:
            raise ShapeMismatchError(
                f"conv1d expects (n, length, {self.in_ch}), got {x.shape}"
            )
        n, length, _ = x.shape
        k = self.ksize
        pad = k // 2
        padded = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=1)
        # windows: (n, length, c, k) -> (n*length, k*c)
        cols = windows.transpose(0, 1, 3, 2).reshape(n * length, k * self.in_ch)
        self._cols = cols
        self._in_shape = x.shape
        out = cols @ self.w.value.reshape(k * self.in_ch, self.out_ch) + self.b.value
        return out.reshape(n, length, self.out_ch)

    def backward(self, grad_out):
        self._require_forward(self._cols)
        n, length, _ = self._in_shape
        k = self.ksize
        pad = k // 2
        g = grad_out.reshape(n * length, self.out_ch)
        self.w.grad += (self._cols.T @ g).reshape(self.w.value.shape)
        self.b.grad += g.sum(axis=0)
        grad_cols = (g @ self.w.value.reshape(-1, self.out_ch).T).reshape(
            n, length, k, self.in_ch
        )
        grad_padded = np.zeros((n, length + 2 * pad, self.in_ch))
        for i in range(k):
            grad_padded[:, i : i + length, :] += grad_cols[:, :, i, :]
        return grad_padded[:, pad : pad + length, :]

    def params(self):
        return [self.w, self.b]


class AvgPool2d(Layer):
    """Non-overlapping window average; trailing rows/cols that do not fill
    a window are dropped (and receive zero gradient)."""

    def __init__(self, window: int):
        self.window = window
        self._in_shape = None

    def forward(self, x):
        n, h, w, c = x.shape
        k = self.window
        h2, w2 = h // k, w // k
        if h2 == 0 or w2 == 0:
            raise ShapeMismatchError(f"avgpool2d window {k} larger than input {x.shape}")
        self._in_shape = x.shape
        trimmed = x[:, : h2 * k, : w2 * k, :]
        return trimmed.reshape(n, h2, k, w2, k, c).mean(axis=(2, 4))

    def backward(self, grad_out):
        self._require_forward(self._in_shape)
        n, h, w, c = self._in_shape
        k = self.window
        h2, w2 = h // k, w // k
        grad = np.zeros(self._in_shape)
        expanded = np.repeat(np.repeat(grad_out, k, axis=1), k, axis=2) / (k * k)
        grad[:, : h2 * k, : w2 * k, :] = expanded
        return grad


class AdaptiveAvgPool2d(Layer):
    """Average pooling to a fixed output grid; window i covers input rows
    [floor(i*H/out), ceil((i+1)*H/out))."""

    def __init__(self, out_hw: int):
        self.out_hw = out_hw
        self._in_shape = None

    @staticmethod
    def _edges(size: int, out: int) -> list[tuple[int, int]]:
        return [(i * size // out, -((i + 1) * size // -out)) for i in range(out)]

    def forward(self, x):
        n, h, w, c = x.shape
        if h < self.out_hw or w < self.out_hw:
            raise ShapeMismatchError(
                f"adaptive pool to {self.out_hw} needs input >= {self.out_hw}, got {x.shape}"
            )
        self._in_shape = x.shape
        out = np.zeros((n, self.out_hw, self.out_hw, c))
        for i, (r0, r1) in enumerate(self._edges(h, self.out_hw)):
            for j, (c0, c1) in enumerate(self._edges(w, self.out_hw)):
                out[:, i, j, :] = x[:, r0:r1, c0:c1, :].mean(axis=(1, 2))
        return out

    def backward(self, grad_out):
        self._require_forward(self._in_shape)
        n, h, w, c = self._in_shape
        grad = np.zeros(self._in_shape)
        for i, (r0, r1) in enumerate(self._edges(h, self.out_hw)):
            for j, (c0, c1) in enumerate(self._edges(w, self.out_hw)):
                area = (r1 - r0) * (c1 - c0)
                grad[:, r0:r1, c0:c1, :] += grad_out[:, i : i + 1, j : j + 1, :] / area
        return grad


class AvgPool1d(Layer):
    """Non-overlapping window average along the length axis of (n, length, c)."""

    def __init__(self, window: int):
        self.window = window
        self._in_shape = None

    def forward(self, x):
        n, length, c = x.shape
        k = self.window
        l2 = length // k
        if l2 == 0:
            raise ShapeMismatchError(f"avgpool1d window {k} larger than length {length}")
        self._in_shape = x.shape
        return x[:, : l2 * k, :].reshape(n, l2, k, c).mean(axis=2)

    def backward(self, grad_out):
        self._require_forward(self._in_shape)
        n, length, c = self._in_shape
        k = self.window
        l2 = length // k
        grad = np.zeros(self._in_shape)
        grad[:, : l2 * k, :] = np.repeat(grad_out, k, axis=1) / k
        return grad


class GlobalAvgPool2d(Layer):
    """Mean over the spatial grid: (n, h, w, c) -> (n, c)."""

    def __init__(self):
        self._in_shape = None

    def forward(self, x):
        self._in_shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad_out):
        self._require_forward(self._in_shape)
        n, h, w, c = self._in_shape
        return np.broadcast_to(grad_out[:, None, None, :], self._in_shape) / (h * w)


class Flatten(Layer):
    def __init__(self):
        self._in_shape = None

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        self._require_forward(self._in_shape)
        return grad_out.reshape(self._in_shape)


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient d/dpred = 2 (pred - target) / n."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"mse expects equal shapes, got pred {pred.shape} vs target {target.shape}"
        )
    diff = pred - target
    loss = float(np.mean(diff**2))
    grad = 2.0 * diff / diff.size
    return loss, grad


def sgd_step(params: list[Param], lr: float) -> None:
    """p <- p - lr * grad for every parameter, then zero the gradients."""
    for p in params:
        p.value -= lr * p.grad
        p.grad[:] = 0.0


def zero_grads(params: list[Param]) -> None:
    for p in params:
        p.grad[:] = 0.0


def _fd_probe(loss_fn, flat: np.ndarray, idx: int, eps: float) -> float:
    old = flat[idx]
    flat[idx] = old + eps
    loss_plus = loss_fn()
    flat[idx] = old - eps
    loss_minus = loss_fn()
    flat[idx] = old
    return (loss_plus - loss_minus) / (2.0 * eps)


def _rel_err(numeric: float, analytic: float) -> float:
    denom = abs(numeric) + abs(analytic)
    if denom < 1e-8:
        return 0.0
    return abs(numeric - analytic) / denom


def finite_difference_check(
    loss_fn,
    grad_fn,
    params: list[Param],
    rng: np.random.Generator,
    eps: float = 1e-5,
    samples_per_tensor: int = 10,
    flag_tol: float = 5e-5,
    kink_shifts: tuple[float, ...] = (1e-3, -1e-3),
) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss_fn` re-runs the forward pass and returns the scalar loss;
    `grad_fn` recomputes analytic gradients at the current parameter values
    and returns them keyed by parameter name. Checks every entry of tensors
    with at most `samples_per_tensor` entries, otherwise a random sample.

    A probe whose interval straddles a ReLU kink produces a one-off
    mismatch even for a correct backward pass. Entries exceeding
    `flag_tol` are therefore re-probed at base points shifted by each of
    `kink_shifts` (with the analytic gradient recomputed there); the kink
    moves, a systematic gradient error does not. The reported error for a
    flagged entry is the smallest across the probed base points.
    """
    worst = 0.0
    analytic = grad_fn()
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        if n <= samples_per_tensor:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=samples_per_tensor, replace=False)
        ana = analytic[p.name].reshape(-1)
        for idx in idxs:
            err = _rel_err(_fd_probe(loss_fn, flat, idx, eps), ana[idx])
            for shift in kink_shifts:
                if err <= flag_tol:
                    break
                old = flat[idx]
                flat[idx] = old + shift
                shifted_ana = grad_fn()[p.name].reshape(-1)[idx]
                err = min(err, _rel_err(_fd_probe(loss_fn, flat, idx, eps), shifted_ana))
                flat[idx] = old
            worst = max(worst, err)
    return worst


def save_checkpoint(
    path: str | Path,
    model_id: str,
    config: dict,
    seed: int,
    tensors: dict[str, np.ndarray],
    extras: dict | None = None,
) -> None:
    """Write the documented checkpoint container (see module docstring)."""
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        manifest.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)}
        )
        blobs.append(arr.tobytes())
        offset += arr.size * 8
    header = {
        "model_id": model_id,
        "config": config,
        "seed": seed,
        "extras": extras or {},
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (header, tensors by name)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic): {path}")
    header_len = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    payload = raw[16 + header_len :]
    tensors = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        count = entry["count"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return header, tensors
