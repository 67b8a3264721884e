"""Minimal tensor engine with reverse-mode autodiff and Adam.

Tensors wrap float64 numpy arrays and record the operations that produced
them; backward() replays the record in reverse topological order. The op set
is exactly what the rate proxy needs: dense/conv3d/batchnorm/maxpool3d, the
LSTM gate arithmetic, and the elementwise pieces of the training loss.
Everything is deterministic: fixed reduction orders, no threading.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np


class Tensor:
    """Node in the computation record."""

    __slots__ = ("data", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, data, parents=(), backward=None, requires_grad=False, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- elementwise -------------------------------------------------------

    def __add__(self, other):
        other = _lift(other)
        out = Tensor(self.data + other.data, (self, other))

        def backward(g):
            self._accum(_unbroadcast(g, self.data.shape))
            other._accum(_unbroadcast(g, other.data.shape))

        out._backward = backward
        return out

    def __sub__(self, other):
        other = _lift(other)
        out = Tensor(self.data - other.data, (self, other))

        def backward(g):
            self._accum(_unbroadcast(g, self.data.shape))
            other._accum(_unbroadcast(-g, other.data.shape))

        out._backward = backward
        return out

    def __mul__(self, other):
        other = _lift(other)
        out = Tensor(self.data * other.data, (self, other))

        def backward(g):
            self._accum(_unbroadcast(g * other.data, self.data.shape))
            other._accum(_unbroadcast(g * self.data, other.data.shape))

        out._backward = backward
        return out

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def matmul(self, other):
        other = _lift(other)
        out = Tensor(self.data @ other.data, (self, other))

        def backward(g):
            self._accum(g @ other.data.T)
            other._accum(self.data.T @ g)

        out._backward = backward
        return out

    __matmul__ = matmul

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), (self,))

        def backward(g):
            self._accum(g * (self.data > 0))

        out._backward = backward
        return out

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(y, (self,))

        def backward(g):
            self._accum(g * y * (1.0 - y))

        out._backward = backward
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, (self,))

        def backward(g):
            self._accum(g * (1.0 - y * y))

        out._backward = backward
        return out

    def abs(self):
        out = Tensor(np.abs(self.data), (self,))

        def backward(g):
            self._accum(g * np.sign(self.data))

        out._backward = backward
        return out

    # -- shape ---------------------------------------------------------------

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))

        def backward(g):
            self._accum(g.reshape(self.data.shape))

        out._backward = backward
        return out

    def sum(self):
        out = Tensor(self.data.sum(), (self,))

        def backward(g):
            self._accum(np.broadcast_to(g, self.data.shape).copy())

        out._backward = backward
        return out

    def gather_rows(self, idx):
        """Select rows along axis 0; gradients scatter-add back."""
        idx = np.asarray(idx, dtype=np.int64)
        out = Tensor(self.data[idx], (self,))

        def backward(g):
            if not self.requires_grad:
                return
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            np.add.at(self.grad, idx, g)

        out._backward = backward
        return out

    # -- record traversal ------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from this scalar node."""
        if self.data.shape != ():
            raise ValueError("backward() requires a scalar loss node")
        order = trace(self)
        for node in order:
            node.grad = None
        self.grad = np.ones(())
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def trace(root: Tensor) -> list:
    """Ordered computation record reachable from root (inputs first)."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Populate .grad on every parameter reachable from the scalar loss."""
    loss.backward()


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def stack(tensors: list, axis: int = 0) -> Tensor:
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), tuple(tensors))

    def backward(g):
        for i, t in enumerate(tensors):
            t._accum(np.take(g, i, axis=axis))

    out._backward = backward
    return out


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b with x rows as samples."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense shape mismatch: {x.shape} @ {w.shape}")
    return x @ w + b


def conv3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3x3 'same' convolution, stride 1, zero padding.

    x: (B, X, Y, Z, Cin); w: (3, 3, 3, Cin, Cout); b: (Cout,).
    Spatial extents are preserved, matching the architecture table.
    """
    bsz, xs, ys, zs, cin = x.shape
    if w.shape[:4] != (3, 3, 3, cin):
        raise ValueError(f"kernel {w.shape} incompatible with input channels {cin}")
    cout = w.shape[4]
    xpad = np.zeros((bsz, xs + 2, ys + 2, zs + 2, cin))
    xpad[:, 1:-1, 1:-1, 1:-1, :] = x.data
    out_data = np.empty((bsz, xs, ys, zs, cout))
    out_data[:] = b.data
    for ox in range(3):
        for oy in range(3):
            for oz in range(3):
                patch = xpad[:, ox:ox + xs, oy:oy + ys, oz:oz + zs, :]
                out_data += patch.reshape(-1, cin).dot(
                    w.data[ox, oy, oz]).reshape(bsz, xs, ys, zs, cout)
    out = Tensor(out_data, (x, w, b))

    def backward_fn(g):
        g_mat = g.reshape(-1, cout)
        b._accum(g_mat.sum(axis=0))
        gxpad = np.zeros_like(xpad)
        gw = np.zeros_like(w.data)
        for ox in range(3):
            for oy in range(3):
                for oz in range(3):
                    patch = xpad[:, ox:ox + xs, oy:oy + ys, oz:oz + zs, :]
                    gw[ox, oy, oz] = patch.reshape(-1, cin).T @ g_mat
                    gxpad[:, ox:ox + xs, oy:oy + ys, oz:oz + zs, :] += (
                        g_mat @ w.data[ox, oy, oz].T
                    ).reshape(bsz, xs, ys, zs, cin)
        w._accum(gw)
        x._accum(gxpad[:, 1:-1, 1:-1, 1:-1, :])

    out._backward = backward_fn
    return out


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling, stride 2, no padding; ties route the gradient to
    the first index in the block."""
    bsz, xs, ys, zs, c = x.shape
    if xs % 2 or ys % 2 or zs % 2:
        raise ValueError(f"maxpool3d requires even spatial extents, got {x.shape}")
    x2, y2, z2 = xs // 2, ys // 2, zs // 2
    blocks = (x.data.reshape(bsz, x2, 2, y2, 2, z2, 2, c)
              .transpose(0, 1, 3, 5, 2, 4, 6, 7)
              .reshape(bsz, x2, y2, z2, 8, c))
    arg = np.argmax(blocks, axis=4)
    out_data = np.take_along_axis(blocks, arg[:, :, :, :, None, :], axis=4)[
        :, :, :, :, 0, :]
    out = Tensor(out_data, (x,))

    def backward_fn(g):
        gblocks = np.zeros_like(blocks)
        np.put_along_axis(gblocks, arg[:, :, :, :, None, :],
                          g[:, :, :, :, None, :], axis=4)
        gx = (gblocks.reshape(bsz, x2, y2, z2, 2, 2, 2, c)
              .transpose(0, 1, 4, 2, 5, 3, 6, 7)
              .reshape(bsz, xs, ys, zs, c))
        x._accum(gx)

    out._backward = backward_fn
    return out


BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str,
              running_mean: np.ndarray, running_var: np.ndarray) -> Tensor:
    """Per-channel (last axis) batch normalization.

    Train mode normalizes by batch statistics, updates the running buffers in
    place with momentum 0.99, and differentiates through the batch statistics.
    Infer mode uses the running buffers. Requires batch size >= 2 in train
    mode (a single sample has no batch variance).
    """
    axes = tuple(range(x.data.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm train mode requires batch size >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= BN_MOMENTUM
        running_mean += (1.0 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1.0 - BN_MOMENTUM) * var
    elif mode == "infer":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_sd = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mean) * inv_sd
    out = Tensor(gamma.data * xhat + beta.data, (x, gamma, beta))

    if mode == "train":
        n = x.data.size // x.data.shape[-1]

        def backward_fn(g):
            beta._accum(g.sum(axis=axes))
            gamma._accum((g * xhat).sum(axis=axes))
            gx = (gamma.data * inv_sd) * (
                g - g.mean(axis=axes) - xhat * (g * xhat).mean(axis=axes))
            x._accum(gx)
    else:

        def backward_fn(g):
            beta._accum(g.sum(axis=axes))
            gamma._accum((g * xhat).sum(axis=axes))
            x._accum(g * (gamma.data * inv_sd))

    out._backward = backward_fn
    return out


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: dict,
              cell_activation: str = "relu"):
    """One LSTM step with per-gate weights.

    Gates f, i, o use sigmoid; candidate g uses ReLU; the updated long-term
    state passes through ``cell_activation`` (relu or tanh) before the output
    gate. params maps 'w_x_f', 'w_h_f', 'b_f', ... for gates f, i, o, g.
    """
    def gate(z, act):
        pre = x @ params[f"w_x_{z}"] + h_prev @ params[f"w_h_{z}"] + params[f"b_{z}"]
        return getattr(pre, act)()

    f = gate("f", "sigmoid")
    i = gate("i", "sigmoid")
    o = gate("o", "sigmoid")
    g = gate("g", "relu")
    c = f * c_prev + i * g
    h = o * getattr(c, cell_activation)()
    return h, c


# ---------------------------------------------------------------------------
# parameters, Adam, checkpoints


class ParamStore:
    """Ordered named parameters (trainable Tensors) and buffers (plain arrays)."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, data) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, data) -> np.ndarray:
        arr = np.asarray(data, dtype=np.float64)
        self.buffers[name] = arr
        return arr

    def n_trainable(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def flat_grads(self) -> dict:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.params.items()}


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state: AdamState, params: dict, grads: dict):
    """Standard bias-corrected Adam step applied in place."""
    state.t += 1
    b1t = 1.0 - state.beta1**state.t
    b2t = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / b1t) / (np.sqrt(v / b2t) + state.eps)
    return params


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


CHECKPOINT_MAGIC = b"CLRMNN1\n"


def save_params(path, store: ParamStore, extras: dict | None = None):
    """Versioned binary checkpoint: magic, JSON manifest, raw float64 blocks."""
    manifest = {
        "version": 1,
        "layers": [{"name": k, "shape": list(v.data.shape), "trainable": True}
                   for k, v in store.params.items()]
                  + [{"name": k, "shape": list(v.shape), "trainable": False}
                     for k, v in store.buffers.items()],
        "extras": extras or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for k in store.params:
            f.write(store.params[k].data.astype("<f8").tobytes())
        for k in store.buffers:
            f.write(store.buffers[k].astype("<f8").tobytes())


def load_params(path):
    """Read a checkpoint; returns (ParamStore, extras dict)."""
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a parameter checkpoint")
        (blob_len,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(blob_len).decode())
        store = ParamStore()
        for layer in manifest["layers"]:
            shape = tuple(layer["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape).copy()
            if layer["trainable"]:
                store.add_param(layer["name"], data)
            else:
                store.add_buffer(layer["name"], data)
    return store, manifest["extras"]


def export_manifest(path, store: ParamStore, extras: dict | None = None):
    """Write the checkpoint manifest alone as JSON."""
    manifest = {
        "version": 1,
        "layers": [{"name": k, "shape": list(v.data.shape), "trainable": True}
                   for k, v in store.params.items()]
                  + [{"name": k, "shape": list(v.shape), "trainable": False}
                     for k, v in store.buffers.items()],
        "extras": extras or {},
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
