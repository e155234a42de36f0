"""Residual 3x3 convolutional network with hand-written backprop and ADAM.

Activations are kept channels-last, shape (batch, height, width, channels).
Layer ``l`` holds a weight of shape (out, in, 3, 3) and a bias of shape (out,).
Every layer but the last is followed by a ReLU; the network output is the
input plus the last layer's response.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

KERNEL = 3


@dataclass(frozen=True)
class NetworkSpec:
    depth: int = 8
    width: int = 32
    kernel: int = KERNEL
    residual: bool = True
    init: str = "glorot"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.kernel != KERNEL:
            raise ValueError("only 3x3 kernels are supported")
        if not self.residual:
            raise ValueError("the network is always residual")
        if self.init not in ("glorot", "he"):
            raise ValueError(f"unknown initialisation {self.init!r}")

    def channels(self) -> list[tuple[int, int]]:
        """(in, out) channel pairs per layer."""
        dims = [1] + [self.width] * (self.depth - 1) + [1]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    iterations: int = 20_000
    seed: int = 0
    patch_size: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.patch_size is not None and self.patch_size < KERNEL:
            raise ValueError("patch_size must be at least the kernel size")


@dataclass
class Network:
    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int | None = None
    adam_m: list[np.ndarray] = field(default_factory=list)
    adam_v: list[np.ndarray] = field(default_factory=list)
    adam_t: int = 0
    loss_history: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for (cin, cout), w, b in zip(self.spec.channels(), self.weights, self.biases):
            if w.shape != (cout, cin, KERNEL, KERNEL) or b.shape != (cout,):
                raise ValueError("parameter shapes do not match the network spec")
        if not self.adam_m:
            self.reset_optimizer()

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def params(self) -> list[np.ndarray]:
        """Flat parameter list in layer order: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def reset_optimizer(self) -> None:
        self.adam_m = [np.zeros_like(p) for p in self.params]
        self.adam_v = [np.zeros_like(p) for p in self.params]
        self.adam_t = 0

    def copy(self, reset_optimizer: bool = False) -> "Network":
        net = copy.deepcopy(self)
        if reset_optimizer:
            net.reset_optimizer()
            net.loss_history = []
        return net

    def astype(self, dtype) -> "Network":
        net = Network(self.spec, [w.astype(dtype) for w in self.weights],
                      [b.astype(dtype) for b in self.biases], self.seed,
                      metadata=dict(self.metadata))
        return net

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params)


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_network(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Glorot-uniform (default) or He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for cin, cout in spec.channels():
        fan_in, fan_out = cin * KERNEL * KERNEL, cout * KERNEL * KERNEL
        shape = (cout, cin, KERNEL, KERNEL)
        if spec.init == "glorot":
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, shape)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        weights.append(w.astype(dtype))
        biases.append(np.zeros(cout, dtype=dtype))
    return Network(spec, weights, biases, seed)


def init_variance(spec: NetworkSpec, layer: int) -> float:
    """Target weight variance of ``layer`` under the spec's initialisation."""
    cin, cout = spec.channels()[layer]
    fan_in, fan_out = cin * KERNEL * KERNEL, cout * KERNEL * KERNEL
    return 2.0 / (fan_in + fan_out) if spec.init == "glorot" else 2.0 / fan_in


# --- convolution primitives ------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, 9*C) patches of the zero-padded input, tap-major."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(KERNEL) for j in range(KERNEL)],
                          axis=-1)
    return cols.reshape(n * h * w, KERNEL * KERNEL * c)


def _wmat(w: np.ndarray) -> np.ndarray:
    """(out, in, 3, 3) -> (9*in, out) matching the ``_im2col`` column order."""
    return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Same-size zero-padded correlation; x is NHWC, w is (out, in, 3, 3)."""
    n, h, wd, _ = x.shape
    out = _im2col(x) @ _wmat(w)
    if b is not None:
        out += b
    return out.reshape(n, h, wd, w.shape[0])


def _conv2d_grads(cols: np.ndarray, w: np.ndarray, dz: np.ndarray,
                  need_input: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    cout, cin = w.shape[:2]
    dz2 = dz.reshape(-1, cout)
    dw = (cols.T @ dz2).reshape(KERNEL, KERNEL, cin, cout).transpose(3, 2, 0, 1)
    db = dz2.sum(axis=0)
    dx = None
    if need_input:
        # adjoint of a same-size correlation: correlate with flipped, transposed kernels
        w_adj = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx = conv2d(dz, w_adj)
    return dw, db, dx


# --- forward / backward ----------------------------------------------------

def _as_batch(f: np.ndarray) -> tuple[np.ndarray, bool]:
    f = np.asarray(f)
    if f.ndim == 2:
        return f[None], True
    if f.ndim == 3:
        return f, False
    raise ValueError(f"expected an image or a stack of images, got shape {f.shape}")


def _residual(net: Network, x: np.ndarray, linear: bool = False,
              cache: list | None = None) -> np.ndarray:
    a = x[..., None].astype(net.dtype, copy=False)
    n, h, wd, _ = a.shape
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        cols = _im2col(a)
        if cache is not None:
            cache.append((a, cols))
        z = (cols @ _wmat(w) + b).reshape(n, h, wd, w.shape[0])
        a = z if (l == last or linear) else np.maximum(z, 0)
    return a[..., 0]


def residual(net: Network, f: np.ndarray, linear: bool = False) -> np.ndarray:
    """The learned correction alone; ``linear=True`` drops the ReLUs (test mode)."""
    x, single = _as_batch(f)
    r = _residual(net, x, linear).astype(np.float64)
    return r[0] if single else r


def forward(net: Network, f: np.ndarray) -> np.ndarray:
    """Q(f) = f + residual(f); accepts one image or a stack, returns float64."""
    x, single = _as_batch(f)
    out = np.asarray(x, dtype=np.float64) + _residual(net, x).astype(np.float64)
    return out[0] if single else out


def backward(net: Network, f: np.ndarray, target: np.ndarray) -> tuple[float, Gradients]:
    """Loss 0.5 * mean((Q(f) - target)^2) over batch and pixels, and its gradients."""
    x, _ = _as_batch(f)
    t, _ = _as_batch(target)
    if x.shape != t.shape:
        raise ValueError(f"input {x.shape} and target {t.shape} differ")
    cache: list[tuple[np.ndarray, np.ndarray]] = []
    r = _residual(net, x, cache=cache)
    err = x.astype(net.dtype, copy=False) + r - t.astype(net.dtype, copy=False)
    loss = 0.5 * float(np.mean(err.astype(np.float64) ** 2))

    dz = (err / err.size)[..., None]
    gw: list[np.ndarray] = [None] * len(net.weights)
    gb: list[np.ndarray] = [None] * len(net.weights)
    for l in range(len(net.weights) - 1, -1, -1):
        a_in, cols = cache[l]
        gw[l], gb[l], da = _conv2d_grads(cols, net.weights[l], dz, need_input=l > 0)
        if l > 0:
            # a_in = relu(z_{l-1}); its derivative is the positivity mask of a_in
            dz = da * (a_in > 0)
    return loss, Gradients(gw, gb)


def loss(net: Network, f: np.ndarray, target: np.ndarray) -> float:
    out = forward(net, f)
    return 0.5 * float(np.mean((out - np.asarray(target, dtype=np.float64)) ** 2))


# --- optimisation ----------------------------------------------------------

def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                m: Sequence[np.ndarray], v: Sequence[np.ndarray], t: int, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected ADAM step on parallel lists of arrays."""
    if t < 1:
        raise ValueError("ADAM step counter starts at 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * (g * g)
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


def adam_step(net: Network, grads: Gradients, config: TrainConfig, t: int | None = None) -> Network:
    t = net.adam_t + 1 if t is None else t
    adam_update(net.params, grads.params, net.adam_m, net.adam_v, t, config.learning_rate,
                config.beta1, config.beta2, config.eps)
    net.adam_t = t
    return net


def train(net: Network, inputs: Sequence[np.ndarray], targets: Sequence[np.ndarray],
          config: TrainConfig, log_every: int = 0, log=print) -> Network:
    """Minibatch ADAM on 0.5 * MSE; mutates and returns ``net``.

    Minibatches walk through a fresh seeded permutation each epoch; with
    ``patch_size`` set, each example is a random square crop.
    """
    x = np.asarray(inputs, dtype=net.dtype)
    y = np.asarray(targets, dtype=net.dtype)
    if x.ndim != 3 or len(x) == 0:
        raise ValueError("training needs a non-empty stack of 2-D images")
    if x.shape != y.shape:
        raise ValueError("inputs and targets differ in shape")
    rng = np.random.default_rng(config.seed)
    n, side = len(x), x.shape[1]
    patch = config.patch_size
    if patch is not None and patch >= side:
        patch = None
    order = np.empty(0, dtype=np.int64)
    for it in range(config.iterations):
        if order.size < config.batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        idx, order = order[:config.batch_size], order[config.batch_size:]
        bx, by = x[idx], y[idx]
        if patch is not None:
            r0 = rng.integers(0, side - patch + 1, size=len(idx))
            c0 = rng.integers(0, side - patch + 1, size=len(idx))
            bx = np.stack([bx[i, r:r + patch, c:c + patch] for i, (r, c) in enumerate(zip(r0, c0))])
            by = np.stack([by[i, r:r + patch, c:c + patch] for i, (r, c) in enumerate(zip(r0, c0))])
        value, grads = backward(net, bx, by)
        adam_step(net, grads, config)
        net.loss_history.append(value)
        if log_every and (it + 1) % log_every == 0:
            log(f"iter {it + 1}/{config.iterations} loss {np.mean(net.loss_history[-log_every:]):.3e}")
    return net


# --- persistence -----------------------------------------------------------

def save_network(net: Network, path: str | Path, metadata: dict | None = None) -> None:
    """JSON manifest at ``path`` (.json) plus float32 little-endian tensors in ``.bin``."""
    path = Path(path).with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    shapes = []
    with open(path.with_suffix(".bin"), "wb") as fh:
        for p in net.params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
            shapes.append(list(p.shape))
    manifest = {
        "spec": asdict(net.spec),
        "seed": net.seed,
        "dtype": "float32-le",
        "tensor_order": "w0,b0,w1,b1,...",
        "shapes": shapes,
        "training": {**net.metadata, **(metadata or {})},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_network(path: str | Path, dtype=np.float32) -> Network:
    path = Path(path).with_suffix(".json")
    manifest = json.loads(path.read_text())
    spec = NetworkSpec(**manifest["spec"])
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f4")
    params, pos = [], 0
    for shape in manifest["shapes"]:
        size = int(np.prod(shape))
        params.append(flat[pos:pos + size].reshape(shape).astype(dtype))
        pos += size
    if pos != flat.size:
        raise ValueError("weight file size does not match its manifest")
    return Network(spec, params[0::2], params[1::2], manifest.get("seed"),
                   metadata=manifest.get("training", {}))
