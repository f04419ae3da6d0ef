"""A small numpy Unet-4 score-map detector with exact backprop and Adam.

Tensors are float64 arrays laid out (N, C, H, W). Every layer is a pair of
``*_forward`` / ``*_backward`` functions; the forward returns a cache that
the backward consumes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
DEFAULT_CHANNELS = (8, 16, 32, 64)


# ---------------------------------------------------------------------------
# layers

def conv3x3_forward(x, w):
    """'Same' 3x3 cross-correlation, zero padded, no bias."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # N, H, W, O
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), (x, w)


def conv3x3_backward(dy, cache):
    x, w = cache
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))
    dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))  # O, C, 3, 3
    # gradient wrt input is a 'same' correlation with the flipped, transposed kernel
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = conv3x3_forward(dy, w_t)
    return dx, dw


def conv1x1_forward(x, w, b):
    y = np.tensordot(w[:, :, 0, 0], x, axes=([1], [1])).transpose(1, 0, 2, 3) + b[None, :, None, None]
    return np.ascontiguousarray(y), (x, w)


def conv1x1_backward(dy, cache):
    x, w = cache
    dw = np.tensordot(dy, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
    db = dy.sum(axis=(0, 2, 3))
    dx = np.tensordot(w[:, :, 0, 0], dy, axes=([0], [1])).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Per-channel batch norm. In train mode the running stats are updated in place."""
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= BN_MOMENTUM
        running_mean += (1 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1 - BN_MOMENTUM) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, gamma)


def batchnorm_backward(dy, cache):
    """Backward through train-mode batch statistics."""
    xhat, inv_std, gamma = cache
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def maxpool2_forward(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2_gather(x, idx):
    """Pool ``x`` with precomputed per-window switches ``idx``."""
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]


def maxpool2_backward(dy, cache):
    idx, shape = cache
    n, c, h, w = shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def upsample2_forward(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(dy):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def sigmoid(x):
    # split by sign for overflow safety
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# Unet

def _block_names(channels):
    """(name, in_ch, out_ch) for every conv+BN+ReLU block, in forward order."""
    c = list(channels)
    blocks = []
    cin = 1
    for lvl, ch in enumerate(c):
        blocks += [(f"enc{lvl}.0", cin, ch), (f"enc{lvl}.1", ch, ch)]
        cin = ch
    bott = 2 * c[-1]
    blocks += [("bott.0", c[-1], bott), ("bott.1", bott, bott)]
    cin = bott
    for lvl in reversed(range(len(c))):
        ch = c[lvl]
        blocks += [(f"dec{lvl}.up", cin, ch), (f"dec{lvl}.0", 2 * ch, ch), (f"dec{lvl}.1", ch, ch)]
        cin = ch
    return blocks


def parameter_count(channels=DEFAULT_CHANNELS) -> int:
    """Trainable parameters: 3x3 weights + BN gamma/beta per block, plus the 1x1 head."""
    total = sum(9 * ci * co + 2 * co for _, ci, co in _block_names(channels))
    return total + channels[0] + 1


DEFAULT_PARAMETER_COUNT = 540_929


class Unet:
    """Four-level Unet mapping a gray image to a per-pixel keypoint probability.

    Encoder levels are two conv blocks followed by 2x2 max pooling; decoder
    levels upsample (nearest), apply one conv block, concatenate the skip and
    apply two more conv blocks. The head is a 1x1 conv and a sigmoid.
    """

    levels = 4

    def __init__(self, channels=DEFAULT_CHANNELS, rng: np.random.Generator | None = None):
        channels = tuple(int(c) for c in channels)
        if len(channels) != self.levels or min(channels) < 1:
            raise ValueError("channel plan must list 4 positive widths")
        self.channels = channels
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(0) if rng is None else rng
        for name, cin, cout in _block_names(channels):
            # He-uniform for ReLU layers
            bound = np.sqrt(6.0 / (9 * cin))
            self.params[f"{name}.w"] = rng.uniform(-bound, bound, size=(cout, cin, 3, 3))
            self.params[f"{name}.gamma"] = np.ones(cout)
            self.params[f"{name}.beta"] = np.zeros(cout)
            self.buffers[f"{name}.mean"] = np.zeros(cout)
            self.buffers[f"{name}.var"] = np.ones(cout)
        bound = np.sqrt(6.0 / channels[0])
        self.params["head.w"] = rng.uniform(-bound, bound, size=(1, channels[0], 1, 1))
        self.params["head.b"] = np.zeros(1)
        n = sum(p.size for p in self.params.values())
        assert n == parameter_count(channels)
        if channels == DEFAULT_CHANNELS:
            assert n == DEFAULT_PARAMETER_COUNT

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> Unet:
        other = Unet.__new__(Unet)
        other.channels = self.channels
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    # -- forward / backward -------------------------------------------------

    def _block_forward(self, name, x, train, caches, freeze=None):
        y, c_conv = conv3x3_forward(x, self.params[f"{name}.w"])
        y, c_bn = batchnorm_forward(y, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                                    self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"], train)
        if freeze is None:
            y, c_relu = relu_forward(y)
        else:
            c_relu = freeze[name][2]
            y = y * c_relu
        caches[name] = (c_conv, c_bn, c_relu)
        return y

    def _block_backward(self, name, dy, caches, grads):
        c_conv, c_bn, c_relu = caches[name]
        dy = relu_backward(dy, c_relu)
        dy, grads[f"{name}.gamma"], grads[f"{name}.beta"] = batchnorm_backward(dy, c_bn)
        dx, grads[f"{name}.w"] = conv3x3_backward(dy, c_conv)
        return dx

    def forward(self, x, train: bool = False, freeze=None):
        """Score maps for a batch ``x`` of shape (N, 1, H, W); returns (S, cache).

        H and W must be divisible by 16. In train mode the batch statistics are
        used (and running stats updated); the cache is needed by ``backward``.
        ``freeze`` takes the cache of an earlier pass and reuses its ReLU masks
        and pooling switches, i.e. evaluates the same smooth piece of the
        network (used by finite-difference checks).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (N, 1, H, W), got {x.shape}")
        div = 2 ** self.levels
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(f"input dims {x.shape[2:]} not divisible by {div}")
        caches = {}
        skips, pools = [], []
        h = x
        for lvl in range(self.levels):
            h = self._block_forward(f"enc{lvl}.0", h, train, caches, freeze)
            h = self._block_forward(f"enc{lvl}.1", h, train, caches, freeze)
            skips.append(h)
            if freeze is None:
                h, c_pool = maxpool2_forward(h)
            else:
                c_pool = freeze["pools"][lvl]
                h = maxpool2_gather(h, c_pool[0])
            pools.append(c_pool)
        h = self._block_forward("bott.0", h, train, caches, freeze)
        h = self._block_forward("bott.1", h, train, caches, freeze)
        for lvl in reversed(range(self.levels)):
            h = self._block_forward(f"dec{lvl}.up", upsample2_forward(h), train, caches, freeze)
            h = np.concatenate([skips[lvl], h], axis=1)
            h = self._block_forward(f"dec{lvl}.0", h, train, caches, freeze)
            h = self._block_forward(f"dec{lvl}.1", h, train, caches, freeze)
        z, c_head = conv1x1_forward(h, self.params["head.w"], self.params["head.b"])
        s = sigmoid(z)
        caches["pools"] = pools
        caches["skip_channels"] = [t.shape[1] for t in skips]
        caches["head"] = c_head
        caches["s"] = s
        return s, caches

    def backward(self, cache, ds) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss wrt every parameter, given dL/dS."""
        s = cache["s"]
        ds = np.asarray(ds, dtype=np.float64)
        if ds.shape != s.shape:
            raise ValueError(f"gradient shape {ds.shape} does not match score map {s.shape}")
        grads: dict[str, np.ndarray] = {}
        dz = ds * s * (1.0 - s)
        dh, grads["head.w"], grads["head.b"] = conv1x1_backward(dz, cache["head"])
        dskips = {}
        for lvl in range(self.levels):
            dh = self._block_backward(f"dec{lvl}.1", dh, cache, grads)
            dh = self._block_backward(f"dec{lvl}.0", dh, cache, grads)
            c_skip = cache["skip_channels"][lvl]
            dskips[lvl], dh = dh[:, :c_skip], dh[:, c_skip:]
            dh = upsample2_backward(self._block_backward(f"dec{lvl}.up", dh, cache, grads))
        dh = self._block_backward("bott.1", dh, cache, grads)
        dh = self._block_backward("bott.0", dh, cache, grads)
        for lvl in reversed(range(self.levels)):
            dh = maxpool2_backward(dh, cache["pools"][lvl]) + dskips[lvl]
            dh = self._block_backward(f"enc{lvl}.1", dh, cache, grads)
            dh = self._block_backward(f"enc{lvl}.0", dh, cache, grads)
        return {k: grads[k] for k in self.params}

    def score_map(self, img) -> np.ndarray:
        """Eval-mode score map for one gray image of any size (reflect-padded to /16)."""
        img = np.asarray(img, dtype=np.float64)
        h, w = img.shape
        div = 2 ** self.levels
        ph, pw = -h % div, -w % div
        if ph or pw:
            img = np.pad(img, ((0, ph), (0, pw)), mode="reflect" if min(h, w) > max(ph, pw) else "symmetric")
        s, _ = self.forward(img[None, None], train=False)
        return s[0, 0, :h, :w]



# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Bias-corrected Adam over a dict of parameter arrays (updated in place)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"GLAM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Serialize named float64 arrays (magic, version, then name/rank/dims/payload records)."""
    from .imaging import atomic_write_bytes

    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes(order="C"))
    atomic_write_bytes(path, b"".join(out))


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 8
    tensors = {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated record at byte offset {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return tensors


def save_checkpoint(path, model: Unet, adam: Adam | None = None, extra: dict | None = None) -> None:
    tensors = {f"param.{k}": v for k, v in model.params.items()}
    tensors.update({f"buffer.{k}": v for k, v in model.buffers.items()})
    tensors["meta.channels"] = np.array(model.channels, dtype=np.float64)
    if adam is not None:
        tensors["adam.hyper"] = np.array([adam.lr, adam.beta1, adam.beta2, adam.eps, adam.t])
        tensors.update({f"adam.m.{k}": v for k, v in adam.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in adam.v.items()})
    for k, v in (extra or {}).items():
        tensors[f"extra.{k}"] = np.atleast_1d(np.asarray(v, dtype=np.float64))
    write_tensors(path, tensors)


def load_checkpoint(path):
    """Returns (model, adam or None, extra dict)."""
    t = read_tensors(path)
    if "meta.channels" not in t:
        raise CheckpointError(f"{path}: missing channel plan")
    model = Unet(tuple(int(c) for c in t["meta.channels"]))
    for k in model.params:
        key = f"param.{k}"
        if key not in t or t[key].shape != model.params[k].shape:
            raise CheckpointError(f"{path}: missing or mis-shaped tensor {key}")
        model.params[k] = t[key].copy()
    for k in model.buffers:
        model.buffers[k] = t[f"buffer.{k}"].copy()
    adam = None
    if "adam.hyper" in t:
        lr, b1, b2, eps, step = t["adam.hyper"]
        adam = Adam(lr, b1, b2, eps)
        adam.t = int(step)
        adam.m = {k[7:]: v.copy() for k, v in t.items() if k.startswith("adam.m.")}
        adam.v = {k[7:]: v.copy() for k, v in t.items() if k.startswith("adam.v.")}
    extra = {k[6:]: v for k, v in t.items() if k.startswith("extra.")}
    return model, adam, extra
