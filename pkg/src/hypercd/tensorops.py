"""Dense numeric kernels with hand-derived gradients.

Tensors are NCHW numpy arrays. Every ``*_forward`` returns ``(output, cache)``
and the matching ``*_backward`` consumes that cache.
"""

from __future__ import annotations

import bisect
import contextlib
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from threadpoolctl import threadpool_limits

SHARED = "shared"
DOMAIN_SPECIFIC = "domain_specific"


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces or receives NaN/Inf."""


class ShapeError(ValueError):
    pass


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"non-finite value in {what} at index {tuple(int(i) for i in bad)}")
    return arr


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvCache:
    x_shape: tuple
    cols: np.ndarray  # (N*Ho*Wo, C*k*k)
    w: np.ndarray
    pad: int
    out_hw: tuple


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int = 0):
    """Stride-1 cross-correlation with zero padding.

    ``x`` is (N, C, H, W), ``w`` is (K_out, K_in, k, k), ``b`` is (K_out,).
    Output spatial size is ``H + 2*pad - k + 1``.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    n, c, h, wd = x.shape
    k_out, k_in, kh, kw = w.shape
    if c != k_in:
        raise ShapeError(f"channel mismatch: input has {c}, weights expect {k_in}")
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    k = kh
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if k == 1:
        cols = x.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(x, (k, k), axis=(2, 3))  # N,C,Ho,Wo,k,k
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    y = cols @ w.reshape(k_out, -1).T + b
    y = y.reshape(n, ho, wo, k_out).transpose(0, 3, 1, 2)
    check_finite(y, "conv2d output")
    return np.ascontiguousarray(y), ConvCache((n, c, h, wd), cols, w, pad, (ho, wo))


def conv2d_backward(cache: ConvCache, dy: np.ndarray):
    """Return ``(dx, dw, db)`` for the forward call that produced ``cache``."""
    n, c, h, wd = cache.x_shape
    ho, wo = cache.out_hw
    k_out, _, k, _ = cache.w.shape
    if dy.shape != (n, k_out, ho, wo):
        raise ShapeError(f"upstream gradient shape {dy.shape} does not match output {(n, k_out, ho, wo)}")
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, k_out)
    dw = (dy_mat.T @ cache.cols).reshape(cache.w.shape)
    db = dy.sum(axis=(0, 2, 3))
    dcols = dy_mat @ cache.w.reshape(k_out, -1)
    pad = cache.pad
    if k == 1:
        dxp = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
    else:
        dcols = dcols.reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dcols.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# pooling (stride 1, valid) for the multi-scale encoder
# ---------------------------------------------------------------------------


def maxpool2d_forward(x: np.ndarray, k: int):
    n, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3)).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, arg, k)


def maxpool2d_backward(cache, dy: np.ndarray) -> np.ndarray:
    x_shape, arg, k = cache
    n, c, h, w = x_shape
    ho, wo = h - k + 1, w - k + 1
    dx = np.zeros(x_shape, dtype=dy.dtype)
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[None, None, :, None] + di
    cols = np.arange(wo)[None, None, None, :] + dj
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(dx, (nn, cc, rows, cols), dy)
    return dx


# ---------------------------------------------------------------------------
# elementwise and normalization
# ---------------------------------------------------------------------------


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # gradient at exactly 0 is 0
    return dy * mask


def l2_normalize(v: np.ndarray, eps: float = 1e-12, axis: int = -1):
    """Scale ``v`` to unit length along ``axis``: ``v / max(|v|, eps)``."""
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    u = v / denom
    return u, (u, denom, norm > eps, axis)


def l2_normalize_backward(cache, du: np.ndarray) -> np.ndarray:
    u, denom, active, axis = cache
    proj = np.sum(u * du, axis=axis, keepdims=True)
    # below eps the map is linear (v / eps) so the projection term vanishes
    return (du - np.where(active, u * proj, 0.0)) / denom


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of ``logits`` (N, C) against integer ``labels`` in [0, C).

    Returns ``(loss, dlogits)``.
    """
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    prob = np.exp(z - logsum[:, None])
    prob[np.arange(n), labels] -= 1.0
    return loss, prob / n


# ---------------------------------------------------------------------------
# parameters and SGD
# ---------------------------------------------------------------------------


@dataclass
class ParamTensor:
    value: np.ndarray
    lr_group: str = SHARED
    decay: bool = True
    grad: np.ndarray = field(default=None, repr=False)
    momentum: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr_group not in (SHARED, DOMAIN_SPECIFIC):
            raise ValueError(f"unknown lr group {self.lr_group!r}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.value)
        if not (self.value.shape == self.grad.shape == self.momentum.shape):
            raise ShapeError("value, grad and momentum must share a shape")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.value.copy(), self.lr_group, self.decay,
                           self.grad.copy(), self.momentum.copy())


@dataclass
class SgdConfig:
    base_lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.005
    gamma: float = 0.1
    milestones: tuple = (120, 160)

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


def lr_at(iteration: int, cfg: SgdConfig) -> float:
    """Step-decayed learning rate: base_lr * gamma ** (#milestones <= iteration).

    Rounded to 15 significant digits, so 0.03 decays to exactly the double
    nearest 0.003 rather than 0.03 * 0.1 = 0.0030000000000000005.
    """
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    lr = cfg.base_lr * cfg.gamma ** bisect.bisect_right(cfg.milestones, iteration)
    return float(f"{lr:.15g}")


def group_lrs(cfg: SgdConfig, iteration: int, domain_lr_multiplier: float = 1.0) -> dict:
    lr = lr_at(iteration, cfg)
    return {SHARED: lr, DOMAIN_SPECIFIC: lr * domain_lr_multiplier}


def sgd_step(params: Iterable[ParamTensor], cfg: SgdConfig, iteration: int,
             domain_lr_multiplier: float = 1.0) -> dict:
    """One momentum-SGD update in place. Returns the per-group learning rates used.

    m <- momentum * m + (grad + weight_decay * value); value <- value - lr * m.
    Weight decay is skipped for parameters with ``decay=False`` (biases).
    """
    lrs = group_lrs(cfg, iteration, domain_lr_multiplier)
    params = list(params)
    for p in params:
        check_finite(p.grad, "gradient")
    for p in params:
        step = p.grad + cfg.weight_decay * p.value if (p.decay and cfg.weight_decay) else p.grad
        p.momentum *= cfg.momentum
        p.momentum += step
        p.value -= lrs[p.lr_group] * p.momentum
    return lrs


def clip_grad_norm(params: Iterable[ParamTensor], max_norm: float | None) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``None`` disables clipping.
    """
    params = list(params)
    norm = float(np.sqrt(sum(np.sum(np.square(p.grad, dtype=np.float64)) for p in params)))
    if not np.isfinite(norm):
        raise NonFiniteError("gradient norm is not finite")
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HCP1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named: Iterable[tuple[str, np.ndarray]]) -> None:
    """Write ``(name, array)`` pairs in the HCP1 layout (float32 payloads)."""
    items = list(named)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            arr = np.asarray(arr)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if off + nlen > len(blob):
            raise CheckpointError(f"{path}: truncated name at byte {off}")
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(blob):
            raise CheckpointError(f"{path}: payload of {name!r} truncated at byte {off}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes at byte {off}")
    return out


# ---------------------------------------------------------------------------
# threading
# ---------------------------------------------------------------------------


def as_seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int, a sequence of ints or an existing SeedSequence."""
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def thread_cap() -> int | None:
    raw = os.environ.get("HYPERCD_THREADS")
    if not raw:
        return None
    cap = int(raw)
    if cap < 1:
        raise ValueError("HYPERCD_THREADS must be a positive integer")
    return cap


@contextlib.contextmanager
def compute_threads(deterministic: bool = False) -> Iterator[None]:
    """Limit BLAS threads: one in deterministic mode, else ``HYPERCD_THREADS`` if set."""
    limit = 1 if deterministic else thread_cap()
    if limit is None:
        yield
        return
    with threadpool_limits(limits=limit):
        yield
