"""Small deterministic neural-network kernel on numpy float32 arrays.

Tensors are plain ``np.ndarray`` objects. Image tensors use channels-last
layout ``[B, H, W, C]`` and convolution kernels are stored ``[kh, kw, C, F]``;
that layout keeps the im2col gather contiguous and is what the model uses.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

F32 = np.float32


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


# ---------------------------------------------------------------------------
# dense


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"dense expects x[B,I], W[I,O], b[O]; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ShapeError(f"dense shapes do not conform: {x.shape}, {W.shape}, {b.shape}")
    return x @ W + b


def dense_backward(x: np.ndarray, W: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_x, grad_W, grad_b)`` for ``x @ W + b``."""
    if grad_out.shape != (x.shape[0], W.shape[1]) or x.shape[1] != W.shape[0]:
        raise ShapeError(f"dense backward shapes: x{x.shape} W{W.shape} grad_out{grad_out.shape}")
    return grad_out @ W.T, x.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# convolution (valid padding, channels-last)


def _conv_out(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Gather ``[B*Ho*Wo, kh*kw*C]`` patch rows from ``x[B, H, W, C]``."""
    B, H, W, C = x.shape
    Ho, Wo = _conv_out(H, kh, stride), _conv_out(W, kw, stride)
    sb, sh, sw, sc = x.strides
    view = as_strided(x, (B, Ho, Wo, kh, kw, C), (sb, sh * stride, sw * stride, sh, sw, sc), writeable=False)
    return view.reshape(B * Ho * Wo, kh * kw * C)


def _check_conv(x: np.ndarray, k: np.ndarray, stride: int) -> None:
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv expects x[B,H,W,C] and k[kh,kw,C,F]; got {x.shape}, {k.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    kh, kw, C, _ = k.shape
    if x.shape[3] != C:
        raise ShapeError(f"channel mismatch: input has {x.shape[3]}, kernel expects {C}")
    if kh > x.shape[1] or kw > x.shape[2]:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {x.shape[1]}x{x.shape[2]}")


def conv2d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray, stride: int = 1,
                   return_cols: bool = False):
    """Cross-correlation with valid padding.

    With ``return_cols`` the im2col matrix is returned as well so the backward
    pass can reuse it instead of gathering again.
    """
    _check_conv(x, k, stride)
    kh, kw, C, F = k.shape
    if b.shape != (F,):
        raise ShapeError(f"bias shape {b.shape} != ({F},)")
    B, H, W, _ = x.shape
    Ho, Wo = _conv_out(H, kh, stride), _conv_out(W, kw, stride)
    cols = im2col(x, kh, kw, stride)
    out = (cols @ k.reshape(kh * kw * C, F) + b).reshape(B, Ho, Wo, F)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(x: np.ndarray, k: np.ndarray, grad_out: np.ndarray, stride: int = 1,
                    cols: np.ndarray | None = None, need_grad_x: bool = True):
    """Adjoint of :func:`conv2d_forward`; returns ``(grad_x, grad_k, grad_b)``.

    ``grad_x`` is ``None`` when ``need_grad_x`` is false (first layer).
    """
    _check_conv(x, k, stride)
    kh, kw, C, F = k.shape
    B, H, W, _ = x.shape
    Ho, Wo = _conv_out(H, kh, stride), _conv_out(W, kw, stride)
    if grad_out.shape != (B, Ho, Wo, F):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(B, Ho, Wo, F)}")
    if cols is None:
        cols = im2col(x, kh, kw, stride)
    g2 = grad_out.reshape(B * Ho * Wo, F)
    grad_k = (cols.T @ g2).reshape(k.shape)
    grad_b = g2.sum(axis=0)
    grad_x = None
    if need_grad_x:
        gcols = (g2 @ k.reshape(kh * kw * C, F).T).reshape(B, Ho, Wo, kh, kw, C)
        grad_x = np.zeros(x.shape, dtype=np.result_type(x, grad_out))
        hspan, wspan = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                grad_x[:, i:i + hspan:stride, j:j + wspan:stride, :] += gcols[:, :, :, i, j, :]
    return grad_x, grad_k, grad_b


# ---------------------------------------------------------------------------
# pointwise / pooling


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.multiply(grad_out, x > 0, dtype=grad_out.dtype)


def dropout(x: np.ndarray, p: float, rng: np.random.Generator | None, train: bool = True):
    """Inverted dropout. Returns ``(y, mask)``; in eval mode ``y is x``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, np.ones(x.shape, dtype=x.dtype)
    mask = (rng.random(x.shape) >= p).astype(x.dtype)
    return x * mask * x.dtype.type(1.0 / (1.0 - p)), mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray, p: float) -> np.ndarray:
    if p == 0.0:
        return grad_out
    return grad_out * mask * grad_out.dtype.type(1.0 / (1.0 - p))


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """``[B, H, W, C] -> [B, C]``."""
    if x.ndim != 4 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"global_avg_pool expects [B,H,W,C] with H,W >= 1; got {x.shape}")
    return x.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype)


def global_avg_pool_backward(x_shape: Sequence[int], grad_out: np.ndarray) -> np.ndarray:
    B, H, W, C = x_shape
    scale = grad_out.dtype.type(1.0 / (H * W))
    return np.broadcast_to((grad_out * scale)[:, None, None, :], (B, H, W, C)).copy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, targets: np.ndarray):
    """Mean soft-target cross-entropy and its gradient w.r.t. the logits."""
    if logits.shape != targets.shape or logits.ndim != 2:
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} must both be [B,K]")
    if np.any(targets < 0) or np.any(np.abs(targets.sum(axis=1, dtype=np.float64) - 1.0) > 1e-5):
        raise ValueError("each target row must be a probability vector")
    B = logits.shape[0]
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = float(-(targets * logp).sum() / B)
    if not np.isfinite(loss):
        raise NonFiniteError("cross-entropy loss is not finite")
    grad = ((np.exp(logp) - targets) / B).astype(logits.dtype)
    return loss, grad


# ---------------------------------------------------------------------------
# flat parameter storage


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """Named, ordered views over one contiguous float32 buffer.

    Element-wise arithmetic between two vectors is only defined when their
    segment lists match exactly (same names, shapes and order).
    """

    __slots__ = ("segments", "data", "_index")

    def __init__(self, layout: Iterable[tuple[str, Sequence[int]]], data: np.ndarray | None = None):
        segs, offset, index = [], 0, {}
        for name, shape in layout:
            if name in index:
                raise ValueError(f"duplicate segment name {name!r}")
            seg = Segment(name, tuple(int(s) for s in shape), offset)
            index[name] = len(segs)
            segs.append(seg)
            offset += seg.size
        self.segments: tuple[Segment, ...] = tuple(segs)
        self._index = index
        if data is None:
            data = np.zeros(offset, dtype=F32)
        else:
            data = np.ascontiguousarray(data, dtype=F32).reshape(-1)
            if data.size != offset:
                raise ShapeError(f"buffer has {data.size} values, layout needs {offset}")
        self.data = data

    @property
    def total_len(self) -> int:
        return self.data.size

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(s.name, s.shape) for s in self.segments]

    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def __getitem__(self, name: str) -> np.ndarray:
        seg = self.segments[self._index[name]]
        return self.data[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def items(self):
        for seg in self.segments:
            yield seg.name, self[seg.name]

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.data.copy())

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.layout)

    def congruent(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def check_congruent(self, other: "ParamVector") -> None:
        if not self.congruent(other):
            raise ShapeError("parameter vectors have different segment layouts")

    def bitwise_equal(self, other: "ParamVector") -> bool:
        return self.congruent(other) and self.data.tobytes() == other.data.tobytes()

    def __repr__(self) -> str:
        return f"ParamVector({len(self.segments)} segments, {self.total_len} values)"

    # -- serialization -----------------------------------------------------

    MAGIC = b"FPSW1"

    def to_bytes(self) -> bytes:
        """Length-prefixed segment list, little-endian f32 data, trailing CRC32."""
        parts = [self.MAGIC, struct.pack("<I", len(self.segments))]
        for seg in self.segments:
            name = seg.name.encode("utf-8")
            parts.append(struct.pack("<H", len(name)))
            parts.append(name)
            parts.append(struct.pack("<B", len(seg.shape)))
            parts.append(struct.pack(f"<{len(seg.shape)}I", *seg.shape))
            parts.append(self[seg.name].astype("<f4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamVector":
        if len(blob) < len(cls.MAGIC) + 8 or not blob.startswith(cls.MAGIC):
            raise ValueError("not an FPSW1 parameter payload")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise ValueError("parameter payload CRC mismatch")
        pos = len(cls.MAGIC)
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        layout, chunks = [], []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + ln].decode("utf-8")
            pos += ln
            (nd,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{nd}I", body, pos)
            pos += 4 * nd
            size = int(np.prod(shape, dtype=np.int64))
            chunks.append(np.frombuffer(body, dtype="<f4", count=size, offset=pos))
            pos += 4 * size
            layout.append((name, shape))
        if pos != len(body):
            raise ValueError("trailing bytes in parameter payload")
        data = np.concatenate(chunks).astype(F32) if chunks else np.zeros(0, F32)
        return cls(layout, data)


def param_axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """``a * x + y`` as a new vector."""
    x.check_congruent(y)
    return ParamVector(x.layout, F32(a) * x.data + y.data)


def param_l2_dist(x: ParamVector, y: ParamVector) -> float:
    x.check_congruent(y)
    d = x.data.astype(np.float64) - y.data.astype(np.float64)
    return float(np.sqrt(np.dot(d, d)))


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamVector, **hyper) -> "AdamState":
        return cls(np.zeros_like(params.data), np.zeros_like(params.data), **hyper)


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState) -> ParamVector:
    """One in-place Adam update of ``params``; ``state.step`` advances by one."""
    params.check_congruent(grads)
    if state.m.shape != params.data.shape or state.v.shape != params.data.shape:
        raise ShapeError("optimizer state does not match parameter vector")
    g = grads.data
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient")
    state.step += 1
    b1, b2 = F32(state.beta1), F32(state.beta2)
    state.m *= b1
    state.m += (F32(1.0) - b1) * g
    state.v *= b2
    state.v += (F32(1.0) - b2) * (g * g)
    c1 = F32(1.0 - state.beta1 ** state.step)
    c2 = F32(1.0 - state.beta2 ** state.step)
    update = (state.m / c1) / (np.sqrt(state.v / c2) + F32(state.eps))
    w = params.data
    decay = F32(state.lr * state.weight_decay) * w
    w -= F32(state.lr) * update
    w -= decay
    return params
