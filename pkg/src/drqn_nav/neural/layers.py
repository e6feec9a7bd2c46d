"""Differentiable layers with explicit forward/backward passes.

Convolutions run channels-last internally. A strided convolution whose kernel
size is a multiple of the stride is rewritten as a stride-1 convolution over
``stride x stride`` space-to-depth blocks, so every kernel offset becomes one
column block of a single matrix product.
"""
from __future__ import annotations

import numpy as np


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, out):
    return dout * (out > 0)


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


# ---------------------------------------------------------------------------
# Convolution


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    if size < kernel or (size - kernel) % stride:
        raise ValueError(f"input size {size} incompatible with kernel {kernel} / stride {stride}")
    return (size - kernel) // stride + 1


def _kernel_blocks(kernel: np.ndarray, stride: int) -> np.ndarray:
    """(O, C, K, K) kernel -> (C*s*s, kb*kb*O) block matrix (K zero-padded to kb*s)."""
    o, c, k, _ = kernel.shape
    kb = -(-k // stride)
    kp = kb * stride
    if kp != k:
        kernel = np.pad(kernel, ((0, 0), (0, 0), (0, kp - k), (0, kp - k)))
    w = kernel.reshape(o, c, kb, stride, kb, stride)
    # rows ordered (c, p, q) to match the space-to-depth layout, columns (a, b, o)
    return w.transpose(1, 3, 5, 2, 4, 0).reshape(c * stride * stride, kb * kb * o)


def _kernel_from_blocks(wb: np.ndarray, shape, stride: int) -> np.ndarray:
    o, c, k, _ = shape
    kb = -(-k // stride)
    w = wb.reshape(c, stride, stride, kb, kb, o).transpose(5, 0, 3, 1, 4, 2)
    return w.reshape(o, c, kb * stride, kb * stride)[:, :, :k, :k]


def _block_geometry(h, w, k, stride):
    ho, wo = conv_output_size(h, k, stride), conv_output_size(w, k, stride)
    kb = -(-k // stride)
    return ho, wo, ho - 1 + kb, wo - 1 + kb


def _crop_pad(x, need_h, need_w, h_axis):
    sl = [slice(None)] * x.ndim
    sl[h_axis], sl[h_axis + 1] = slice(0, need_h), slice(0, need_w)
    x = x[tuple(sl)]
    ph, pw = need_h - x.shape[h_axis], need_w - x.shape[h_axis + 1]
    if ph or pw:
        pad = [(0, 0)] * x.ndim
        pad[h_axis], pad[h_axis + 1] = (0, ph), (0, pw)
        x = np.pad(x, pad)
    return x


def space_to_depth_nchw(x: np.ndarray, k: int, stride: int, dtype=None, scale=None) -> np.ndarray:
    """(N, C, H, W) -> (N, Hb, Wb, C*s*s) blocks for a ``k``-kernel conv.

    The rearrangement happens in the input dtype (cheap for uint8 images);
    ``dtype``/``scale`` convert afterwards.
    """
    n, c, h, w = x.shape
    _, _, hb, wb = _block_geometry(h, w, k, stride)
    x = _crop_pad(x, hb * stride, wb * stride, 2)
    blocks = x.reshape(n, c, hb, stride, wb, stride).transpose(0, 2, 4, 1, 3, 5).reshape(n, hb, wb, -1)
    if dtype is not None:
        blocks = blocks.astype(dtype)
    if scale is not None:
        blocks *= scale
    return blocks


def space_to_depth_nhwc(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    n, h, w, c = x.shape
    _, _, hb, wb = _block_geometry(h, w, k, stride)
    x = _crop_pad(x, hb * stride, wb * stride, 1)
    if stride == 1:
        return np.ascontiguousarray(x)
    return x.reshape(n, hb, stride, wb, stride, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, hb, wb, -1)


def conv_forward_blocks(blocks: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int, out_hw):
    """Convolution over prepared space-to-depth blocks; returns (N, Ho, Wo, O) and a cache."""
    n, hb, wb, cb = blocks.shape
    o, c, k, _ = kernel.shape
    if cb != c * stride * stride:
        raise ValueError(f"kernel {kernel.shape} does not match input channels")
    ho, wo = out_hw
    kb = hb - ho + 1
    wmat = _kernel_blocks(kernel, stride)
    y = (blocks.reshape(-1, cb) @ wmat).reshape(n, hb, wb, kb, kb, o)
    out = y[:, :ho, :wo, 0, 0] + bias
    for a in range(kb):
        for b in range(kb):
            if a or b:
                out += y[:, a:a + ho, b:b + wo, a, b]
    return out, (blocks, wmat, kernel.shape, stride, ho, wo)


def conv_forward_nhwc(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int):
    """Valid cross-correlation. ``x`` is (N, H, W, C); returns (N, Ho, Wo, O) and a cache."""
    n, h, w, c = x.shape
    o, ck, k, k2 = kernel.shape
    if ck != c or k != k2:
        raise ValueError(f"kernel {kernel.shape} does not match input channels {c}")
    ho, wo, _, _ = _block_geometry(h, w, k, stride)
    out, cache = conv_forward_blocks(space_to_depth_nhwc(x, k, stride), kernel, bias, stride, (ho, wo))
    return out, cache + (x.shape,)


def conv_backward_nhwc(dout: np.ndarray, cache, need_dx: bool = True):
    """Gradients (dx, dkernel, dbias); ``dx`` needs a cache from :func:`conv_forward_nhwc`."""
    blocks, wmat, kshape, stride, ho, wo = cache[:6]
    n = dout.shape[0]
    o = dout.shape[-1]
    _, hb, wb, cb = blocks.shape
    kb = hb - ho + 1
    d = np.zeros((n, hb, wb, kb, kb, o), dtype=dout.dtype)
    for a in range(kb):
        for b in range(kb):
            d[:, a:a + ho, b:b + wo, a, b] = dout
    d = d.reshape(-1, kb * kb * o)
    dwmat = blocks.reshape(-1, cb).T @ d
    dkernel = _kernel_from_blocks(dwmat, kshape, stride)
    dbias = dout.sum(axis=(0, 1, 2))
    dx = None
    if need_dx:
        xshape = cache[6]
        _, h, w, c = xshape
        dblocks = (d @ wmat.T).reshape(n, hb, wb, c, stride, stride)
        dblocks = dblocks.transpose(0, 1, 4, 2, 5, 3).reshape(n, hb * stride, wb * stride, c)
        dx = np.zeros(xshape, dtype=dout.dtype)
        hh, ww = min(h, dblocks.shape[1]), min(w, dblocks.shape[2])
        dx[:, :hh, :ww] = dblocks[:, :hh, :ww]
    return dx, dkernel, dbias


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Channels-first convenience wrapper: (C, H, W) or (N, C, H, W) input."""
    single = x.ndim == 3
    xb = x[None] if single else x
    out, _ = conv_forward_nhwc(xb.transpose(0, 2, 3, 1), kernel, bias, stride)
    out = out.transpose(0, 3, 1, 2)
    return out[0] if single else out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1):
    """Channels-first gradients ``(dx, dkernel, dbias)``."""
    single = x.ndim == 3
    xb = x[None] if single else x
    d = dout[None] if single else dout
    _, cache = conv_forward_nhwc(xb.transpose(0, 2, 3, 1), kernel, bias, stride)
    dx, dk, db = conv_backward_nhwc(d.transpose(0, 2, 3, 1), cache)
    dx = dx.transpose(0, 3, 1, 2)
    return (dx[0] if single else dx), dk, db


# ---------------------------------------------------------------------------
# Fully connected


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``W x + b`` for a vector or a batch of row vectors; ``W`` is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} does not match weight {weight.shape}")
    return x @ weight.T + bias


def fully_connected_backward(dout, x, weight):
    """Returns (dx, dW, db)."""
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ weight, d2.T @ x2, d2.sum(axis=0)


# ---------------------------------------------------------------------------
# LSTM


def lstm_cell(x, h, c, wx, wh, b):
    """One LSTM step with gate order (input, forget, output, candidate).

    ``wx`` is (D, 4H), ``wh`` is (H, 4H). Returns ``(h', c', cache)``.
    """
    hidden = h.shape[-1]
    if wx.shape[0] != x.shape[-1] or wh.shape != (hidden, 4 * hidden):
        raise ValueError("LSTM weight shapes do not match input / hidden size")
    z = x @ wx + h @ wh + b
    i = sigmoid(z[..., :hidden])
    f = sigmoid(z[..., hidden:2 * hidden])
    o = sigmoid(z[..., 2 * hidden:3 * hidden])
    g = np.tanh(z[..., 3 * hidden:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, o, g, tc)


def lstm_cell_backward(dh_new, dc_new, cache, wx, wh):
    """Returns (dx, dh, dc, dwx, dwh, db) for one step."""
    x, h, c, i, f, o, g, tc = cache
    do = dh_new * tc
    dc_total = dc_new + dh_new * o * (1 - tc * tc)
    di = dc_total * g
    dg = dc_total * i
    df = dc_total * c
    dc = dc_total * f
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1)
    x2 = x.reshape(-1, x.shape[-1])
    h2 = h.reshape(-1, h.shape[-1])
    dz2 = dz.reshape(-1, dz.shape[-1])
    return dz @ wx.T, dz @ wh.T, dc, x2.T @ dz2, h2.T @ dz2, dz2.sum(axis=0)


# ---------------------------------------------------------------------------
# Dueling head


def dueling_combine(value, advantage):
    """``Q_a = V + A_a - mean(A)``; ``value`` broadcasts against the last axis."""
    advantage = np.asarray(advantage)
    value = np.asarray(value)
    if value.ndim == advantage.ndim:
        return value + advantage - advantage.mean(axis=-1, keepdims=True)
    return value[..., None] + advantage - advantage.mean(axis=-1, keepdims=True)


def dueling_backward(dq):
    """Returns (dV, dA) with dV shaped like ``dq.sum(-1, keepdims=True)``."""
    dv = dq.sum(axis=-1, keepdims=True)
    return dv, dq - dq.mean(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Initialisers


def orthogonal_init(rows: int, cols: int, seed=0, gain: float = 1.0, dtype=np.float64) -> np.ndarray:
    """(Semi-)orthogonal matrix: orthonormal columns if rows >= cols, else rows."""
    if rows < 1 or cols < 1:
        raise ValueError("orthogonal_init needs positive dimensions")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return (gain * q).astype(dtype)


def he_init(shape, fan_in: int, rng, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
