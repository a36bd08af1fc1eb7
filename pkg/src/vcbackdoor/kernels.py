"""Hot numeric kernels with numba and pure-numpy implementations.

Each public function dispatches on :func:`vcbackdoor._accel.numba_enabled`.
The two paths are written independently (explicit loops vs. vectorised
numpy) and the test-suite checks that they agree.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import njit, numba_enabled

TWO_PI = 2.0 * np.pi


# --------------------------------------------------------------------------
# overlap-add
# --------------------------------------------------------------------------

@njit
def _overlap_add_nb(frames, hop, out_len):
    n_frames, frame_len = frames.shape
    out = np.zeros(out_len, dtype=np.float64)
    for t in range(n_frames):
        start = t * hop
        for i in range(frame_len):
            j = start + i
            if j < out_len:
                out[j] += frames[t, i]
    return out


def _overlap_add_np(frames, hop, out_len):
    n_frames, frame_len = frames.shape
    out = np.zeros(out_len, dtype=np.float64)
    for t in range(n_frames):
        start = t * hop
        stop = min(start + frame_len, out_len)
        if stop > start:
            out[start:stop] += frames[t, : stop - start]
    return out


def overlap_add(frames: np.ndarray, hop: int, out_len: int) -> np.ndarray:
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if numba_enabled():
        return _overlap_add_nb(frames, int(hop), int(out_len))
    return _overlap_add_np(frames, int(hop), int(out_len))


# --------------------------------------------------------------------------
# im2col / col2im for 'same'-padded, stride-1 convolution with odd kernels
# --------------------------------------------------------------------------

@njit
def _im2col_nb(x, k):
    B, C, H, W = x.shape
    p = k // 2
    cols = np.zeros((B, H, W, C * k * k), dtype=x.dtype)
    for b in range(B):
        for c in range(C):
            for di in range(k):
                for dj in range(k):
                    col = (c * k + di) * k + dj
                    for i in range(H):
                        si = i + di - p
                        if si < 0 or si >= H:
                            continue
                        for j in range(W):
                            sj = j + dj - p
                            if 0 <= sj < W:
                                cols[b, i, j, col] = x[b, c, si, sj]
    return cols


def _im2col_np(x, k):
    B, C, H, W = x.shape
    p = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(padded, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, H, W, C * k * k)


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patches of a ``(B, C, H, W)`` map as a ``(B, H, W, C*k*k)`` array."""
    x = np.ascontiguousarray(x)
    if numba_enabled():
        return _im2col_nb(x, int(k))
    return _im2col_np(x, int(k))


@njit
def _col2im_nb(cols, C, k):
    B, H, W, _ = cols.shape
    p = k // 2
    dx = np.zeros((B, C, H, W), dtype=cols.dtype)
    for b in range(B):
        for c in range(C):
            for di in range(k):
                for dj in range(k):
                    col = (c * k + di) * k + dj
                    for i in range(H):
                        si = i + di - p
                        if si < 0 or si >= H:
                            continue
                        for j in range(W):
                            sj = j + dj - p
                            if 0 <= sj < W:
                                dx[b, c, si, sj] += cols[b, i, j, col]
    return dx


def _col2im_np(cols, C, k):
    B, H, W, _ = cols.shape
    p = k // 2
    c6 = cols.reshape(B, H, W, C, k, k)
    padded = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            padded[:, :, di:di + H, dj:dj + W] += c6[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return padded[:, :, p:p + H, p:p + W]


def col2im(cols: np.ndarray, channels: int, k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the map."""
    cols = np.ascontiguousarray(cols)
    if numba_enabled():
        return _col2im_nb(cols, int(channels), int(k))
    return np.ascontiguousarray(_col2im_np(cols, int(channels), int(k)))


# --------------------------------------------------------------------------
# 2x2 max pooling (odd trailing row/column is dropped)
# --------------------------------------------------------------------------

@njit
def _maxpool2_nb(x):
    B, C, H, W = x.shape
    H2 = H // 2
    W2 = W // 2
    out = np.empty((B, C, H2, W2), dtype=x.dtype)
    arg = np.empty((B, C, H2, W2), dtype=np.int8)
    for b in range(B):
        for c in range(C):
            for i in range(H2):
                for j in range(W2):
                    best = x[b, c, 2 * i, 2 * j]
                    idx = 0
                    for q in range(1, 4):
                        v = x[b, c, 2 * i + q // 2, 2 * j + q % 2]
                        if v > best:
                            best = v
                            idx = q
                    out[b, c, i, j] = best
                    arg[b, c, i, j] = idx
    return out, arg


def _maxpool2_np(x):
    B, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    blocks = x[:, :, : 2 * H2, : 2 * W2].reshape(B, C, H2, 2, W2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H2, W2, 4)
    arg = np.argmax(blocks, axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool2(x: np.ndarray):
    """Return pooled map and the in-window argmax (0..3, row-major)."""
    x = np.ascontiguousarray(x)
    if numba_enabled():
        return _maxpool2_nb(x)
    return _maxpool2_np(x)


@njit
def _maxpool2_backward_nb(dout, arg, H, W):
    B, C, H2, W2 = dout.shape
    dx = np.zeros((B, C, H, W), dtype=dout.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(H2):
                for j in range(W2):
                    q = arg[b, c, i, j]
                    dx[b, c, 2 * i + q // 2, 2 * j + q % 2] = dout[b, c, i, j]
    return dx


def _maxpool2_backward_np(dout, arg, H, W):
    B, C, H2, W2 = dout.shape
    onehot = arg[..., None] == np.arange(4, dtype=np.int8)
    blocks = np.where(onehot, dout[..., None], 0).astype(dout.dtype)
    blocks = blocks.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * H2, 2 * W2)
    dx = np.zeros((B, C, H, W), dtype=dout.dtype)
    dx[:, :, : 2 * H2, : 2 * W2] = blocks
    return dx


def maxpool2_backward(dout: np.ndarray, arg: np.ndarray, height: int, width: int) -> np.ndarray:
    dout = np.ascontiguousarray(dout)
    if numba_enabled():
        return _maxpool2_backward_nb(dout, arg, int(height), int(width))
    return _maxpool2_backward_np(dout, arg, int(height), int(width))


# --------------------------------------------------------------------------
# phase-vocoder frequency scaling
# --------------------------------------------------------------------------

@njit
def _pv_shift_nb(mag, phase, ratio, hop, frame_length):
    K, T = mag.shape
    new_mag = np.zeros((K, T), dtype=np.float64)
    new_phase = np.zeros((K, T), dtype=np.float64)
    advance = np.zeros((K, T), dtype=np.float64)
    for k in range(K):
        expected = TWO_PI * k * hop / frame_length
        for t in range(1, T):
            d = phase[k, t] - phase[k, t - 1] - expected
            d = d - TWO_PI * np.round(d / TWO_PI)
            advance[k, t] = expected + d
    for j in range(K):
        src = j / ratio
        lo = int(np.floor(src))
        if lo > K - 1:
            continue
        frac = src - lo
        hi = lo + 1 if lo + 1 < K else K - 1
        s = int(np.floor(src + 0.5))
        if s > K - 1:
            s = K - 1
        acc = phase[s, 0]
        for t in range(T):
            new_mag[j, t] = (1.0 - frac) * mag[lo, t] + frac * mag[hi, t]
            if t > 0:
                acc += ratio * advance[s, t]
            new_phase[j, t] = acc - TWO_PI * np.round(acc / TWO_PI)
    return new_mag, new_phase


def _pv_shift_np(mag, phase, ratio, hop, frame_length):
    K, T = mag.shape
    k = np.arange(K)[:, None]
    expected = TWO_PI * k * hop / frame_length
    d = np.diff(phase, axis=1) - expected
    d -= TWO_PI * np.round(d / TWO_PI)
    advance = np.concatenate([np.zeros((K, 1)), expected + d], axis=1)

    src = np.arange(K) / ratio
    lo = np.floor(src).astype(np.int64)
    valid = lo <= K - 1
    lo_c = np.minimum(lo, K - 1)
    hi = np.minimum(lo_c + 1, K - 1)
    frac = (src - lo)[:, None]
    s = np.minimum(np.floor(src + 0.5).astype(np.int64), K - 1)

    new_mag = (1.0 - frac) * mag[lo_c] + frac * mag[hi]
    acc = phase[s, :1] + np.cumsum(ratio * advance[s], axis=1)
    new_phase = acc - TWO_PI * np.round(acc / TWO_PI)
    new_mag[~valid] = 0.0
    new_phase[~valid] = 0.0
    return new_mag, new_phase


def phase_vocoder_shift(mag: np.ndarray, phase: np.ndarray, ratio: float, hop: int, frame_length: int):
    """Scale every frequency by ``ratio`` keeping frame timing fixed.

    Output bin ``j`` takes its magnitude from (interpolated) input bin
    ``j / ratio`` and its phase by integrating ``ratio`` times the
    instantaneous phase advance of the nearest source bin.  ``ratio == 1``
    reproduces the input phases modulo 2*pi.
    """
    mag = np.ascontiguousarray(mag, dtype=np.float64)
    phase = np.ascontiguousarray(phase, dtype=np.float64)
    if numba_enabled():
        return _pv_shift_nb(mag, phase, float(ratio), int(hop), int(frame_length))
    return _pv_shift_np(mag, phase, float(ratio), int(hop), int(frame_length))
