"""Neural building blocks on the tensor core.

Standard 3D convolution, nearest-neighbor upsampling, deformable 3D
convolution with learned per-tap offsets and trilinear sampling, batch
normalization, layer normalization, and a windowed multi-head attention
block. All forward functions are pure over immutable tensors and record
their backward rules on the active tape.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    broadcast_to,
    matmul,
    record,
    relu,
    reshape,
    softmax,
    sqrt,
    transpose,
)
from . import tensor as T


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class Conv3dParams:
    """Weights for a dense 3D convolution.

    `padding=None` means "same" output extents at stride 1; kernels must be
    odd along every axis so that a center tap exists.
    """

    weight: Tensor  # (Cout, Cin, kt, kh, kw)
    bias: Tensor  # (Cout,)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] | None = None

    def __post_init__(self):
        if len(self.weight.shape) != 5:
            raise ShapeError(f"conv weight must be rank 5, got {self.weight.shape}")
        co, _, kt, kh, kw = self.weight.shape
        if any(k % 2 == 0 for k in (kt, kh, kw)):
            raise ShapeError(f"kernel extents must be odd, got {(kt, kh, kw)}")
        if self.bias.shape != (co,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({co},)")

    @property
    def kernel(self) -> tuple[int, int, int]:
        return self.weight.shape[2:]

    def effective_padding(self) -> tuple[int, int, int]:
        if self.padding is not None:
            return self.padding
        return tuple(k // 2 for k in self.kernel)


@dataclass
class DeformConv3dParams:
    """Deformable convolution: a main kernel over a fixed tap grid plus an
    offset branch predicting one (dt, dy, dx) displacement per tap.

    The standard grid is 3x3x3 (27 taps, 81 offset channels); any odd
    kernel is accepted, with 3 * n_taps offset channels. The offset branch
    is zero-initialized so the block starts as a plain convolution.
    """

    main: Conv3dParams
    offset_branch: Conv3dParams

    def __post_init__(self):
        if self.main.stride != (1, 1, 1):
            raise ShapeError("deformable conv supports stride 1 only")
        n_taps = int(np.prod(self.main.kernel))
        expected = 3 * n_taps
        if self.offset_branch.weight.shape[0] != expected:
            raise ShapeError(
                f"offset branch must output {expected} channels for kernel "
                f"{self.main.kernel}, got {self.offset_branch.weight.shape[0]}"
            )
        if self.offset_branch.weight.shape[1] != self.main.weight.shape[1]:
            raise ShapeError("offset branch input channels must match main kernel")

    @property
    def n_taps(self) -> int:
        return int(np.prod(self.main.kernel))


@dataclass
class NormParams:
    """Per-channel batch-norm parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(self.running_var.data < 0):
            raise ValueError("running variance must be nonnegative")


@dataclass
class AttnBlockParams:
    """One pre-norm windowed transformer block: LN -> MHSA -> residual,
    LN -> MLP(d -> 2d -> d) -> residual."""

    norm1_gamma: Tensor
    norm1_beta: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    mlp1_w: Tensor
    mlp1_b: Tensor
    mlp2_w: Tensor
    mlp2_b: Tensor
    heads: int = 2

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads != 0:
            raise ShapeError(f"model dim {d} not divisible by {self.heads} heads")


# ---------------------------------------------------------------------------
# Dense 3D convolution
# ---------------------------------------------------------------------------


def conv3d(x: Tensor, p: Conv3dParams) -> Tensor:
    """Cross-correlate NCTHW input with the kernel; "same" extents at
    stride 1 with default padding."""
    if len(x.shape) != 5:
        raise ShapeError(f"conv3d expects NCTHW input, got {x.shape}")
    n, ci, t, h, w = x.shape
    co, ci_w, kt, kh, kw = p.weight.shape
    if ci != ci_w:
        raise ShapeError(f"channel mismatch: input {ci}, kernel {ci_w}")
    pt, ph, pw = p.effective_padding()
    if t + 2 * pt < kt or h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"padded extents smaller than kernel {(kt, kh, kw)}")
    return _conv3d_prim(x, p.weight, p.bias, p.stride, (pt, ph, pw))


def _conv3d_prim(x, weight, bias, stride, padding) -> Tensor:
    st, sh, sw = stride
    pt, ph, pw = padding
    xd, wd, bd = x.data, weight.data, bias.data
    n, ci, t, h, w = xd.shape
    co, _, kt, kh, kw = wd.shape

    xpad = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xpad, (kt, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::st, ::sh, ::sw]
    # Accumulate in f64 and round once, so summation order cannot leak into
    # f32 results (keeps the zero-offset deformable reduction exact).
    out = np.tensordot(win, wd.astype(np.float64, copy=False), axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3)) + bd[None, :, None, None, None]
    result = Tensor(out.astype(xd.dtype, copy=False))
    to, ho, wo = result.shape[2:]

    def _backward(g):
        db = g.sum(axis=(0, 2, 3, 4))
        gwin = np.lib.stride_tricks.sliding_window_view(xpad, (kt, kh, kw), axis=(2, 3, 4))
        gwin = gwin[:, :, ::st, ::sh, ::sw]
        dw = np.tensordot(g, gwin, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        # input gradient: scatter one strided slice per kernel tap
        g_last = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))  # (N,To,Ho,Wo,Co)
        w2 = wd.reshape(co, ci, -1)
        dxp = np.zeros((n, t + 2 * pt, h + 2 * ph, w + 2 * pw, ci), dtype=g.dtype)
        for i, (a, b, c) in enumerate(itertools.product(range(kt), range(kh), range(kw))):
            contrib = np.matmul(g_last, w2[:, :, i])  # (N,To,Ho,Wo,Ci)
            dxp[:, a : a + to * st : st, b : b + ho * sh : sh, c : c + wo * sw : sw] += contrib
        dx = dxp[:, pt : pt + t, ph : ph + h, pw : pw + w].transpose(0, 4, 1, 2, 3)
        return (np.ascontiguousarray(dx), dw, db)

    record("conv3d", (x, weight, bias), result, _backward)
    return result


# ---------------------------------------------------------------------------
# Nearest-neighbor upsampling and the upsample+deform decoder step
# ---------------------------------------------------------------------------


def upsample_nearest(x: Tensor, scale: tuple[int, int, int]) -> Tensor:
    """Duplicate voxels along (T, H, W) by integer factors."""
    st, sh, sw = scale
    xd = x.data
    out = xd
    for axis, s in zip((2, 3, 4), (st, sh, sw)):
        if s != 1:
            out = np.repeat(out, s, axis=axis)
    result = Tensor(np.ascontiguousarray(out))
    n, c, t, h, w = xd.shape

    def _backward(g):
        gr = g.reshape(n, c, t, st, h, sh, w, sw)
        return (gr.sum(axis=(3, 5, 7)),)

    record("upsample_nearest", (x,), result, _backward)
    return result


def upconv3d(x: Tensor, p: DeformConv3dParams, scale: tuple[int, int, int]) -> Tensor:
    """Upsampling transposed-conv substitute: nearest-neighbor upsample by
    `scale`, then a deformable convolution."""
    if any(s not in (1, 2) for s in scale):
        raise ShapeError(f"unsupported upsample scale {scale}")
    return deform_conv3d(upsample_nearest(x, scale), p)


# ---------------------------------------------------------------------------
# Trilinear sampling and deformable convolution
# ---------------------------------------------------------------------------


def trilinear_sample(x: Tensor, q: Tensor) -> Tensor:
    """Sample a T x H x W volume at one fractional (t, y, x) coordinate.

    Interpolates the 8 enclosing voxels; voxels outside the volume
    contribute zero, so the function is total. Differentiable in both the
    volume and the coordinate.
    """
    if len(x.shape) != 3 or q.shape != (3,):
        raise ShapeError(f"trilinear_sample: volume {x.shape}, coord {q.shape}")
    td, hd, wd = x.shape
    ct, cy, cx = (float(v) for v in q.data)
    t0, y0, x0 = int(np.floor(ct)), int(np.floor(cy)), int(np.floor(cx))
    ft, fy, fx = ct - t0, cy - y0, cx - x0

    val = 0.0
    dval = np.zeros(3, dtype=np.float64)
    corners = []
    for dt, dy, dx in itertools.product((0, 1), repeat=3):
        ti, yi, xi = t0 + dt, y0 + dy, x0 + dx
        inside = 0 <= ti < td and 0 <= yi < hd and 0 <= xi < wd
        wt = ft if dt else 1.0 - ft
        wy = fy if dy else 1.0 - fy
        wx = fx if dx else 1.0 - fx
        v = float(x.data[ti, yi, xi]) if inside else 0.0
        val += wt * wy * wx * v
        dval[0] += (1.0 if dt else -1.0) * wy * wx * v
        dval[1] += wt * (1.0 if dy else -1.0) * wx * v
        dval[2] += wt * wy * (1.0 if dx else -1.0) * v
        corners.append((inside, (ti, yi, xi), wt * wy * wx))
    out = Tensor(np.array([val], dtype=x.dtype))

    def _backward(g):
        gs = float(g.reshape(())[()] if g.size == 1 else g.ravel()[0])
        gx = np.zeros(x.shape, dtype=x.dtype)
        for inside, (ti, yi, xi), wgt in corners:
            if inside:
                gx[ti, yi, xi] += gs * wgt
        return (gx, (gs * dval).astype(q.dtype))

    record("trilinear_sample", (x, q), out, _backward)
    return out


def _tap_grid(kernel: tuple[int, int, int]) -> np.ndarray:
    """Tap displacements in lexicographic (t, y, x) order, e.g. 27 rows for
    a 3x3x3 grid."""
    kt, kh, kw = kernel
    rt = range(-(kt // 2), kt // 2 + 1)
    rh = range(-(kh // 2), kh // 2 + 1)
    rw = range(-(kw // 2), kw // 2 + 1)
    return np.array(list(itertools.product(rt, rh, rw)), dtype=np.float64)


def _deform_coords(offd, taps, t, h, w):
    """Per-tap sampling coordinates: base voxel + tap + offset, clamped to
    [-1, extent] so out-of-range probes stay bounded (and contribute 0)."""
    n, k = offd.shape[0], taps.shape[0]
    base_t = np.arange(t, dtype=offd.dtype)[None, None, :, None, None]
    base_y = np.arange(h, dtype=offd.dtype)[None, None, None, :, None]
    base_x = np.arange(w, dtype=offd.dtype)[None, None, None, None, :]
    tap = taps.astype(offd.dtype)
    raw_t = offd[:, :, 0] + tap[None, :, 0, None, None, None] + base_t
    raw_y = offd[:, :, 1] + tap[None, :, 1, None, None, None] + base_y
    raw_x = offd[:, :, 2] + tap[None, :, 2, None, None, None] + base_x
    ct = np.clip(raw_t, -1.0, float(t))
    cy = np.clip(raw_y, -1.0, float(h))
    cx = np.clip(raw_x, -1.0, float(w))
    interior = (
        ((raw_t > -1.0) & (raw_t < t)),
        ((raw_y > -1.0) & (raw_y < h)),
        ((raw_x > -1.0) & (raw_x < w)),
    )
    p = t * h * w
    flat = lambda a: a.reshape(n, k, p)
    return (flat(ct), flat(cy), flat(cx)), tuple(flat(m) for m in interior)


def _corner_iter(ct, cy, cx, t, h, w):
    """Yield the 8 trilinear corners: flat voxel index, validity mask and
    the three per-axis weights."""
    t0 = np.floor(ct)
    y0 = np.floor(cy)
    x0 = np.floor(cx)
    ft, fy, fx = ct - t0, cy - y0, cx - x0
    t0 = t0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    for dt, dy, dx in itertools.product((0, 1), repeat=3):
        ti, yi, xi = t0 + dt, y0 + dy, x0 + dx
        valid = (ti >= 0) & (ti < t) & (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        flat = (np.clip(ti, 0, t - 1) * h + np.clip(yi, 0, h - 1)) * w + np.clip(xi, 0, w - 1)
        wt = ft if dt else 1.0 - ft
        wy = fy if dy else 1.0 - fy
        wx = fx if dx else 1.0 - fx
        yield (dt, dy, dx), flat, valid, wt, wy, wx


def _gather(xv, flat):
    """vals[n, k, c, p] = xv[n, c, flat[n, k, p]]"""
    n, c, _ = xv.shape
    return xv[
        np.arange(n)[:, None, None, None],
        np.arange(c)[None, None, :, None],
        flat[:, :, None, :],
    ]


def deform_conv3d(x: Tensor, p: DeformConv3dParams) -> Tensor:
    """Deformable 3D convolution.

    The offset branch predicts a displacement for every tap of the main
    kernel grid at every output voxel; the main kernel is then applied to
    trilinear samples of the input at the displaced positions. Offsets are
    shared across input channels. With zero offsets this reduces exactly to
    `conv3d` with the main weights.
    """
    if len(x.shape) != 5:
        raise ShapeError(f"deform_conv3d expects NCTHW input, got {x.shape}")
    if x.shape[1] != p.main.weight.shape[1]:
        raise ShapeError(
            f"channel mismatch: input {x.shape[1]}, kernel {p.main.weight.shape[1]}"
        )
    offsets = conv3d(x, p.offset_branch)
    return _deform_prim(x, p.main.weight, p.main.bias, offsets, p.main.kernel)


def _deform_prim(x, weight, bias, offsets, kernel) -> Tensor:
    n, ci, t, h, w = x.shape
    co = weight.shape[0]
    taps = _tap_grid(kernel)
    k = taps.shape[0]
    pvox = t * h * w
    xd, wd, bd = x.data, weight.data, bias.data
    wr = wd.reshape(co, ci, k)
    xv = xd.reshape(n, ci, pvox)
    off5 = offsets.data.reshape(n, k, 3, t, h, w)
    (ct, cy, cx), interior = _deform_coords(off5, taps, t, h, w)

    sampled = np.zeros((n, k, ci, pvox), dtype=xd.dtype)
    for _, flat, valid, wt, wy, wx in _corner_iter(ct, cy, cx, t, h, w):
        m = (wt * wy * wx) * valid
        sampled += _gather(xv, flat) * m[:, :, None, :]
    # f64 accumulation, as in _conv3d_prim
    out = np.tensordot(wr.astype(np.float64, copy=False), sampled, axes=([1, 2], [2, 1]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2)).reshape(n, co, t, h, w)
    out = out + bd[None, :, None, None, None]
    result = Tensor(out.astype(xd.dtype, copy=False))

    def _backward(g):
        gr = g.reshape(n, co, pvox)
        db = gr.sum(axis=(0, 2))
        # dL/d(sampled value at tap k, channel c, voxel p)
        dsamp = np.einsum("nop,ocg->ngcp", gr, wr, optimize=True)
        samp = np.zeros((n, k, ci, pvox), dtype=xd.dtype)
        dxv = np.zeros(n * ci * pvox, dtype=np.float64)
        chan_off = (np.arange(ci) * pvox)[None, None, :, None]
        batch_off = (np.arange(n) * ci * pvox)[:, None, None, None]
        dft = np.zeros((n, k, pvox), dtype=np.float64)
        dfy = np.zeros((n, k, pvox), dtype=np.float64)
        dfx = np.zeros((n, k, pvox), dtype=np.float64)
        for (dt, dy, dx), flat, valid, wt, wy, wx in _corner_iter(ct, cy, cx, t, h, w):
            vals = _gather(xv, flat) * valid[:, :, None, :]
            wc = wt * wy * wx
            samp += vals * wc[:, :, None, :]
            contrib = dsamp * vals
            contrib_sum = contrib.sum(axis=2)  # over input channels
            dft += contrib_sum * ((1.0 if dt else -1.0) * wy * wx)
            dfy += contrib_sum * (wt * (1.0 if dy else -1.0) * wx)
            dfx += contrib_sum * (wt * wy * (1.0 if dx else -1.0))
            scatter = dsamp * (wc * valid)[:, :, None, :]
            idx = flat[:, :, None, :] + chan_off + batch_off
            dxv += np.bincount(idx.ravel(), weights=scatter.ravel(), minlength=dxv.size)
        dw = np.einsum("nop,ngcp->ocg", gr, samp, optimize=True).reshape(wd.shape)
        dx = dxv.reshape(n, ci, t, h, w).astype(xd.dtype)
        doff = np.empty((n, k, 3, pvox), dtype=xd.dtype)
        doff[:, :, 0] = dft * interior[0]
        doff[:, :, 1] = dfy * interior[1]
        doff[:, :, 2] = dfx * interior[2]
        return (dx, dw.astype(wd.dtype), db, doff.reshape(offsets.shape))

    record("deform_conv3d", (x, weight, bias, offsets), result, _backward)
    return result


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def _per_channel(t5: Tensor, vec: Tensor) -> Tensor:
    """Broadcast a per-channel vector over an NCTHW tensor."""
    c = vec.shape[0]
    return broadcast_to(reshape(vec, (1, c, 1, 1, 1)), t5.shape)


def batchnorm3d(x: Tensor, p: NormParams, mode: str = "train") -> Tensor:
    """Normalize each channel over (N, T, H, W).

    Train mode uses the batch statistics (well defined even at N=1, where
    it degenerates to per-channel volume normalization) and updates the
    running statistics in `p`; infer mode reads the running statistics and
    mutates nothing.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    axes = (0, 2, 3, 4)
    if mode == "train":
        mu = x.mean(axes=axes, keepdims=True)
        xc = x - broadcast_to(mu, x.shape)
        var = (xc * xc).mean(axes=axes, keepdims=True)
        y = xc / broadcast_to(sqrt(var + p.eps), x.shape)
        m = p.momentum
        batch_mu = mu.data.reshape(-1)
        batch_var = var.data.reshape(-1)
        p.running_mean = Tensor((1 - m) * p.running_mean.data + m * batch_mu)
        p.running_var = Tensor((1 - m) * p.running_var.data + m * batch_var)
    else:
        denom = np.sqrt(p.running_var.data + p.eps).astype(x.dtype)
        y = (x - _per_channel(x, Tensor(p.running_mean.data.astype(x.dtype)))) * _per_channel(
            x, Tensor((1.0 / denom).astype(x.dtype))
        )
    return y * _per_channel(x, p.gamma) + _per_channel(x, p.beta)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learnable scale and shift."""
    mu = x.mean(axes=-1, keepdims=True)
    xc = x - broadcast_to(mu, x.shape)
    var = (xc * xc).mean(axes=-1, keepdims=True)
    y = xc / broadcast_to(sqrt(var + eps), x.shape)
    shape = (1,) * (len(x.shape) - 1) + (gamma.shape[0],)
    return y * broadcast_to(reshape(gamma, shape), x.shape) + broadcast_to(
        reshape(beta, shape), x.shape
    )


# ---------------------------------------------------------------------------
# Windowed multi-head self-attention block
# ---------------------------------------------------------------------------


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out = matmul(x, w)
    shape = (1,) * (len(out.shape) - 1) + (b.shape[0],)
    return out + broadcast_to(reshape(b, shape), out.shape)


def attn_block(
    x: Tensor, p: AttnBlockParams, window: int = 8, collect: dict | None = None
) -> Tensor:
    """Pre-norm transformer block over non-overlapping spatial windows.

    Each window of `window**2` pixels is treated as a token sequence with
    channel features; multi-head self-attention and a 2-layer MLP are
    applied with residual connections. Output shape equals input shape.
    `collect`, when given, receives the raw attention weights for
    inspection.
    """
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"spatial extents {(h, w)} not multiples of window {window}")
    d = p.wq.shape[0]
    if d != c:
        raise ShapeError(f"attention dim {d} != channels {c}")
    heads = p.heads
    hd = d // heads
    hb, wb = h // window, w // window

    tok = reshape(x, (n, c, hb, window, wb, window))
    tok = transpose(tok, (0, 2, 4, 3, 5, 1))
    tok = reshape(tok, (n * hb * wb, window * window, c))
    s = window * window

    def split_heads(t):
        t = reshape(t, (t.shape[0], s, heads, hd))
        return transpose(t, (0, 2, 1, 3))

    n1 = layer_norm(tok, p.norm1_gamma, p.norm1_beta)
    q = split_heads(_affine(n1, p.wq, p.bq))
    k = split_heads(_affine(n1, p.wk, p.bk))
    v = split_heads(_affine(n1, p.wv, p.bv))
    logits = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    attn = softmax(logits)
    if collect is not None:
        collect["attn"] = attn.data
    ctx = matmul(attn, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (tok.shape[0], s, c))
    tok = tok + _affine(ctx, p.wo, p.bo)

    n2 = layer_norm(tok, p.norm2_gamma, p.norm2_beta)
    hidden = relu(_affine(n2, p.mlp1_w, p.mlp1_b))
    tok = tok + _affine(hidden, p.mlp2_w, p.mlp2_b)

    out = reshape(tok, (n, hb, wb, window, window, c))
    out = transpose(out, (0, 5, 1, 3, 2, 4))
    return reshape(out, (n, c, h, w))
