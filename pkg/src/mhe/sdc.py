"""Scale-deformable convolution.

A deformable convolution whose kernel tap grid is additionally stretched by
learnable per-pixel, per-axis dilation-rate multipliers. For output pixel
p0 and tap displacement p_n, the sampling coordinate is

    p_i = p0_i + eta_i * p_n_i + d_i(n),     p_j likewise,

where eta = softplus(dil_raw) > 0 is shared across taps and channels (two
values per pixel) and the offsets d are per-tap. Fractional coordinates are
resolved by bilinear sampling with the kernel max(0, 1 - |delta|) per axis,
so taps falling outside [-1, H] x [-1, W] contribute exactly zero, matching
zero-padded convolution. With eta = 1 and d = 0 the operator reduces to a
standard 3x3 convolution with pad k//2.

The backward pass is fully analytic: input gradients transpose-scatter the
bilinear weights; coordinate gradients use the piecewise derivative of the
bilinear kernel (zero at distance >= 1, +1 for grid points at or above the
coordinate, -1 below); dilation-rate gradients chain the coordinate
gradient through the tap displacement and the softplus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import (Tensor, _sigmoid, conv2d, default_dtype, record,
                     softplus_inverse, trace_kinks)

# Sign applied in the dilation-rate chain rule. The gradcheck mutation
# sentinel flips it to prove the finite-difference suite detects a broken
# rule; production value is +1.
_dil_chain_sign = 1.0


def tap_grid(k: int) -> list[tuple[int, int]]:
    """Row-major tap displacements for an odd k x k kernel, centre at (0,0)."""
    if k % 2 == 0 or k < 1:
        raise ShapeError(f"kernel size must be odd and positive, got {k}")
    r = k // 2
    return [(ki - r, kj - r) for ki in range(k) for kj in range(k)]


@dataclass
class SdcParams:
    """Parameters of one scale-deformable convolution layer.

    weight:  (Co, C, k, k) kernel.
    offsets: (N, 2*k*k, H, W); channels [2n, 2n+1] hold the (row, col)
             offset of tap n in pixels, per output pixel.
    dil_raw: (N, 2, H, W) pre-activation of the dilation rates; channel 0
             is the row-axis rate, channel 1 the column-axis rate, both
             mapped through softplus so rates stay positive.
    """

    weight: Tensor
    offsets: Tensor
    dil_raw: Tensor

    def __post_init__(self):
        wd = self.weight.dims
        if len(wd) != 4 or wd[2] != wd[3] or wd[2] % 2 == 0:
            raise ShapeError(f"weight dims {wd} must be (Co,C,k,k) with odd k")
        k = wd[2]
        od, dd = self.offsets.dims, self.dil_raw.dims
        if len(od) != 4 or od[1] != 2 * k * k:
            raise ShapeError(f"offsets dims {od} must have {2 * k * k} channels")
        if len(dd) != 4 or dd[1] != 2:
            raise ShapeError(f"dil_raw dims {dd} must have 2 channels")
        if od[0] != dd[0] or od[2:] != dd[2:]:
            raise ShapeError(f"offsets {od} and dil_raw {dd} extents disagree")

    @property
    def k(self) -> int:
        return self.weight.dims[2]


def _check_instance(xd: np.ndarray, p: SdcParams) -> None:
    if xd.ndim != 4:
        raise ShapeError(f"input must be (N,C,H,W), got {xd.shape}")
    n, c, h, w = xd.shape
    if p.weight.dims[1] != c:
        raise ShapeError(f"channel mismatch: input {c} vs weight {p.weight.dims[1]}")
    if p.offsets.dims[0] != n or p.offsets.dims[2:] != (h, w):
        raise ShapeError(f"offsets dims {p.offsets.dims} do not match input {xd.shape}")
    for t in (p.weight, p.offsets, p.dil_raw):
        if not np.all(np.isfinite(t.data)):
            raise ValueError("non-finite values in scale-deformable conv parameters")


def _tap_coords(xd, offd, dild, k):
    """Sampling coordinates for all taps at once.

    Returns (pi, pj, pn, eta) with pi/pj of shape (T, N, H, W) for the
    T = k*k taps in row-major order, pn the (T, 2) tap displacement grid,
    and eta the (N, 2, H, W) dilation rates after softplus.
    """
    n, c, h, w = xd.shape
    eta = np.logaddexp(np.asarray(0, dild.dtype), dild)  # softplus
    gi = np.arange(h, dtype=xd.dtype)[None, None, :, None]
    gj = np.arange(w, dtype=xd.dtype)[None, None, None, :]
    pn = np.asarray(tap_grid(k), dtype=xd.dtype)
    pni = pn[:, 0][:, None, None, None]
    pnj = pn[:, 1][:, None, None, None]
    off_i = np.moveaxis(offd[:, 0::2], 1, 0)  # (T, N, H, W)
    off_j = np.moveaxis(offd[:, 1::2], 1, 0)
    pi = gi + eta[None, :, 0] * pni + off_i
    pj = gj + eta[None, :, 1] * pnj + off_j
    return pi, pj, pn, eta


def _gather_corners(xd: np.ndarray, pi: np.ndarray, pj: np.ndarray):
    """Corner values and axis weights for bilinear sampling at (pi, pj).

    pi/pj have shape (T, N, H, W). Returns (vals, wi0, wi1, wj0, wj1,
    i0, j0, flats) where vals[(a, b)] is the gathered value at corner
    (i0+a, j0+b), shape (T, N, C, H, W), zeroed outside the grid; the axis
    weights have a singleton channel axis; flats[(a, b)] is the clipped
    flat spatial index with its validity mask.
    """
    n, c, h, w = xd.shape
    fi0, fj0 = np.floor(pi), np.floor(pj)
    i0 = fi0.astype(np.int64)
    j0 = fj0.astype(np.int64)
    di = (pi - fi0)[:, :, None]   # stays in xd's dtype
    dj = (pj - fj0)[:, :, None]
    nn = np.arange(n)[None, :, None, None]
    vals = {}
    flats = {}
    for a, ii in ((0, i0), (1, i0 + 1)):
        for b, jj in ((0, j0), (1, j0 + 1)):
            valid = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
            ii_cl = np.where(valid, ii, 0)
            jj_cl = np.where(valid, jj, 0)
            g = xd[nn, :, ii_cl, jj_cl]          # (T, N, H, W, C)
            g = np.moveaxis(g, -1, 2).copy()     # (T, N, C, H, W)
            g *= valid[:, :, None]
            vals[(a, b)] = g
            flats[(a, b)] = (ii_cl * w + jj_cl, valid)
    one = np.asarray(1, xd.dtype)
    return vals, one - di, di, one - dj, dj, i0, j0, flats


def _weight_per_tap(wd: np.ndarray) -> np.ndarray:
    co, c, k, _ = wd.shape
    return np.moveaxis(wd.reshape(co, c, k * k), 2, 0)  # (T, Co, C)


def _forward_arrays(xd: np.ndarray, wd: np.ndarray, offd: np.ndarray,
                    dild: np.ndarray) -> np.ndarray:
    k = wd.shape[2]
    pi, pj, _, _ = _tap_coords(xd, offd, dild, k)
    trace_kinks(np.floor(pi))
    trace_kinks(np.floor(pj))
    vals, wi0, wi1, wj0, wj1, _, _, _ = _gather_corners(xd, pi, pj)
    samp = (vals[(0, 0)] * (wi0 * wj0) + vals[(0, 1)] * (wi0 * wj1)
            + vals[(1, 0)] * (wi1 * wj0) + vals[(1, 1)] * (wi1 * wj1))
    return np.einsum("toc,tnchw->nohw", _weight_per_tap(wd), samp)


def _backward_arrays(xd, wd, offd, dild, gout):
    """Gradients for input, kernel weights, offsets, and raw dilation rates."""
    n, c, h, w = xd.shape
    co, _, k, _ = wd.shape
    pi, pj, pn, eta = _tap_coords(xd, offd, dild, k)
    vals, wi0, wi1, wj0, wj1, i0, j0, flats = _gather_corners(xd, pi, pj)
    samp = (vals[(0, 0)] * (wi0 * wj0) + vals[(0, 1)] * (wi0 * wj1)
            + vals[(1, 0)] * (wi1 * wj0) + vals[(1, 1)] * (wi1 * wj1))
    wt = _weight_per_tap(wd)
    grad_w = np.moveaxis(np.einsum("nohw,tnchw->toc", gout, samp), 0, 2).reshape(wd.shape)
    # gradient reaching each sampled value
    s = np.einsum("nohw,toc->tnchw", gout, wt)
    # transpose-scatter s through the bilinear weights into grad_x, resolved
    # in one deterministic bincount
    base = ((np.arange(n)[:, None, None, None] * c
             + np.arange(c)[None, :, None, None]) * (h * w))  # (N, C, 1, 1)
    idx_chunks, val_chunks = [], []
    for (a, b), (flat, valid) in flats.items():
        wgt = (wi0 if a == 0 else wi1) * (wj0 if b == 0 else wj1)
        contrib = s * wgt
        contrib *= valid[:, :, None]
        idx_chunks.append(np.broadcast_to(base[None] + flat[:, :, None],
                                          contrib.shape).ravel())
        val_chunks.append(contrib.ravel())
    grad_x = np.bincount(np.concatenate(idx_chunks),
                         weights=np.concatenate(val_chunks),
                         minlength=n * c * h * w).reshape(xd.shape).astype(xd.dtype)
    # piecewise derivative of max(0, 1-|p - v|): zero at |.| >= 1, +1 for
    # grid points at or above p (ties included), -1 below
    frac_i, frac_j = wi1, wj1  # fractional parts
    gi0 = np.where(frac_i > 0, -1.0, 1.0).astype(xd.dtype)
    gi1 = np.where(frac_i > 0, 1.0, 0.0).astype(xd.dtype)
    gj0 = np.where(frac_j > 0, -1.0, 1.0).astype(xd.dtype)
    gj1 = np.where(frac_j > 0, 1.0, 0.0).astype(xd.dtype)
    dsamp_dpi = (gi0 * (vals[(0, 0)] * wj0 + vals[(0, 1)] * wj1)
                 + gi1 * (vals[(1, 0)] * wj0 + vals[(1, 1)] * wj1))
    dsamp_dpj = (gj0 * (vals[(0, 0)] * wi0 + vals[(1, 0)] * wi1)
                 + gj1 * (vals[(0, 1)] * wi0 + vals[(1, 1)] * wi1))
    gpi = (s * dsamp_dpi).sum(axis=2)  # (T, N, H, W)
    gpj = (s * dsamp_dpj).sum(axis=2)
    grad_off = np.empty_like(offd)
    grad_off[:, 0::2] = np.moveaxis(gpi, 0, 1)
    grad_off[:, 1::2] = np.moveaxis(gpj, 0, 1)
    # coordinate depends on the rate through the tap displacement
    grad_eta = np.stack([np.einsum("tnhw,t->nhw", gpi, pn[:, 0]),
                         np.einsum("tnhw,t->nhw", gpj, pn[:, 1])], axis=1)
    grad_dil = _dil_chain_sign * grad_eta.astype(dild.dtype) * _sigmoid(dild)
    return grad_x, grad_w, grad_off, grad_dil


def sdc_forward(x: Tensor, p: SdcParams) -> Tensor:
    """Apply the scale-deformable convolution; output is (N, Co, H, W) with
    the input's spatial extents (stride 1, implicit zero padding)."""
    _check_instance(x.data, p)
    xd, wd, offd, dild = x.data, p.weight.data, p.offsets.data, p.dil_raw.data
    out = _forward_arrays(xd, wd, offd, dild)

    def bw(g):
        return _backward_arrays(xd, wd, offd, dild, g)

    return record("sdc", out, [x, p.weight, p.offsets, p.dil_raw], bw)


def sdc_backward(x: Tensor, p: SdcParams, grad_out: np.ndarray):
    """Analytic gradients (grad_x, grad_w, grad_offsets, grad_dil_raw) for a
    given output gradient; the same kernel the tape uses."""
    _check_instance(x.data, p)
    gout = np.asarray(grad_out, dtype=x.data.dtype)
    if gout.shape[0] != x.data.shape[0] or gout.shape[2:] != x.data.shape[2:]:
        raise ShapeError(f"grad_out shape {gout.shape} does not match instance")
    return _backward_arrays(x.data, p.weight.data, p.offsets.data, p.dil_raw.data, gout)


def sdc_oracle(x: Tensor, p: SdcParams) -> Tensor:
    """Direct nested-loop evaluation over every input position, for small
    instances only; the ground truth for the vectorised forward."""
    _check_instance(x.data, p)
    xd, wd, offd, dild = x.data, p.weight.data, p.offsets.data, p.dil_raw.data
    n, c, h, w = xd.shape
    co, _, k, _ = wd.shape
    eta = np.logaddexp(0, dild.astype(np.float64))
    out = np.zeros((n, co, h, w), dtype=np.float64)
    grid = tap_grid(k)
    for b in range(n):
        for o in range(co):
            for y in range(h):
                for xx in range(w):
                    acc = 0.0
                    for t, (pni, pnj) in enumerate(grid):
                        pi = y + eta[b, 0, y, xx] * pni + offd[b, 2 * t, y, xx]
                        pj = xx + eta[b, 1, y, xx] * pnj + offd[b, 2 * t + 1, y, xx]
                        for ch in range(c):
                            sample = 0.0
                            for u in range(h):
                                for v in range(w):
                                    sample += (xd[b, ch, u, v]
                                               * max(0.0, 1.0 - abs(pi - u))
                                               * max(0.0, 1.0 - abs(pj - v)))
                            acc_w = wd[o, ch, t // k, t % k]
                            acc += acc_w * sample
                    out[b, o, y, xx] = acc
    return Tensor._wrap(out.astype(xd.dtype))


# ------------------------------------------------------------------
# parameter prediction branches


@dataclass
class SdcPredictor:
    """1x1 convolution branches that emit offsets and raw dilation rates
    from the layer input."""

    off_w: Tensor
    off_b: Tensor
    dil_w: Tensor
    dil_b: Tensor


def init_predictor(c_in: int, k: int) -> SdcPredictor:
    """Branches that start the layer as a standard convolution: zero offsets
    and dilation rates of exactly 1 (bias at softplus's preimage of 1)."""
    n_off = 2 * k * k
    dt = default_dtype()
    off_w = Tensor(np.zeros((n_off, c_in, 1, 1), dtype=dt), requires_grad=True)
    off_b = Tensor(np.zeros(n_off, dtype=dt), requires_grad=True)
    dil_w = Tensor(np.zeros((2, c_in, 1, 1), dtype=dt), requires_grad=True)
    dil_b = Tensor(np.full(2, softplus_inverse(1.0), dtype=dt), requires_grad=True)
    return SdcPredictor(off_w, off_b, dil_w, dil_b)


def predict_params(features: Tensor, weight: Tensor, head: SdcPredictor) -> SdcParams:
    """Run the offset and dilation branches on the layer input."""
    offsets = conv2d(features, head.off_w, head.off_b)
    dil_raw = conv2d(features, head.dil_w, head.dil_b)
    return SdcParams(weight=weight, offsets=offsets, dil_raw=dil_raw)


def sdc_layer(x: Tensor, weight: Tensor, head: SdcPredictor) -> Tensor:
    """Predict per-pixel parameters from x, then apply the operator."""
    return sdc_forward(x, predict_params(x, weight, head))
