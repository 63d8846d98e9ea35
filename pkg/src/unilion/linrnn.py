"""Data-dependent linear recurrences applied per voxel group.

Two operators share the group plumbing:

* a gated selective scan ``h_t = g_t * h_{t-1} + (1 - g_t) * u_t`` with an
  output gate, evaluated either step by step or chunk-wise through the
  associative composition of per-step affine maps;
* a WKV recurrence with per-channel decay and first-token bonus, evaluated in
  max-shifted log space.

All arrays are ``(..., T, C)``; leading axes index independent sequences.
A boolean ``mask`` of shape ``(..., T)`` marks real slots; masked slots pass
the state through unchanged and emit zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .partition import GroupLayout
from .voxel import SparseFeatureSet

WKV_EPS = 1e-8


class MacCounter:
    """Running count of multiply-adds issued by the scans."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> int:
        n, self.count = self.count, 0
        return n


MACS = MacCounter()


# ------------------------------------------------------------ affine scans


def _scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h = np.empty_like(b)
    if b.shape[-2] == 0:
        return h
    # step-major views so each step touches one contiguous slab
    at, bt, ht = np.moveaxis(a, -2, 0), np.moveaxis(b, -2, 0), np.moveaxis(h, -2, 0)
    ht[0] = bt[0]
    for t in range(1, len(bt)):
        np.multiply(at[t], ht[t - 1], out=ht[t])
        ht[t] += bt[t]
    return h


def _scan_chunked(a: np.ndarray, b: np.ndarray, chunk: int) -> np.ndarray:
    T = b.shape[-2]
    if T == 0:
        return np.empty_like(b)
    chunk = min(chunk, T)
    n_chunks = -(-T // chunk)
    pad = n_chunks * chunk - T
    if pad:
        lead = b.shape[:-2]
        a = np.concatenate([a, np.ones(lead + (pad, a.shape[-1]), a.dtype)], axis=-2)
        b = np.concatenate([b, np.zeros(lead + (pad, b.shape[-1]), b.dtype)], axis=-2)
    shape = b.shape[:-2] + (n_chunks, chunk, b.shape[-1])
    a, b = a.reshape(shape), b.reshape(shape)

    # within each chunk, prefix-compose (A, B) o (a, b) = (A a, a B + b)
    A = np.cumprod(a, axis=-2)
    B = _scan_sequential(a, b)

    # carry the state across chunk ends, then apply it to every row at once
    carry = np.zeros(shape[:-2] + shape[-1:], dtype=b.dtype)
    A_end, B_end = A[..., -1, :], B[..., -1, :]
    for c in range(1, n_chunks):
        np.multiply(A_end[..., c - 1, :], carry[..., c - 1, :], out=carry[..., c, :])
        carry[..., c, :] += B_end[..., c - 1, :]
    out = A * carry[..., None, :]
    out += B
    out = out.reshape(shape[:-3] + (n_chunks * chunk, shape[-1]))
    return out[..., :T, :] if pad else out


def scan_affine(a: np.ndarray, b: np.ndarray, chunk: int | None = None,
                reverse: bool = False) -> np.ndarray:
    """Solve ``h_t = a_t * h_{t-1} + b_t`` with ``h_0 = 0`` along axis -2."""
    a = np.broadcast_to(a, b.shape)
    if reverse:
        a, b = a[..., ::-1, :], b[..., ::-1, :]
    if chunk is None:
        h = _scan_sequential(a, b)
    else:
        if chunk < 1:
            raise ValueError("chunk must be >= 1")
        h = _scan_chunked(np.ascontiguousarray(a), np.ascontiguousarray(b), int(chunk))
    return np.ascontiguousarray(h[..., ::-1, :]) if reverse else h


def scan_macs(T: int, C: int, chunk: int | None, lead: int = 1) -> int:
    """Multiply-adds :func:`scan_affine` spends on ``lead`` sequences."""
    if chunk is None or T == 0:
        return lead * T * C
    chunk = min(chunk, T)
    padded = -(-T // chunk) * chunk
    return lead * 3 * padded * C


def _shift_later(x: np.ndarray) -> np.ndarray:
    """``y_t = x_{t-1}`` with zero at t = 0."""
    y = np.zeros_like(x)
    y[..., 1:, :] = x[..., :-1, :]
    return y


def _shift_earlier(x: np.ndarray) -> np.ndarray:
    """``y_t = x_{t+1}`` with zero at the last step."""
    y = np.zeros_like(x)
    y[..., :-1, :] = x[..., 1:, :]
    return y


def linear_scan(a, b, chunk: int | None = None):
    """Differentiable ``h_t = a_t * h_{t-1} + b_t`` (``a`` and ``b`` same shape)."""
    va, vb = ad.value(a), ad.value(b)
    if va.shape != vb.shape:
        raise ValueError(f"linear_scan: a {va.shape} and b {vb.shape} differ")
    h = scan_affine(va, vb, chunk)
    MACS.add(scan_macs(vb.shape[-2], vb.shape[-1], chunk, int(np.prod(vb.shape[:-2]))))

    def bwd(g):
        gh = scan_affine(_shift_earlier(va), g, chunk, reverse=True)
        return gh * _shift_later(h), gh

    return ad.record("linear_scan", h, (a, b), bwd)


# ------------------------------------------------------------- parameters


def _init(rng, shape, scale, dtype):
    return (rng.standard_normal(shape) * scale).astype(dtype)


@dataclass
class SelectiveScanParams:
    Wg: Any
    bg: Any
    Wu: Any
    bu: Any
    Wo: Any
    bo: Any

    @property
    def channels(self) -> int:
        return ad.value(self.Wg).shape[0]

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, scale: float | None = None,
               dtype=np.float64) -> "SelectiveScanParams":
        s = 1.0 / np.sqrt(channels) if scale is None else scale
        C = channels
        return cls(_init(rng, (C, C), s, dtype), _init(rng, (C,), s, dtype),
                   _init(rng, (C, C), s, dtype), _init(rng, (C,), s, dtype),
                   _init(rng, (C, C), s, dtype), _init(rng, (C,), s, dtype))

    @classmethod
    def zeros(cls, channels: int, dtype=np.float64) -> "SelectiveScanParams":
        z2, z1 = np.zeros((channels, channels), dtype), np.zeros(channels, dtype)
        return cls(z2, z1, z2.copy(), z1.copy(), z2.copy(), z1.copy())

    def scan(self, x, mask=None, chunk: int | None = None):
        if chunk is None:
            return selective_scan_seq(x, self, mask)
        return selective_scan_chunked(x, self, mask, chunk)


@dataclass
class WKVScanParams:
    Wr: Any
    Wk: Any
    Wv: Any
    w: Any
    u: Any

    def __post_init__(self):
        w = ad.value(self.w)
        if not isinstance(self.w, ad.Tensor) and np.any(w < 0):
            raise ValueError("WKV decay w must be non-negative")

    @property
    def channels(self) -> int:
        return ad.value(self.Wr).shape[0]

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, scale: float | None = None,
               dtype=np.float64) -> "WKVScanParams":
        s = 1.0 / np.sqrt(channels) if scale is None else scale
        C = channels
        return cls(_init(rng, (C, C), s, dtype), _init(rng, (C, C), s, dtype),
                   _init(rng, (C, C), s, dtype),
                   rng.uniform(0.05, 1.0, C).astype(dtype),
                   _init(rng, (C,), 0.5, dtype))

    @classmethod
    def zeros(cls, channels: int, dtype=np.float64) -> "WKVScanParams":
        z2, z1 = np.zeros((channels, channels), dtype), np.zeros(channels, dtype)
        return cls(z2, z2.copy(), z2.copy(), z1, z1.copy())

    def scan(self, x, mask=None, chunk: int | None = None):
        return wkv_scan(x, self, mask)


ScanParams = SelectiveScanParams | WKVScanParams


def _prepare(x, channels: int, mask) -> np.ndarray:
    vx = ad.value(x)
    if vx.ndim < 2 or vx.shape[-1] != channels:
        raise ValueError(f"expected (..., T, {channels}) input, got {vx.shape}")
    if mask is None:
        return np.ones(vx.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != vx.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match input {vx.shape[:-1]}")
    return mask


# --------------------------------------------------------- selective scan


def _selective(x, p: SelectiveScanParams, mask, chunk):
    mask = _prepare(x, p.channels, mask)
    m = mask[..., None]
    gate = ad.sigmoid(ad.affine(x, p.Wg, p.bg))
    update = ad.affine(x, p.Wu, p.bu)
    a = ad.where(m, gate, 1.0)
    b = ad.where(m, (1.0 - gate) * update, 0.0)
    h = linear_scan(a, b, chunk)
    y = h * ad.silu(ad.affine(x, p.Wo, p.bo))
    vx = ad.value(x)
    n_rows = int(np.prod(vx.shape[:-1]))
    MACS.add(3 * n_rows * p.channels * p.channels + 2 * n_rows * p.channels)
    return ad.where(m, y, 0.0)


def selective_scan_seq(x, p: SelectiveScanParams, mask=None):
    """Reference step-by-step selective scan."""
    return _selective(x, p, mask, None)


def selective_scan_chunked(x, p: SelectiveScanParams, mask=None, chunk: int = 64):
    """Selective scan through chunk-local prefix composition plus a carry pass."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    return _selective(x, p, mask, chunk)


# -------------------------------------------------------------------- WKV


def _wkv_forward(k, v, w, u, mask, eps):
    # Running-max form: the true state is (aa, bb) * exp(pp).
    lead, C = k.shape[:-2], k.shape[-1]
    aa = np.zeros(lead + (C,), dtype=v.dtype)
    bb = np.zeros_like(aa)
    pp = np.full_like(aa, -np.inf)
    out = np.zeros_like(v)
    with np.errstate(over="ignore"):
        for t in range(k.shape[-2]):
            kt, vt, mt = k[..., t, :], v[..., t, :], mask[..., t, None]
            bonus = u + kt
            decayed = pp - w
            p = np.maximum(decayed, bonus)
            e1, e2 = np.exp(decayed - p), np.exp(bonus - p)
            num = e1 * aa + e2 * vt
            den = e1 * bb + e2 + eps * np.exp(-p)
            out[..., t, :] = np.where(mt, num / den, 0.0)
            q = np.maximum(decayed, kt)
            e1, e2 = np.exp(decayed - q), np.exp(kt - q)
            aa = np.where(mt, e1 * aa + e2 * vt, aa)
            bb = np.where(mt, e1 * bb + e2, bb)
            pp = np.where(mt, q, pp)
    return out


def _wkv_backward(k, v, w, u, mask, eps, gz):
    # Shift every channel by its largest unmasked key.  The output is exactly
    # invariant to that shift (eps is rescaled with it), so treating the shift
    # as a constant gives the true gradient.
    m = mask[..., None]
    shift = np.where(m, k, -np.inf).max(axis=-2, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    alpha = np.exp(-w)
    with np.errstate(over="ignore", under="ignore"):
        E = np.where(m, np.exp(np.where(m, k - shift, 0.0)), 0.0)
        F = np.where(m, np.exp(np.where(m, u + k - shift, 0.0)), 0.0)
        eps_s = eps * np.exp(-shift)
    step = np.where(m, alpha, 1.0)
    a = scan_affine(step, E * v)
    b = scan_affine(step, E)
    a_prev, b_prev = _shift_later(a), _shift_later(b)
    N = alpha * a_prev + F * v
    D = np.where(m, alpha * b_prev + F + eps_s, 1.0)
    z = N / D
    gz = np.where(m, gz, 0.0)
    gN = gz / D
    gD = -gz * z / D
    coef = _shift_earlier(step)
    ga = scan_affine(coef, alpha * _shift_earlier(gN), reverse=True)
    gb = scan_affine(coef, alpha * _shift_earlier(gD), reverse=True)
    gv = ga * E + gN * F
    gk = ga * E * v + gb * E + gN * F * v + gD * F
    red = tuple(range(k.ndim - 1))
    gu = (gN * F * v + gD * F).sum(axis=red)
    galpha = (np.where(m, ga * a_prev + gb * b_prev, 0.0) + gN * a_prev + gD * b_prev).sum(axis=red)
    return gk, gv, -alpha * galpha, gu


def wkv_core(k, v, w, u, mask, eps: float = WKV_EPS):
    """Differentiable normalized WKV mix (before the receptance gate)."""
    vk, vv, vw, vu = (ad.value(t) for t in (k, v, w, u))
    mask = np.asarray(mask, dtype=bool)
    out = _wkv_forward(vk, vv, vw, vu, mask, eps)
    n_rows = int(np.prod(vk.shape[:-1]))
    MACS.add(6 * n_rows * vk.shape[-1])

    def bwd(g):
        return _wkv_backward(vk, vv, vw, vu, mask, eps, g)

    return ad.record("wkv", out, (k, v, w, u), bwd)


def wkv_scan(x, p: WKVScanParams, mask=None):
    """WKV operator: receptance-gated, decay-weighted running average of values."""
    mask = _prepare(x, p.channels, mask)
    r = ad.affine(x, p.Wr)
    k = ad.affine(x, p.Wk)
    v = ad.affine(x, p.Wv)
    z = wkv_core(k, v, p.w, p.u, mask)
    n_rows = int(np.prod(mask.shape))
    MACS.add(3 * n_rows * p.channels * p.channels + n_rows * p.channels)
    return ad.where(mask[..., None], ad.sigmoid(r) * z, 0.0)


# ------------------------------------------------------------ group scans


def group_scan(fs: SparseFeatureSet, layout: GroupLayout, op: ScanParams,
               chunk: int | None = None) -> SparseFeatureSet:
    """Run ``op`` forward over every group of ``layout`` and scatter back.

    Groups are stacked along a leading axis and scanned independently; the
    padded tail of the last group is masked out.
    """
    if layout.length != len(fs):
        raise ValueError(f"layout covers {layout.length} rows but the set has {len(fs)}")
    C = fs.channels
    if len(fs) == 0:
        return fs
    index = layout.padded_index()
    grouped = ad.gather_rows(fs.features, index)
    out = op.scan(grouped, index >= 0, chunk)
    flat = ad.reshape(out, (index.size, C))
    return fs.with_features(ad.gather_rows(flat, layout.slot_of_row()))
