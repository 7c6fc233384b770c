"""Dense feature-map kernels.

Maps are ``(C, H, W)`` float32 arrays tagged with their pixel stride.  All
spatial ops use same-padding with a fixed ``pad_before`` convention so that
stride arithmetic stays exact:

* convolution pads ``dilation * ((k - 1) // 2)`` cells before each axis;
* max pooling pads ``(k - 1) // 2`` cells before and produces
  ``ceil(n / stride)`` outputs.

With these conventions a stride-1 pool followed by filters dilated by 2
reproduces, on its even cells, the stride-2 pool followed by the original
filters.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Sequence

import numpy as np

from rpnbf import kernels
from rpnbf.geometry import Box

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray
    stride: float

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"feature map must be (C, H, W), got shape {data.shape}")
        if not self.stride > 0:
            raise ValueError("stride must be positive")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def extent(self) -> tuple[float, float]:
        """Image area covered, as ``(width, height)`` in pixels."""
        return (self.width * self.stride, self.height * self.stride)


@dataclass(frozen=True)
class FilterBank:
    weights: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray  # (out,)
    dilation: int = 1
    relu: bool = False

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        b = np.ascontiguousarray(self.bias, dtype=np.float32).reshape(-1)
        if w.ndim != 4:
            raise ValueError("weights must be (out, in, kh, kw)")
        if b.shape[0] != w.shape[0]:
            raise ValueError("bias length must equal out_channels")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass(frozen=True)
class RoiFeature:
    values: np.ndarray
    layout: list = field(default_factory=list)  # [(name, channels, out, out), ...]


def conv2d(x: FeatureMap, filters: FilterBank) -> FeatureMap:
    """Same-padded, unit-stride 2-D convolution (cross-correlation)."""
    if filters.in_channels != x.channels:
        raise ValueError(f"filter bank expects {filters.in_channels} channels, map has {x.channels}")
    kh, kw = filters.kernel
    d = filters.dilation
    C, H, W = x.data.shape
    pt, pl = d * ((kh - 1) // 2), d * ((kw - 1) // 2)
    pb, pr = d * (kh - 1) - pt, d * (kw - 1) - pl
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr)))
    out = np.zeros((filters.out_channels, H * W), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i * d:i * d + H, j * d:j * d + W].reshape(C, H * W)
            out += filters.weights[:, :, i, j] @ patch
    out += filters.bias[:, None]
    if filters.relu:
        np.maximum(out, 0.0, out=out)
    return FeatureMap(out.reshape(-1, H, W), x.stride)


def max_pool(x: FeatureMap, kernel: int, pool_stride: int) -> FeatureMap:
    if kernel < 1 or pool_stride < 1:
        raise ValueError("kernel and pool_stride must be >= 1")
    C, H, W = x.data.shape
    Ho, Wo = -(-H // pool_stride), -(-W // pool_stride)
    pb = (kernel - 1) // 2
    pad_h = max(0, (Ho - 1) * pool_stride - pb + kernel - H)
    pad_w = max(0, (Wo - 1) * pool_stride - pb + kernel - W)
    xp = np.pad(x.data, ((0, 0), (pb, pad_h), (pb, pad_w)), constant_values=-np.inf)
    out = np.full((C, Ho, Wo), -np.inf, dtype=np.float32)
    span_h = (Ho - 1) * pool_stride + 1
    span_w = (Wo - 1) * pool_stride + 1
    for i in range(kernel):
        for j in range(kernel):
            np.maximum(out, xp[:, i:i + span_h:pool_stride, j:j + span_w:pool_stride], out=out)
    return FeatureMap(out, x.stride * pool_stride)


def dense_stage(x: FeatureMap, pool_kernel: int, filters: Sequence[FilterBank]) -> FeatureMap:
    """Stride-2 pool followed by the filter banks as given."""
    y = max_pool(x, pool_kernel, 2)
    for fb in filters:
        y = conv2d(y, fb)
    return y


def atrous_stage(x: FeatureMap, pool_kernel: int, filters: Sequence[FilterBank]) -> FeatureMap:
    """Stride-1 pool followed by every filter bank with doubled dilation.

    Keeps the input stride where :func:`dense_stage` would double it.
    """
    y = max_pool(x, pool_kernel, 1)
    for fb in filters:
        y = conv2d(y, replace(fb, dilation=2 * fb.dilation))
    return y


def roi_bins(rois: np.ndarray, stride: float, height: int, width: int, out_size: int = 7):
    """Half-open cell ranges of every pooling bin, clamped to the map.

    ``rois`` is an ``(N, 4)`` xywh array in image pixels.  Returns
    ``(r0, r1, c0, c1)``, each ``(N, out_size)`` int64.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    x0 = rois[:, 0] / stride
    y0 = rois[:, 1] / stride
    wc = rois[:, 2] / stride
    hc = rois[:, 3] / stride
    k = np.arange(out_size, dtype=np.float64)
    r0 = np.floor(y0[:, None] + (k * hc[:, None]) / out_size)
    r1 = np.ceil(y0[:, None] + ((k + 1) * hc[:, None]) / out_size)
    c0 = np.floor(x0[:, None] + (k * wc[:, None]) / out_size)
    c1 = np.ceil(x0[:, None] + ((k + 1) * wc[:, None]) / out_size)
    r0 = np.clip(r0, 0, height).astype(np.int64)
    r1 = np.clip(r1, 0, height).astype(np.int64)
    c0 = np.clip(c0, 0, width).astype(np.int64)
    c1 = np.clip(c1, 0, width).astype(np.int64)
    return r0, r1, c0, c1


def _check_rois_inside(rois: np.ndarray, fm: FeatureMap):
    ext_w, ext_h = fm.extent
    x1 = np.maximum(rois[:, 0], 0.0)
    y1 = np.maximum(rois[:, 1], 0.0)
    x2 = np.minimum(rois[:, 0] + rois[:, 2], ext_w)
    y2 = np.minimum(rois[:, 1] + rois[:, 3], ext_h)
    bad = ~((x2 > x1) & (y2 > y1))
    if bad.any():
        i = int(np.argmax(bad))
        raise ValueError(f"RoI {tuple(rois[i])} lies outside the {ext_w}x{ext_h} map extent")


def roi_pool_many(fm: FeatureMap, rois: np.ndarray, out_size: int = 7) -> np.ndarray:
    """Max-pool every RoI into an ``(N, C, out_size, out_size)`` block."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if rois.shape[0] == 0:
        return np.zeros((0, fm.channels, out_size, out_size), dtype=np.float32)
    _check_rois_inside(rois, fm)
    r0, r1, c0, c1 = roi_bins(rois, fm.stride, fm.height, fm.width, out_size)
    return kernels.backend.roi_pool(fm.data, r0, r1, c0, c1)


def roi_pool(fm: FeatureMap, roi: Box, out_size: int = 7) -> np.ndarray:
    return roi_pool_many(fm, np.array([roi.as_tuple()]), out_size)[0]


def concat_roi_features(blocks: Sequence[tuple[str, np.ndarray]]) -> RoiFeature:
    """Flatten and concatenate pooled blocks in the given order, unscaled."""
    if len(blocks) == 0:
        raise ValueError("no feature blocks to concatenate")
    layout = []
    parts = []
    for name, block in blocks:
        block = np.asarray(block, dtype=np.float32)
        if block.ndim != 3 or block.shape[1] != block.shape[2]:
            raise ValueError(f"block {name!r} must be (channels, out, out), got {block.shape}")
        layout.append((name, *block.shape))
        parts.append(block.reshape(-1))
    return RoiFeature(np.concatenate(parts), layout)


def concat_roi_matrix(blocks: Sequence[tuple[str, np.ndarray]]) -> tuple[np.ndarray, list]:
    """Row-wise version of :func:`concat_roi_features` for ``(N, C, k, k)`` blocks."""
    if len(blocks) == 0:
        raise ValueError("no feature blocks to concatenate")
    n = blocks[0][1].shape[0]
    layout = []
    parts = []
    for name, block in blocks:
        if block.shape[0] != n:
            raise ValueError("blocks disagree on the number of RoIs")
        layout.append((name, *block.shape[1:]))
        parts.append(np.asarray(block, dtype=np.float32).reshape(n, -1))
    return np.concatenate(parts, axis=1), layout


def write_fmap(fm: FeatureMap, fh: BinaryIO) -> None:
    fh.write(FMAP_MAGIC)
    fh.write(struct.pack("<IIIIf", FMAP_VERSION, fm.channels, fm.height, fm.width, fm.stride))
    fh.write(fm.data.astype("<f4").tobytes())


def read_fmap(fh: BinaryIO) -> FeatureMap:
    magic = fh.read(4)
    if magic != FMAP_MAGIC:
        raise ValueError(f"bad feature-map magic {magic!r}")
    header = fh.read(20)
    if len(header) != 20:
        raise ValueError("truncated feature-map header")
    version, c, h, w, stride = struct.unpack("<IIIIf", header)
    if version != FMAP_VERSION:
        raise ValueError(f"unsupported feature-map version {version}")
    n = c * h * w
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise ValueError("truncated feature-map payload")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(c, h, w)
    return FeatureMap(data, float(stride))


def fmap_to_bytes(fm: FeatureMap) -> bytes:
    buf = io.BytesIO()
    write_fmap(fm, buf)
    return buf.getvalue()


def fmap_from_bytes(raw: bytes) -> FeatureMap:
    return read_fmap(io.BytesIO(raw))


def save_fmap(fm: FeatureMap, path) -> None:
    with open(path, "wb") as fh:
        write_fmap(fm, fh)


def load_fmap(path) -> FeatureMap:
    with open(path, "rb") as fh:
        return read_fmap(fh)


def dilate_kernel(weights: np.ndarray, dilation: int) -> np.ndarray:
    """Insert ``dilation - 1`` zero rows/columns between kernel taps."""
    o, i, kh, kw = weights.shape
    out = np.zeros((o, i, (kh - 1) * dilation + 1, (kw - 1) * dilation + 1), dtype=weights.dtype)
    out[:, :, ::dilation, ::dilation] = weights
    return out


__all__ = [
    "FeatureMap", "FilterBank", "RoiFeature", "conv2d", "max_pool", "dense_stage", "atrous_stage",
    "roi_bins", "roi_pool", "roi_pool_many", "concat_roi_features", "concat_roi_matrix",
    "write_fmap", "read_fmap", "save_fmap", "load_fmap", "fmap_to_bytes", "fmap_from_bytes",
    "dilate_kernel",
]
