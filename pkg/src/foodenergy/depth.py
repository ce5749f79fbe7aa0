"""Overhead depth maps: 16-bit decoding, hole repair and normalization."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

METERS_PER_UNIT = 1e-4
U16_MAX = 65535


class DepthFormatError(ValueError):
    pass


class DepthRepresentation(str, enum.Enum):
    RAW_U16 = "raw_u16"
    METERS = "meters"
    SIGNED_UNIT = "signed"


@dataclass
class DepthMap:
    values: np.ndarray
    representation: DepthRepresentation = DepthRepresentation.RAW_U16
    missing: np.ndarray | None = None

    def __post_init__(self):
        if self.missing is None:
            self.missing = np.zeros(self.values.shape, dtype=bool)


def encode_depth(values, path) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise DepthFormatError("depth grid must be 2-D")
    if values.min(initial=0) < 0 or values.max(initial=0) > U16_MAX:
        raise DepthFormatError("depth values outside [0, 65535]")
    if not cv2.imwrite(str(path), values.astype(np.uint16)):
        raise OSError(f"could not write {path}")


def decode_depth(path) -> DepthMap:
    """Read a 16-bit single-channel image; zero readings are flagged missing."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DepthFormatError(f"could not read depth image {path}")
    if img.ndim != 2 or img.dtype != np.uint16:
        raise DepthFormatError(f"{path}: expected 16-bit single-channel depth, "
                               f"got {img.dtype} with shape {img.shape}")
    return DepthMap(img, DepthRepresentation.RAW_U16, img == 0)


def depth_to_meters(depth: DepthMap) -> DepthMap:
    if depth.representation is not DepthRepresentation.RAW_U16:
        raise ValueError("depth_to_meters expects RAW_U16 input")
    return DepthMap(depth.values.astype(np.float64) * METERS_PER_UNIT,
                    DepthRepresentation.METERS, depth.missing.copy())


def _check_kernel(k, name):
    if int(k) != k or k < 1 or k % 2 == 0:
        raise ValueError(f"{name} must be an odd integer >= 1, got {k}")


def postprocess_depth(depth: DepthMap, dilation_kernel: int = 5,
                      closing_kernel: int = 5) -> DepthMap:
    """Grayscale dilation then grayscale closing with square elements.

    Windows are clipped at the image border.  Missing pixels whose repaired
    value is nonzero are no longer flagged.
    """
    _check_kernel(dilation_kernel, "dilation_kernel")
    _check_kernel(closing_kernel, "closing_kernel")
    v = np.asarray(depth.values)
    # 'nearest' padding only repeats in-window values, so max/min equal the clipped-window result
    out = ndimage.grey_dilation(v, size=(dilation_kernel, dilation_kernel), mode="nearest")
    out = ndimage.grey_dilation(out, size=(closing_kernel, closing_kernel), mode="nearest")
    out = ndimage.grey_erosion(out, size=(closing_kernel, closing_kernel), mode="nearest")
    missing = depth.missing & (out == 0)
    return DepthMap(out.astype(v.dtype, copy=False), depth.representation, missing)


def normalize_depth(depth: DepthMap) -> DepthMap:
    """Map the fixed sensor range [0, 65535] linearly onto [-1, 1]."""
    if depth.representation is not DepthRepresentation.RAW_U16:
        raise ValueError("normalize_depth expects RAW_U16 input")
    v = depth.values.astype(np.float64) / (U16_MAX / 2.0) - 1.0
    return DepthMap(v, DepthRepresentation.SIGNED_UNIT, depth.missing.copy())


class DepthPreprocessor(TransformerMixin, BaseEstimator):
    """Repair and normalize a stack of raw 16-bit depth maps.

    ``transform`` takes an ``(n, H, W)`` array of raw sensor values and returns
    float32 values in [-1, 1].  Stateless; ``fit`` only validates.
    """

    def __init__(self, dilation_kernel=5, closing_kernel=5):
        self.dilation_kernel = dilation_kernel
        self.closing_kernel = closing_kernel

    def fit(self, X, y=None):
        _check_kernel(self.dilation_kernel, "dilation_kernel")
        _check_kernel(self.closing_kernel, "closing_kernel")
        return self

    def transform(self, X):
        X = np.asarray(X)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3:
            raise ValueError("expected an (n, H, W) stack of depth maps")
        out = np.empty(X.shape, dtype=np.float32)
        for i, grid in enumerate(X):
            d = DepthMap(grid.astype(np.uint16), DepthRepresentation.RAW_U16, grid == 0)
            d = postprocess_depth(d, self.dilation_kernel, self.closing_kernel)
            out[i] = normalize_depth(d).values
        return out
