"""Per-slice intensity transforms: normalisation, resizing, CLAHE and
multimodal channel compositing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ..autograd.ops import interp_matrix, nearest_index
from ..errors import ConfigurationError, ContractError

MODALITY_CHANNELS = {"dwi": 1, "dwi_adc": 2, "dwi_adc_edwi": 3}
CHANNEL_LAYOUT = {
    "dwi": ("DWI",),
    "dwi_adc": ("DWI", "ADC"),
    "dwi_adc_edwi": ("DWI", "ADC", "eDWI"),
}


def normalize_minmax(image: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant image maps to all zeros."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def resize(image: np.ndarray, size: Tuple[int, int] = (256, 256), mode: str = "bilinear") -> np.ndarray:
    """Resample a 2-D image with the same half-pixel convention as
    ``ops.upsample2x``; ``nearest`` keeps the value set (use it for masks)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    oh, ow = size
    if (h, w) == (oh, ow):
        return img.copy()
    if mode == "bilinear":
        return interp_matrix(h, oh) @ img @ interp_matrix(w, ow).T
    if mode == "nearest":
        return img[np.ix_(nearest_index(h, oh), nearest_index(w, ow))]
    raise ContractError(f"unknown resize mode {mode!r}")


@dataclass(frozen=True)
class ClaheParams:
    clip_limit: float = 2.0
    tiles: Tuple[int, int] = (8, 8)  # (tiles along x, tiles along y)
    bins: int = 256


def _tile_edges(n: int, k: int) -> np.ndarray:
    return np.array([(i * n) // k for i in range(k + 1)])


def clahe(image: np.ndarray, clip_limit: float = 2.0, tiles: Tuple[int, int] = (8, 8),
          bins: int = 256) -> np.ndarray:
    """Contrast limited adaptive histogram equalisation on a [0, 1] image.

    Each tile's histogram over ``bins`` levels is clipped at
    ``clip_limit * tile_pixels / bins``, the clipped mass is spread evenly over
    all bins, and the normalised CDF becomes that tile's intensity map. A
    pixel's output interpolates bilinearly between the maps of the four
    nearest tile centres (nearest tile only along the border).
    """
    img = np.asarray(image, dtype=np.float64)
    tx, ty = tiles
    if tx < 1 or ty < 1 or not clip_limit > 0 or bins < 2:
        raise ConfigurationError(
            f"invalid CLAHE parameters clip_limit={clip_limit} tiles={tiles} bins={bins}")
    h, w = img.shape
    if h < ty or w < tx:
        raise ConfigurationError(f"image of shape {img.shape} smaller than tile grid {tiles}")

    levels = np.clip(np.floor(img * bins).astype(np.int64), 0, bins - 1)
    ye, xe = _tile_edges(h, ty), _tile_edges(w, tx)
    luts = np.empty((ty, tx, bins))
    for i in range(ty):
        for j in range(tx):
            tile = levels[ye[i]:ye[i + 1], xe[j]:xe[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=bins).astype(np.float64)
            limit = clip_limit * tile.size / bins
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / bins
            luts[i, j] = np.cumsum(hist) / tile.size

    def axis_weights(n, edges, k):
        centres = (edges[:-1] + edges[1:] - 1) / 2.0
        pos = np.arange(n, dtype=np.float64)
        f = np.interp(pos, centres, np.arange(k, dtype=np.float64))
        lo = np.floor(f).astype(np.int64)
        hi = np.minimum(lo + 1, k - 1)
        return lo, hi, f - lo

    y0, y1, wy = axis_weights(h, ye, ty)
    x0, x1, wx = axis_weights(w, xe, tx)
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    WY, WX = wy[:, None], wx[None, :]
    out = ((1 - WY) * ((1 - WX) * luts[Y0, X0, levels] + WX * luts[Y0, X1, levels])
           + WY * ((1 - WX) * luts[Y1, X0, levels] + WX * luts[Y1, X1, levels]))
    return np.clip(out, 0.0, 1.0)


def rms_contrast(image: np.ndarray) -> float:
    return float(np.asarray(image, dtype=np.float64).std())


def compose_channels(dwi: np.ndarray, adc: np.ndarray, mode: str,
                     clahe_params: ClaheParams = ClaheParams()) -> np.ndarray:
    """Stack modalities into a (1, C, H, W) array.

    Channel order is DWI, ADC, eDWI where eDWI is ``clahe(DWI)``.
    """
    if mode not in MODALITY_CHANNELS:
        raise ContractError(f"unknown modality mode {mode!r}")
    dwi = np.asarray(dwi, dtype=np.float64)
    chans = [dwi]
    if mode != "dwi":
        if adc is None:
            raise ContractError(f"modality mode {mode!r} needs an ADC image")
        adc = np.asarray(adc, dtype=np.float64)
        if adc.shape != dwi.shape:
            raise ContractError(f"DWI shape {dwi.shape} != ADC shape {adc.shape}")
        chans.append(adc)
    for c in chans:
        if c.min() < 0.0 or c.max() > 1.0:
            raise ContractError("compose_channels expects inputs normalised to [0, 1]")
    if mode == "dwi_adc_edwi":
        chans.append(clahe(dwi, clahe_params.clip_limit, clahe_params.tiles, clahe_params.bins))
    return np.stack(chans)[None]
