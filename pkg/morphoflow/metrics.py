"""
Image and label agreement metrics: PSNR, 3D SSIM and Dice
"""
from typing import Optional, Union

import numpy as np
import torch
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from morphoflow.volume import ScalarVolume, InvalidInputError

PSNR_CAP = 99.0
"""Reported for (numerically) identical volumes"""

VolumeLike = Union[ScalarVolume, torch.Tensor, np.ndarray]


def _array(vol: VolumeLike) -> np.ndarray:
    if isinstance(vol, ScalarVolume):
        vol = vol.data
    if isinstance(vol, torch.Tensor):
        vol = vol.detach().cpu().numpy()
    return np.asarray(vol, dtype=np.float64)


def _pair(a: VolumeLike, b: VolumeLike):
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise InvalidInputError(f'Volumes differ in shape: {a.shape} vs {b.shape}')
    return a, b


def default_range(reference: np.ndarray) -> float:
    """max - min of the reference, or 1.0 when the reference is constant"""
    span = float(reference.max() - reference.min())
    return span if span > 0 else 1.0


def psnr(a: VolumeLike, b: VolumeLike, data_range: Optional[float] = None) -> float:
    """PSNR in dB of ``b`` against the reference ``a``"""
    a, b = _pair(a, b)
    data_range = default_range(a) if data_range is None else float(data_range)
    if not data_range > 0:
        raise InvalidInputError(f'data_range must be > 0, got {data_range}')
    if float(np.mean((a - b) ** 2)) < 1e-12:
        return PSNR_CAP
    return float(peak_signal_noise_ratio(a, b, data_range=data_range))


def ssim3d(a: VolumeLike, b: VolumeLike, window: int = 7, k1: float = 0.01, k2: float = 0.03,
           data_range: Optional[float] = None) -> float:
    """Mean SSIM over all fully contained window^3 neighbourhoods (uniform window)"""
    a, b = _pair(a, b)
    if a.ndim != 3:
        raise InvalidInputError(f'ssim3d needs 3D volumes, got {a.ndim} dimensions')
    if window < 3 or window % 2 == 0 or window > min(a.shape):
        raise InvalidInputError(f'SSIM window must be odd, >= 3 and <= {min(a.shape)}, got {window}')
    data_range = default_range(a) if data_range is None else float(data_range)
    return float(structural_similarity(a, b, win_size=window, K1=k1, K2=k2, data_range=data_range))


def dice(a: VolumeLike, b: VolumeLike, label: int) -> float:
    """2|A n B| / (|A| + |B|) for the voxels carrying ``label``; two empty masks agree perfectly"""
    a, b = _pair(a, b)
    mask_a = np.rint(a) == label
    mask_b = np.rint(b) == label
    total = int(mask_a.sum()) + int(mask_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((mask_a & mask_b).sum()) / total
