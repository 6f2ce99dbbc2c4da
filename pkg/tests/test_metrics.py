import numpy as np
import pytest
import torch

from morphoflow.metrics import psnr, ssim3d, dice, PSNR_CAP
from morphoflow.volume import ScalarVolume, InvalidInputError


@pytest.fixture
def volume():
    rng = np.random.default_rng(0)
    return rng.uniform(0, 1, (12, 12, 12))


def test_psnr_definitional_values(volume):
    assert psnr(volume, volume) == PSNR_CAP
    zeros = np.zeros((4, 4, 4))
    assert psnr(zeros, zeros + 1.0, data_range=1.0) == pytest.approx(0.0, abs=1e-12)
    assert psnr(zeros, zeros + 0.1, data_range=1.0) == pytest.approx(20.0, abs=1e-9)


def test_psnr_accepts_volumes_and_tensors(volume):
    t = torch.from_numpy(volume)
    assert psnr(ScalarVolume(t), t + 0.1, data_range=1.0) == pytest.approx(20.0, abs=1e-9)


def test_psnr_errors(volume):
    with pytest.raises(InvalidInputError):
        psnr(volume, volume[:-1])
    with pytest.raises(InvalidInputError):
        psnr(volume, volume + 0.1, data_range=0.0)


def test_psnr_falls_with_noise(volume):
    rng = np.random.default_rng(1)
    noise = rng.standard_normal(volume.shape)
    values = [psnr(volume, volume + s * noise, data_range=1.0) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_ssim_identity_and_symmetry(volume):
    assert ssim3d(volume, volume) == pytest.approx(1.0, abs=1e-12)
    other = volume + np.random.default_rng(2).normal(0, 0.1, volume.shape)
    assert ssim3d(volume, other, data_range=1.0) == pytest.approx(ssim3d(other, volume, data_range=1.0), abs=1e-12)


def test_ssim_of_noise_on_a_constant_is_low():
    a = np.full((16, 16, 16), 0.5)
    b = a + np.random.default_rng(3).uniform(-0.866, 0.866, a.shape)
    assert ssim3d(a, b, data_range=1.0) < 0.3


def test_ssim_penalizes_contrast_and_brightness(volume):
    assert ssim3d(volume, 0.5 * volume + 0.2) < ssim3d(volume, volume)


def test_ssim_window_checks(volume):
    with pytest.raises(InvalidInputError):
        ssim3d(volume, volume, window=13)
    with pytest.raises(InvalidInputError):
        ssim3d(volume, volume, window=4)


def test_dice_cases():
    a = np.zeros((4, 4, 4))
    a[:2] = 1
    assert dice(a, a, 1) == 1.0
    b = np.zeros((4, 4, 4))
    b[2:] = 1
    assert dice(a, b, 1) == 0.0
    c = np.zeros((4, 4, 4))
    c[1:3] = 1
    assert dice(a, c, 1) == pytest.approx(0.5)
    assert dice(a, b, 7) == 1.0
    with pytest.raises(InvalidInputError):
        dice(a, a[:3], 1)
