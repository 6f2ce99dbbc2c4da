import pytest
import torch

import morphoflow.registration as registration
from conftest import sinusoid_image
from morphoflow.diffeo import integrate_svf, warp
from morphoflow.metrics import psnr
from morphoflow.registration import RegistrationConfig, RegistrationFailed, ssd, smoothness, energy, \
    energy_and_gradient, register_pair, register_frames, register_sequence
from morphoflow.subject import SubjectRecord, DiseaseLabel
from morphoflow.synthdata import random_velocity
from morphoflow.volume import ScalarVolume, VectorField, Boundary, InvalidInputError, identity_grid, resample


def test_ssd_and_smoothness_values():
    a = ScalarVolume(torch.zeros((3, 3, 3)))
    b = ScalarVolume(torch.full((3, 3, 3), 0.5))
    assert ssd(a, b) == pytest.approx(27 * 0.25)
    with pytest.raises(InvalidInputError):
        ssd(a, ScalarVolume(torch.zeros((3, 3, 4))))
    ramp = torch.zeros((3, 4, 4, 4), dtype=torch.float64)
    ramp[1] = identity_grid(4)[0]
    # d v_1 / dh = 1 everywhere, every other difference vanishes
    assert smoothness(VectorField(ramp)) == pytest.approx(64.0)


def test_energy_at_zero_velocity(sinusoid):
    cfg = RegistrationConfig(lambda_=3.0)
    shifted = sinusoid.with_data(torch.roll(sinusoid.data, 2, dims=0))
    zero = VectorField.zeros(sinusoid.shape, Boundary.WRAP)
    assert energy(zero, sinusoid, sinusoid, cfg) == 0.0
    assert energy(zero, sinusoid, shifted, cfg) == pytest.approx(3.0 * ssd(sinusoid, shifted), rel=1e-12)


@pytest.mark.filterwarnings('error')
def test_gradient_matches_directional_finite_differences():
    S = sinusoid_image(8, period=8.0)
    F = S.with_data(torch.roll(S.data, 1, dims=1))
    cfg = RegistrationConfig(lambda_=100.0)
    v = random_velocity(8, 0.4, sigma=1.5, seed=2, boundary=Boundary.WRAP)
    _, g = energy_and_gradient(v, S, F, cfg)
    generator = torch.Generator().manual_seed(3)
    eps = 1e-6
    for _ in range(5):
        d = torch.randn(v.data.shape, generator=generator, dtype=torch.float64)
        fd = (energy(v.with_data(v.data + eps * d), S, F, cfg) -
              energy(v.with_data(v.data - eps * d), S, F, cfg)) / (2 * eps)
        assert fd == pytest.approx(float((g.data * d).sum()), rel=1e-3)


def test_identical_images_need_no_motion(sinusoid):
    result = register_pair(sinusoid, sinusoid, RegistrationConfig(iterations=10))
    assert torch.all(result.velocity.data == 0)
    assert result.final_energy == 0.0
    assert result.ssd_reduction == 1.0


def test_recovers_a_translation():
    S = sinusoid_image(16)
    F = S.with_data(torch.roll(S.data, -3, dims=0))
    cfg = RegistrationConfig(lambda_=100.0, iterations=200, field_shape=[4, 4, 4])
    result = register_pair(S, F, cfg)
    u = integrate_svf(resample(result.velocity, 16)).displacement.data
    assert float(u[0].mean()) == pytest.approx(3.0, abs=0.2)
    assert float(u[1].abs().mean()) < 0.2
    assert float(u[2].abs().mean()) < 0.2
    assert result.ssd_reduction >= 0.9


def test_energy_trace_never_increases(phantom):
    cfg = RegistrationConfig(iterations=25)
    result = register_pair(phantom.record.baseline, phantom.record.followups[0], cfg)
    trace = result.energy_trace
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert result.final_energy == pytest.approx(result.lambda_ * result.final_ssd + result.final_reg, rel=1e-9)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        RegistrationConfig(lambda_=0).validate()
    with pytest.raises(InvalidInputError):
        RegistrationConfig(iterations=0).validate()
    cfg = RegistrationConfig(field_shape=8).validate()
    assert cfg.field_shape == [8, 8, 8]
    # noinspection PyUnresolvedReferences
    assert RegistrationConfig.from_dict({'lambda': 5.0}).lambda_ == 5.0


def _subject(frames: int) -> SubjectRecord:
    base = sinusoid_image(8, period=8.0)
    followups = [base.with_data(torch.roll(base.data, t + 1, dims=2)) for t in range(frames)]
    return SubjectRecord('sub-x', base, followups, [70.0 + t for t in range(frames + 1)], DiseaseLabel.CN)


def test_failures_name_the_frame(monkeypatch):
    subject = _subject(3)
    original = registration.register_pair

    def flaky(S, F, cfg=None, v0=None):
        if F is subject.followups[1]:
            raise RegistrationFailed('no descent', [1.0, 1.0])
        return original(S, F, cfg, v0)

    monkeypatch.setattr(registration, 'register_pair', flaky)
    with pytest.raises(RegistrationFailed) as info:
        register_frames(subject, RegistrationConfig(iterations=3))
    assert info.value.frame == 2
    assert info.value.energy_trace == [1.0, 1.0]


def test_register_sequence_keeps_followup_ages():
    subject = _subject(2)
    seq = register_sequence(subject, RegistrationConfig(iterations=3), jobs=2)
    assert seq.ages == [71.0, 72.0]
    assert len(seq) == 2
    with pytest.raises(InvalidInputError):
        register_frames(SubjectRecord('sub-y', subject.baseline, [], [70.0], DiseaseLabel.AD))


@pytest.mark.slow
def test_registration_quality_on_phantom(phantom):
    S, F = phantom.record.baseline, phantom.record.followups[-1]
    result = register_pair(S, F, RegistrationConfig(iterations=200))
    assert psnr(F, warp(S, integrate_svf(result.velocity))) >= 25


@pytest.mark.slow
def test_heavier_intensity_weight_fits_closer(phantom):
    S, F = phantom.record.baseline, phantom.record.followups[-1]
    loose = register_pair(S, F, RegistrationConfig(lambda_=50.0, iterations=150))
    tight = register_pair(S, F, RegistrationConfig(lambda_=100.0, iterations=150))
    assert tight.final_ssd <= loose.final_ssd * 1.05


@pytest.mark.slow
def test_velocity_grows_along_the_sequence(phantom_spec):
    from morphoflow.synthdata import generate_subject
    phantom_spec.frames = 3
    subject = generate_subject(phantom_spec, 99, 'sub-seq', label=DiseaseLabel.AD).record
    seq = register_sequence(subject, RegistrationConfig(iterations=150))
    norms = [float(f.norm().mean()) for f in seq.frames]
    assert all(b >= 0.9 * a for a, b in zip(norms, norms[1:]))
