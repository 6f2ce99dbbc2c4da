import pytest
import torch

from conftest import sinusoid_image
from morphoflow.diffeo import integrate_svf, warp
from morphoflow.registration import RegistrationConfig, amortized_register, register_pair, energy, ssd
from morphoflow.regnet import RegNet, train_regnet
from morphoflow.subject import DiseaseLabel
from morphoflow.synthdata import PhantomSpec, generate_subject
from morphoflow.volume import InvalidInputError


def test_untrained_net_outputs_zero_velocity():
    net = RegNet(8, field_shape=4)
    S = sinusoid_image(8, period=8.0)
    v = net.velocity(S, S)
    assert v.shape == (4, 4, 4)
    assert torch.all(v.data == 0)
    with pytest.raises(InvalidInputError):
        net.predict(S, S)


def test_shapes_are_checked():
    with pytest.raises(InvalidInputError):
        RegNet(10)
    net = RegNet(8)
    with pytest.raises(InvalidInputError):
        net.velocity(sinusoid_image(12, period=12.0), sinusoid_image(12, period=12.0))


def test_training_enables_prediction():
    S = sinusoid_image(8, period=8.0)
    F = S.with_data(torch.roll(S.data, 1, dims=0))
    cfg = RegistrationConfig(lambda_=10.0, K=4)
    net, losses = train_regnet([(S, F)], cfg, steps=5, lr=1e-3, seed=1)
    assert len(losses) == 5
    assert int(net.steps_trained) == 5
    v = amortized_register((S, F), net)
    assert v.shape == S.shape
    assert not v.data.requires_grad
    with pytest.raises(InvalidInputError):
        train_regnet([], cfg)


def test_training_is_seeded():
    S = sinusoid_image(8, period=8.0)
    F = S.with_data(torch.roll(S.data, 1, dims=1))
    cfg = RegistrationConfig(lambda_=10.0, K=4)
    _, a = train_regnet([(S, F)], cfg, steps=3, seed=2)
    _, b = train_regnet([(S, F)], cfg, steps=3, seed=2)
    assert a == b


@pytest.mark.slow
def test_trained_net_keeps_identical_pairs_still():
    S = sinusoid_image(8, period=8.0)
    pairs = [(S, S.with_data(torch.roll(S.data, s, dims=0))) for s in (-1, 0, 1)]
    net, _ = train_regnet(pairs, RegistrationConfig(lambda_=10.0, K=4), steps=200, seed=3)
    assert float(net.predict(S, S).norm().mean()) < 0.25


@pytest.mark.slow
def test_amortization_gap_on_held_out_phantoms():
    spec = PhantomSpec(shape=[16, 16, 16], frames=2, noise_sigma=0.0)
    labels = [DiseaseLabel.CN, DiseaseLabel.MCI, DiseaseLabel.AD]
    records = [generate_subject(spec, 700 + i, f'sub-{i:03d}', label=labels[i % 3]).record for i in range(24)]
    pairs = [(r.baseline, f) for r in records[:-1] for f in r.followups]
    pairs += [(r.baseline, r.baseline) for r in records[:-1]]
    cfg = RegistrationConfig()
    net, _ = train_regnet(pairs, cfg, steps=4000, lr=1e-3, seed=4)

    held_out = records[-1]
    assert held_out.label is DiseaseLabel.AD
    S, F = held_out.baseline, held_out.followups[-1]
    direct = register_pair(S, F, RegistrationConfig(iterations=200))
    v = amortized_register((S, F), net)
    assert energy(v, S, F, cfg) <= 1.5 * direct.final_energy
    amortized_reduction = 1.0 - ssd(warp(S, integrate_svf(v)), F) / ssd(S, F)
    assert amortized_reduction >= 0.7 * direct.ssd_reduction
    assert float(net.predict(S, S).norm().mean()) < 0.1
