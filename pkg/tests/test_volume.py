import math

import numpy as np
import pytest
import torch

from morphoflow.volume import ScalarVolume, VectorField, VelocitySequence, Boundary, InvalidInputError, \
    trilinear_sample, spatial_gradient, resample, identity_grid, as_shape


def test_sample_at_lattice_point_is_exact():
    data = torch.rand((5, 6, 7), dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    vol = ScalarVolume(data)
    assert float(trilinear_sample(vol, [2.0, 3.0, 4.0])) == float(data[2, 3, 4])


def test_constant_volume_samples_constant():
    vol = ScalarVolume(torch.full((4, 4, 4), 0.37, dtype=torch.float64))
    coords = torch.tensor([[0.3, 1.7, 2.2], [-3.0, 9.5, 1.0], [3.99, 0.01, 2.5]], dtype=torch.float64)
    assert torch.all(trilinear_sample(vol, coords) == 0.37)


def test_ramp_blend_under_clamp():
    ramp = identity_grid((6, 4, 4))[0]
    vol = ScalarVolume(ramp, Boundary.CLAMP)
    assert float(trilinear_sample(vol, [2.5, 1.0, 3.0])) == pytest.approx(2.5, abs=1e-12)
    # Outside the grid the value clamps to the border
    assert float(trilinear_sample(vol, [9.0, 1.0, 1.0])) == pytest.approx(5.0, abs=1e-12)


def test_wrap_boundary_is_periodic():
    data = torch.rand((4, 5, 6), dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    vol = ScalarVolume(data, Boundary.WRAP)
    a = trilinear_sample(vol, [1.25, 2.5, 0.75])
    b = trilinear_sample(vol, [1.25 + 4, 2.5 - 5, 0.75 + 12])
    assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_exact_on_multilinear_functions():
    a, b, c, d, e = 0.3, -1.2, 0.7, 2.0, 0.05
    x = identity_grid((6, 7, 8))
    f = a + b * x[0] + c * x[1] + d * x[2] + e * x[0] * x[1] * x[2]
    vol = ScalarVolume(f)
    rng = np.random.default_rng(5)
    q = torch.from_numpy(rng.uniform(0, 1, (50, 3)) * np.array([5, 6, 7]))
    expected = a + b * q[:, 0] + c * q[:, 1] + d * q[:, 2] + e * q[:, 0] * q[:, 1] * q[:, 2]
    assert torch.allclose(trilinear_sample(vol, q), expected, atol=1e-10)


def test_vector_field_sampling_returns_vectors():
    vf = VectorField.constant([1.0, -2.0, 0.5], 4)
    out = trilinear_sample(vf, torch.zeros((2, 5, 3), dtype=torch.float64))
    assert out.shape == (2, 5, 3)
    assert torch.all(out[..., 1] == -2.0)


def test_non_finite_coordinates_rejected():
    vol = ScalarVolume(torch.zeros((4, 4, 4)))
    with pytest.raises(InvalidInputError):
        trilinear_sample(vol, [0.0, math.nan, 1.0])


def test_containers_validate():
    with pytest.raises(InvalidInputError):
        ScalarVolume(torch.zeros((4, 4)))
    with pytest.raises(InvalidInputError):
        ScalarVolume(torch.tensor([[[math.inf]]]))
    with pytest.raises(InvalidInputError):
        VectorField(torch.zeros((2, 4, 4, 4)))
    with pytest.raises(InvalidInputError):
        as_shape((4, 0, 4))


def test_velocity_sequence_invariants():
    frames = [VectorField.zeros(4), VectorField.zeros(4)]
    with pytest.raises(InvalidInputError):
        VelocitySequence(frames, [70.0, 70.0])
    with pytest.raises(InvalidInputError):
        VelocitySequence(frames, [70.0])
    with pytest.raises(InvalidInputError):
        VelocitySequence([VectorField.zeros(4), VectorField.zeros(5)], [70.0, 71.0])
    seq = VelocitySequence(frames, [70.0, 71.5])
    assert seq.stack().shape == (3, 2, 4, 4, 4)
    assert len(VelocitySequence.from_tensor(seq.stack(), seq.ages)) == 2


def test_gradient_of_constant_is_zero():
    vol = ScalarVolume(torch.full((5, 5, 5), 3.0, dtype=torch.float64))
    for boundary in Boundary:
        assert torch.all(spatial_gradient(ScalarVolume(vol.data, boundary)).data == 0)


def test_gradient_of_ramp():
    x = identity_grid((6, 5, 4))
    g = spatial_gradient(ScalarVolume(2 * x[0], Boundary.CLAMP)).data
    assert torch.allclose(g[0], torch.full_like(g[0], 2.0))
    assert torch.all(g[1] == 0) and torch.all(g[2] == 0)


def _gradient_oracle(a: np.ndarray, wrap: bool) -> np.ndarray:
    out = np.zeros((3, *a.shape))
    for axis in range(3):
        n = a.shape[axis]
        for idx in np.ndindex(*a.shape):
            i = idx[axis]

            def at(j):
                k = list(idx)
                k[axis] = j
                return a[tuple(k)]

            if wrap:
                value = (at((i + 1) % n) - at((i - 1) % n)) / 2
            elif i == 0:
                value = at(1) - at(0)
            elif i == n - 1:
                value = at(n - 1) - at(n - 2)
            else:
                value = (at(i + 1) - at(i - 1)) / 2
            out[(axis, *idx)] = value
    return out


@pytest.mark.parametrize('boundary', list(Boundary))
def test_gradient_matches_loop_oracle(boundary):
    a = np.random.default_rng(2).standard_normal((4, 5, 6))
    g = spatial_gradient(ScalarVolume(torch.from_numpy(a), boundary)).data.numpy()
    np.testing.assert_allclose(g, _gradient_oracle(a, boundary is Boundary.WRAP), rtol=0, atol=1e-12)


def test_gradient_is_linear():
    rng = np.random.default_rng(4)
    f, g = (torch.from_numpy(rng.standard_normal((5, 5, 5))) for _ in range(2))
    lhs = spatial_gradient(ScalarVolume(f + g)).data
    rhs = spatial_gradient(ScalarVolume(f)).data + spatial_gradient(ScalarVolume(g)).data
    assert torch.allclose(lhs, rhs, atol=1e-13)


def test_gradient_needs_three_voxels():
    with pytest.raises(InvalidInputError):
        spatial_gradient(ScalarVolume(torch.zeros((2, 5, 5))))


def test_resample_same_shape_is_identity():
    vf = VectorField(torch.randn((3, 6, 6, 6), dtype=torch.float64))
    out = resample(vf, (6, 6, 6))
    assert torch.equal(out.data, vf.data)


def test_resample_scales_displacements():
    out = resample(VectorField.constant([1.0, -0.5, 0.25], 16), 32)
    assert out.shape == (32, 32, 32)
    assert torch.allclose(out.data[:, 5, 7, 9], torch.tensor([2.0, -1.0, 0.5], dtype=torch.float64))
    assert torch.allclose(out.data, out.data[:, :1, :1, :1].expand_as(out.data))


def test_resample_keeps_constant_volume():
    out = resample(ScalarVolume(torch.full((8, 8, 8), 0.7, dtype=torch.float64)), (12, 5, 16))
    assert torch.all(out.data == 0.7)


def test_resample_round_trip_of_smooth_field():
    # Half a cosine period over the grid extent, flat at both borders
    x = identity_grid(16)
    k = math.pi / 16
    data = torch.stack([torch.cos(k * (x[0] + 0.5)), torch.cos(k * (x[1] + 0.5)), torch.cos(k * (x[2] + 0.5))])
    vf = VectorField(data, Boundary.CLAMP)
    back = resample(resample(vf, 32), 16)
    assert float((back.data - vf.data).abs().max()) < 0.02
