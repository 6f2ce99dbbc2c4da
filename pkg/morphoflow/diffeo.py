"""
Diffeomorphisms from stationary velocity fields: exponentiation, composition, warping and Jacobian analysis
"""
import csv
from dataclasses import dataclass
from typing import List, Sequence

import torch
from dataclasses_json import dataclass_json

from morphoflow.mylogger import logger
from morphoflow.volume import VectorField, ScalarVolume, InvalidInputError, identity_grid, interpolate, nearest, \
    partials

DEFAULT_SQUARING_STEPS = 7
MAX_SCALED_NORM = 0.5
"""Largest per-step displacement (voxels) allowed after scaling a velocity by 2^-K"""


@dataclass(frozen=True)
class DeformationField:
    """phi(x) = x + u(x), stored as the displacement u"""

    displacement: VectorField
    squaring_steps: int = 0
    """Squaring steps used to produce this field (provenance only)"""

    @property
    def shape(self):
        return self.displacement.shape

    @property
    def boundary(self):
        return self.displacement.boundary

    def coordinates(self) -> torch.Tensor:
        """Absolute sampling coordinates x + u(x), (3, H, W, L)"""
        u = self.displacement.data
        return identity_grid(self.shape, u.dtype, u.device) + u

    @classmethod
    def identity(cls, shape, boundary='clamp', dtype: torch.dtype = torch.float64) -> 'DeformationField':
        return cls(VectorField.zeros(shape, boundary, dtype))


@dataclass_json
@dataclass
class DetJacStats:
    """Summary of a Jacobian-determinant map over interior voxels"""
    mean: float
    std: float
    negative_fraction: float
    per_frame: bool = True


def squaring_steps_for(v: VectorField, K: int = DEFAULT_SQUARING_STEPS) -> int:
    """Smallest K' >= K such that max|v| / 2^K' stays within half a voxel"""
    if K < 0:
        raise InvalidInputError(f'Squaring steps must be >= 0, got {K}')
    max_norm = float(v.norm().detach().max())
    while max_norm / 2 ** K > MAX_SCALED_NORM:
        K += 1
    return K


def integrate_svf(v: VectorField, K: int = DEFAULT_SQUARING_STEPS, auto_raise: bool = True) -> DeformationField:
    """Exponentiates a stationary velocity field by scaling and squaring.

    u_0 = v / 2^K, then u_{k+1}(x) = u_k(x) + u_k(x + u_k(x)), K times. Differentiable with respect to v.
    """
    if K < 0:
        raise InvalidInputError(f'Squaring steps must be >= 0, got {K}')
    if auto_raise:
        raised = squaring_steps_for(v, K)
        if raised != K:
            logger.debug('Raising squaring steps from %d to %d (max |v| = %.3f)', K, raised, v.max_norm())
        K = raised
    grid = identity_grid(v.shape, v.data.dtype, v.data.device)
    u = v.data / 2 ** K
    for _ in range(K):
        u = u + interpolate(u, grid + u, v.boundary)
    return DeformationField(VectorField(u, v.boundary), K)


def _check_same_shape(a, b, what: str):
    if a.shape != b.shape:
        raise InvalidInputError(f'{what}: shape mismatch {a.shape} vs {b.shape}')


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """(outer o inner)(x) = outer(inner(x)), i.e. u(x) = u_inner(x) + u_outer(x + u_inner(x))"""
    _check_same_shape(outer, inner, 'compose')
    u_in = inner.displacement.data
    u = u_in + interpolate(outer.displacement.data, inner.coordinates(), outer.boundary)
    return DeformationField(VectorField(u, inner.boundary), max(outer.squaring_steps, inner.squaring_steps))


def warp(image: ScalarVolume, phi: DeformationField, mode: str = 'linear') -> ScalarVolume:
    """Pulls an image back through a deformation: output(x) = image(x + u(x)).

    ``linear`` is for intensities, ``nearest`` for label maps (output values stay within the input label set).
    """
    _check_same_shape(image, phi, 'warp')
    coords = phi.coordinates()
    if mode == 'linear':
        out = interpolate(image.data.unsqueeze(0), coords, image.boundary)[0]
    elif mode == 'nearest':
        out = nearest(image.data.unsqueeze(0), coords, image.boundary)[0]
    else:
        raise InvalidInputError(f'Unknown warp mode {mode!r}')
    return ScalarVolume(out, image.boundary)


def jacobian_determinant(phi: DeformationField) -> ScalarVolume:
    """det(I + du/dx) per voxel, with the same central differences as spatial_gradient"""
    u = phi.displacement.data
    # j[i][k] = d u_i / d x_k
    j = [partials(u[i], phi.boundary) for i in range(3)]
    a, b, c = 1 + j[0][0], j[0][1], j[0][2]
    d, e, f = j[1][0], 1 + j[1][1], j[1][2]
    g, h, i = j[2][0], j[2][1], 1 + j[2][2]
    det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
    return ScalarVolume(det, phi.boundary)


def detjac_stats(dj: ScalarVolume, per_frame: bool = True) -> DetJacStats:
    """Mean, population std and fraction of negative values over interior voxels (one-voxel border dropped)"""
    interior = dj.data[1:-1, 1:-1, 1:-1].detach()
    if interior.numel() == 0:
        raise InvalidInputError(f'Volume {dj.shape} has no interior voxels')
    return DetJacStats(mean=float(interior.mean()),
                       std=float(interior.std(unbiased=False)),
                       negative_fraction=float((interior < 0).sum()) / interior.numel(),
                       per_frame=per_frame)


def write_detjac_report(path: str, model: str, stats: Sequence[DetJacStats]):
    """CSV rows model,frame,mean,std,neg_fraction with 1-based frames"""
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['model', 'frame', 'mean', 'std', 'neg_fraction'])
        for frame, s in enumerate(stats, start=1):
            writer.writerow([model, frame, repr(s.mean), repr(s.std), repr(s.negative_fraction)])


def read_detjac_report(path: str) -> List[DetJacStats]:
    with open(path, newline='') as f:
        return [DetJacStats(float(row['mean']), float(row['std']), float(row['neg_fraction']))
                for row in csv.DictReader(f)]
