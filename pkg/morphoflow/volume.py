"""
Grid primitives shared by every other module: volumes, vector fields, interpolation, gradients and resampling.

Coordinates are voxel units with the origin at voxel (0, 0, 0). Tensors are laid out row-major, so the linear voxel
index is ``(h * W + w) * L + l``; vector fields keep their 3 components on the leading axis.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union, List, Sequence, Optional

import torch

Shape3 = Tuple[int, int, int]


class InvalidInputError(ValueError):
    """Raised when an input violates a documented precondition"""


class Boundary(str, Enum):
    """How coordinates outside the grid are mapped back onto it"""
    WRAP = 'wrap'
    """Periodic (torus) domain"""
    CLAMP = 'clamp'
    """Coordinates are clamped to the nearest border voxel"""


def as_shape(shape: Union[int, Sequence[int]]) -> Shape3:
    """Normalizes an int or a 3-sequence into a validated shape tuple"""
    if isinstance(shape, int):
        shape = (shape, shape, shape)
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) <= 0:
        raise InvalidInputError(f'Shape must be 3 positive integers, got {shape}')
    return shape


def _check_finite(data: torch.Tensor, what: str):
    if not bool(torch.isfinite(data.detach()).all()):
        raise InvalidInputError(f'{what} contains non-finite values')


@dataclass(frozen=True)
class ScalarVolume:
    """A 3D grid of real intensities (or integer labels stored as reals)"""

    data: torch.Tensor
    """(H, W, L) tensor"""
    boundary: Boundary = Boundary.CLAMP

    def __post_init__(self):
        data = torch.as_tensor(self.data)
        if data.dim() != 3:
            raise InvalidInputError(f'ScalarVolume needs a 3D tensor, got shape {tuple(data.shape)}')
        if not data.is_floating_point():
            data = data.to(torch.float64)
        _check_finite(data, 'ScalarVolume')
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'boundary', Boundary(self.boundary))

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape)

    def with_data(self, data: torch.Tensor) -> 'ScalarVolume':
        return ScalarVolume(data, self.boundary)


@dataclass(frozen=True)
class VectorField:
    """Per-voxel 3-vectors in voxel units: displacements or velocities"""

    data: torch.Tensor
    """(3, H, W, L) tensor, component-major"""
    boundary: Boundary = Boundary.CLAMP

    def __post_init__(self):
        data = torch.as_tensor(self.data)
        if data.dim() != 4 or data.shape[0] != 3:
            raise InvalidInputError(f'VectorField needs a (3, H, W, L) tensor, got shape {tuple(data.shape)}')
        if not data.is_floating_point():
            data = data.to(torch.float64)
        _check_finite(data, 'VectorField')
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'boundary', Boundary(self.boundary))

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape[1:])

    def with_data(self, data: torch.Tensor) -> 'VectorField':
        return VectorField(data, self.boundary)

    def norm(self) -> torch.Tensor:
        """Per-voxel Euclidean length, (H, W, L)"""
        return torch.linalg.vector_norm(self.data, dim=0)

    def max_norm(self) -> float:
        return float(self.norm().max())

    @classmethod
    def zeros(cls, shape: Union[int, Sequence[int]], boundary: Boundary = Boundary.CLAMP,
              dtype: torch.dtype = torch.float64) -> 'VectorField':
        return cls(torch.zeros((3, *as_shape(shape)), dtype=dtype), boundary)

    @classmethod
    def constant(cls, value: Sequence[float], shape: Union[int, Sequence[int]],
                 boundary: Boundary = Boundary.CLAMP, dtype: torch.dtype = torch.float64) -> 'VectorField':
        data = torch.tensor(list(value), dtype=dtype).view(3, 1, 1, 1).expand(3, *as_shape(shape)).clone()
        return cls(data, boundary)


@dataclass(frozen=True)
class VelocitySequence:
    """The ordered stack of velocity fields of one subject, one per follow-up age"""

    frames: List[VectorField]
    ages: List[float]

    def __post_init__(self):
        if len(self.frames) == 0 or len(self.frames) != len(self.ages):
            raise InvalidInputError(f'Need T >= 1 frames with one age each, got {len(self.frames)} frames '
                                    f'and {len(self.ages)} ages')
        if any(b <= a for a, b in zip(self.ages, self.ages[1:])):
            raise InvalidInputError(f'Ages must be strictly increasing, got {self.ages}')
        if len({f.shape for f in self.frames}) != 1:
            raise InvalidInputError('All frames of a velocity sequence must share one shape')

    @property
    def shape(self) -> Shape3:
        return self.frames[0].shape

    def __len__(self):
        return len(self.frames)

    def stack(self) -> torch.Tensor:
        """The (C, T, H, W, L) tensor the diffusion model works on"""
        return torch.stack([f.data for f in self.frames], dim=1)

    @classmethod
    def from_tensor(cls, z: torch.Tensor, ages: Sequence[float],
                    boundary: Boundary = Boundary.CLAMP) -> 'VelocitySequence':
        if z.dim() != 5 or z.shape[0] != 3:
            raise InvalidInputError(f'Expected a (3, T, H, W, L) tensor, got {tuple(z.shape)}')
        return cls([VectorField(z[:, t], boundary) for t in range(z.shape[1])], [float(a) for a in ages])


def identity_grid(shape: Union[int, Sequence[int]], dtype: torch.dtype = torch.float64,
                  device: Optional[torch.device] = None) -> torch.Tensor:
    """Voxel coordinates of every grid point, (3, H, W, L)"""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in as_shape(shape)]
    return torch.stack(torch.meshgrid(*axes, indexing='ij'), dim=0)


def _corners(c: torch.Tensor, n: int, boundary: Boundary) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if boundary is Boundary.WRAP:
        c0 = torch.floor(c)
        frac = c - c0
        i0 = torch.remainder(c0.to(torch.long), n)
        i1 = torch.remainder(i0 + 1, n)
    else:
        c = c.clamp(0, n - 1)
        c0 = torch.floor(c)
        frac = c - c0
        i0 = c0.to(torch.long)
        i1 = torch.clamp(i0 + 1, max=n - 1)
    return i0, i1, frac


def interpolate(data: torch.Tensor, coords: torch.Tensor, boundary: Boundary) -> torch.Tensor:
    """Trilinear interpolation of a (C, H, W, L) tensor at (3, *Q) voxel coordinates, returns (C, *Q).

    Blends are written as nested lerps so constant data and integer coordinates reproduce stored values exactly.
    Differentiable with respect to both the data and the coordinates.
    """
    channels, h, w, l = data.shape
    q_shape = coords.shape[1:]
    flat = data.reshape(channels, -1)
    h0, h1, fh = _corners(coords[0].reshape(-1), h, boundary)
    w0, w1, fw = _corners(coords[1].reshape(-1), w, boundary)
    l0, l1, fl = _corners(coords[2].reshape(-1), l, boundary)

    def at(ih, iw, il):
        return flat[:, (ih * w + iw) * l + il]

    def lerp(a, b, f):
        return a + f * (b - a)

    c00 = lerp(at(h0, w0, l0), at(h1, w0, l0), fh)
    c01 = lerp(at(h0, w0, l1), at(h1, w0, l1), fh)
    c10 = lerp(at(h0, w1, l0), at(h1, w1, l0), fh)
    c11 = lerp(at(h0, w1, l1), at(h1, w1, l1), fh)
    c0 = lerp(c00, c10, fw)
    c1 = lerp(c01, c11, fw)
    return lerp(c0, c1, fl).reshape(channels, *q_shape)


def nearest(data: torch.Tensor, coords: torch.Tensor, boundary: Boundary) -> torch.Tensor:
    """Nearest-neighbour lookup of a (C, H, W, L) tensor at (3, *Q) coordinates"""
    channels, h, w, l = data.shape
    q_shape = coords.shape[1:]
    idx = []
    for c, n in zip(coords, (h, w, l)):
        i = torch.round(c.reshape(-1)).to(torch.long)
        idx.append(torch.remainder(i, n) if boundary is Boundary.WRAP else i.clamp(0, n - 1))
    return data.reshape(channels, -1)[:, (idx[0] * w + idx[1]) * l + idx[2]].reshape(channels, *q_shape)


def trilinear_sample(vol: Union[ScalarVolume, VectorField], coords) -> torch.Tensor:
    """Samples a volume or field at arbitrary voxel coordinates.

    ``coords`` is anything convertible to a (..., 3) tensor. Returns (...) values for a ScalarVolume and
    (..., 3) vectors for a VectorField.
    """
    coords = torch.as_tensor(coords, dtype=vol.data.dtype)
    if coords.shape[-1] != 3:
        raise InvalidInputError(f'Coordinates must end in a dimension of size 3, got {tuple(coords.shape)}')
    _check_finite(coords, 'Sampling coordinates')
    q = torch.movedim(coords, -1, 0)
    if isinstance(vol, ScalarVolume):
        return interpolate(vol.data.unsqueeze(0), q, vol.boundary)[0]
    return torch.movedim(interpolate(vol.data, q, vol.boundary), 0, -1)


def partials(data: torch.Tensor, boundary: Boundary) -> List[torch.Tensor]:
    """Central differences along the last three axes of ``data``.

    Clamped grids use one-sided differences on their border voxels; wrapped grids difference across the seam.
    """
    if min(data.shape[-3:]) < 3:
        raise InvalidInputError(f'Differencing needs at least 3 voxels per axis, got {tuple(data.shape[-3:])}')
    out = []
    for dim in (-3, -2, -1):
        if boundary is Boundary.WRAP:
            out.append((torch.roll(data, -1, dims=dim) - torch.roll(data, 1, dims=dim)) / 2)
        else:
            out.append(torch.gradient(data, dim=dim, edge_order=1)[0])
    return out


def spatial_gradient(vol: ScalarVolume) -> VectorField:
    """Intensity gradient of a volume, in intensity per voxel"""
    return VectorField(torch.stack(partials(vol.data, vol.boundary), dim=0), vol.boundary)


def resample(obj: Union[ScalarVolume, VectorField], new_shape: Union[int, Sequence[int]]) \
        -> Union[ScalarVolume, VectorField]:
    """Trilinear resampling onto a new grid of the same physical extent.

    Grids are cell-centred, so output voxel j of an axis going from n to m voxels reads input coordinate
    ``(j + 0.5) * n / m - 0.5``. Vector components are multiplied by ``m / n`` so displacements stay in voxels.
    """
    new_shape = as_shape(new_shape)
    if new_shape == obj.shape:
        return obj
    dtype, device = obj.data.dtype, obj.data.device
    axes = [(torch.arange(m, dtype=dtype, device=device) + 0.5) * (n / m) - 0.5
            for n, m in zip(obj.shape, new_shape)]
    coords = torch.stack(torch.meshgrid(*axes, indexing='ij'), dim=0)
    if isinstance(obj, ScalarVolume):
        return ScalarVolume(interpolate(obj.data.unsqueeze(0), coords, obj.boundary)[0], obj.boundary)
    ratio = torch.tensor([m / n for n, m in zip(obj.shape, new_shape)], dtype=dtype, device=device)
    return VectorField(interpolate(obj.data, coords, obj.boundary) * ratio.view(3, 1, 1, 1), obj.boundary)
