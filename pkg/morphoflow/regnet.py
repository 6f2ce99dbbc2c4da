"""
Amortized registration: a small 3D convolutional encoder-decoder that maps a (template, fixed) pair to a velocity
field, trained without supervision on the registration energy.
"""
import time
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as nnf

from morphoflow.mylogger import logger
from morphoflow.registration import RegistrationConfig, energy_terms
from morphoflow.volume import ScalarVolume, VectorField, InvalidInputError, as_shape, resample


class ConvBlock(nn.Module):
    """Conv3d followed by LeakyReLU"""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.main = nn.Conv3d(in_channels, out_channels, 3, stride, 1)
        self.activation = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.activation(self.main(x))


class RegNet(nn.Module):
    """Two-level U-Net; the velocity head is zero-initialized so an untrained net predicts the identity"""

    def __init__(self, image_shape, field_shape=None, width: int = 16):
        super().__init__()
        self.image_shape = as_shape(image_shape)
        self.field_shape = as_shape(field_shape) if field_shape is not None else self.image_shape
        if any(n % 4 for n in self.image_shape):
            raise InvalidInputError(f'RegNet needs image sides divisible by 4, got {self.image_shape}')
        self.enc0 = ConvBlock(2, width)
        self.enc1 = ConvBlock(width, 2 * width, stride=2)
        self.enc2 = ConvBlock(2 * width, 2 * width, stride=2)
        self.dec1 = ConvBlock(4 * width, 2 * width)
        self.dec0 = ConvBlock(3 * width, width)
        self.flow = nn.Conv3d(width, 3, 3, 1, 1)
        nn.init.zeros_(self.flow.weight)
        nn.init.zeros_(self.flow.bias)
        self.register_buffer('steps_trained', torch.zeros((), dtype=torch.long))

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        """(B, 2, H, W, L) -> (B, 3, H, W, L) velocity at image resolution"""
        e0 = self.enc0(pair)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        d1 = self.dec1(torch.cat([nnf.interpolate(e2, size=e1.shape[2:], mode='trilinear', align_corners=False),
                                  e1], dim=1))
        d0 = self.dec0(torch.cat([nnf.interpolate(d1, size=e0.shape[2:], mode='trilinear', align_corners=False),
                                  e0], dim=1))
        return self.flow(d0)

    def velocity(self, S: ScalarVolume, F: ScalarVolume) -> VectorField:
        """Differentiable prediction at ``field_shape``, in the dtype and boundary of the template"""
        if S.shape != self.image_shape or F.shape != self.image_shape:
            raise InvalidInputError(f'RegNet was built for {self.image_shape}, got {S.shape} and {F.shape}')
        param = next(self.parameters())
        pair = torch.stack([S.data, F.data]).unsqueeze(0).to(param.dtype)
        v = VectorField(self(pair)[0].to(S.data.dtype), S.boundary)
        return resample(v, self.field_shape)

    def predict(self, S: ScalarVolume, F: ScalarVolume) -> VectorField:
        if int(self.steps_trained) == 0:
            raise InvalidInputError('RegNet has not been trained')
        with torch.no_grad():
            v = self.velocity(S, F)
        return VectorField(v.data.detach(), v.boundary)


def train_regnet(pairs: Sequence[Tuple[ScalarVolume, ScalarVolume]], cfg: RegistrationConfig = None,
                 steps: int = 500, lr: float = 1e-3, seed: int = 0, net: RegNet = None) -> Tuple[RegNet, List[float]]:
    """Fits a RegNet to minimize the registration energy of the given pairs, one random pair per step"""
    cfg = (cfg or RegistrationConfig()).validate()
    if not pairs:
        raise InvalidInputError('train_regnet needs at least one pair')
    if steps < 1:
        raise InvalidInputError(f'steps must be >= 1, got {steps}')
    torch.manual_seed(seed)
    net = net or RegNet(pairs[0][0].shape, cfg.field_shape)
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    losses = []
    start = time.time()
    net.train()
    for step in range(steps):
        S, F = pairs[int(torch.randint(len(pairs), (1,), generator=generator))]
        total, _, _ = energy_terms(net.velocity(S, F), S, F, cfg)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        losses.append(float(total))
        if step % 100 == 0:
            logger.debug('RegNet step %d: energy %.6g', step, losses[-1])
    net.steps_trained += steps
    net.eval()
    logger.info('train_regnet took %.3f seconds (%d steps, last energy %.6g)', time.time() - start, steps, losses[-1])
    return net, losses
