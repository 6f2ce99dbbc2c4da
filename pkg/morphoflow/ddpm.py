"""
Diffusion machinery over velocity-field sequences: cosine schedule, forward corruption, ancestral predictor,
Langevin corrector, L1 noise-prediction loss and the predictor-corrector sampler.

Diffusion steps are 1-based: tau = 1 is the least noisy level and z0 is the clean sequence. Tables are stored
0-based, so ``beta[tau - 1]`` is beta_tau.
"""
import json
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Union, Any

import torch
from dataclasses_json import dataclass_json

from morphoflow.mylogger import logger
from morphoflow.volume import InvalidInputError

Model = Callable[[torch.Tensor, torch.Tensor, Any], torch.Tensor]
"""eps_hat = model(z_tau, tau, cond) with tau a (B,) long tensor"""

DEFAULT_STEPS = 1000
DEFAULT_S_OFFSET = 0.008
DEFAULT_SNR = 0.16
MAX_BETA = 0.999


class SamplingFailed(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass_json
@dataclass
class ScheduleDump:
    """Reproducibility audit of a schedule"""
    steps: int
    s_offset: float
    beta: List[float]
    alpha_bar: List[float]


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    s_offset: float
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    def check_tau(self, tau: Union[int, torch.Tensor]):
        lo, hi = (int(tau.min()), int(tau.max())) if isinstance(tau, torch.Tensor) else (int(tau), int(tau))
        if lo < 1 or hi > self.steps:
            raise InvalidInputError(f'Diffusion step must be in 1..{self.steps}, got {tau}')

    def alpha_bar_prev(self, tau: int) -> float:
        """alpha_bar_{tau-1}, with alpha_bar_0 = 1"""
        return 1.0 if tau == 1 else float(self.alpha_bar[tau - 2])

    def posterior_variance(self, tau: int) -> float:
        """beta~_tau = beta_tau (1 - alpha_bar_{tau-1}) / (1 - alpha_bar_tau), zero at tau = 1"""
        self.check_tau(tau)
        return float(self.beta[tau - 1]) * (1.0 - self.alpha_bar_prev(tau)) / (1.0 - float(self.alpha_bar[tau - 1]))

    def dump(self) -> ScheduleDump:
        return ScheduleDump(self.steps, self.s_offset, self.beta.tolist(), self.alpha_bar.tolist())

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            # noinspection PyUnresolvedReferences
            f.write(self.dump().to_json(indent=2) + '\n')


def cosine_schedule(steps: int = DEFAULT_STEPS, s_offset: float = DEFAULT_S_OFFSET) -> NoiseSchedule:
    """alpha_bar follows f(t) = cos^2(((t/T + s) / (1 + s)) pi/2) normalized by f(0), with beta clipped at 0.999"""
    if steps < 2:
        raise InvalidInputError(f'A schedule needs at least 2 steps, got {steps}')
    if s_offset < 0:
        raise InvalidInputError(f'Cosine offset must be >= 0, got {s_offset}')
    t = torch.arange(steps + 1, dtype=torch.float64) / steps
    f = torch.cos((t + s_offset) / (1 + s_offset) * (math.pi / 2)) ** 2
    beta = torch.clip(1 - f[1:] / f[:-1], max=MAX_BETA)
    alpha = 1 - beta
    return NoiseSchedule(steps, s_offset, beta, alpha, torch.cumprod(alpha, dim=0))


def load_schedule(path: str) -> NoiseSchedule:
    """Rebuilds a schedule from its dump; the tables are recomputed and checked against the stored ones"""
    with open(path, 'r', encoding='utf-8') as f:
        # noinspection PyUnresolvedReferences
        dump = ScheduleDump.from_dict(json.load(f))
    sched = cosine_schedule(dump.steps, dump.s_offset)
    if not torch.allclose(sched.alpha_bar, torch.tensor(dump.alpha_bar, dtype=torch.float64), rtol=1e-9, atol=0):
        raise InvalidInputError(f'{path} does not hold a cosine schedule')
    return sched


@dataclass(frozen=True)
class DiffusionState:
    """A noisy sequence at diffusion step tau; tau = 0 holds the finished sample"""
    z_tau: torch.Tensor
    tau: int

    @property
    def finite(self) -> bool:
        return bool(torch.isfinite(self.z_tau).all())

    def check(self, sched: NoiseSchedule) -> 'DiffusionState':
        sched.check_tau(self.tau)
        if not self.finite:
            raise InvalidInputError(f'Diffusion state at step {self.tau} is not finite')
        return self


def _per_sample(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Broadcasts a (B,) table lookup over the trailing axes of ``like``"""
    return values.to(like).view(-1, *([1] * (like.dim() - 1)))


def forward_sample(z0: torch.Tensor, tau: Union[int, torch.Tensor], epsilon: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    """z_tau = sqrt(alpha_bar_tau) z0 + sqrt(1 - alpha_bar_tau) epsilon"""
    if z0.shape != epsilon.shape:
        raise InvalidInputError(f'z0 {tuple(z0.shape)} and noise {tuple(epsilon.shape)} differ in shape')
    sched.check_tau(tau)
    if isinstance(tau, torch.Tensor):
        ab = _per_sample(sched.alpha_bar[tau.long().cpu() - 1], z0)
    else:
        ab = torch.as_tensor(float(sched.alpha_bar[tau - 1]), dtype=z0.dtype, device=z0.device)
    return torch.sqrt(ab) * z0 + torch.sqrt(1 - ab) * epsilon


def predictor_step(z_tau: torch.Tensor, eps_hat: torch.Tensor, tau: int, sched: NoiseSchedule,
                   noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One ancestral step z_tau -> z_{tau-1} with the fixed posterior variance; no noise is added at tau = 1"""
    sched.check_tau(tau)
    beta = float(sched.beta[tau - 1])
    alpha = float(sched.alpha[tau - 1])
    alpha_bar = float(sched.alpha_bar[tau - 1])
    mean = (z_tau - beta / math.sqrt(1 - alpha_bar) * eps_hat) / math.sqrt(alpha)
    if tau == 1 or noise is None:
        return mean
    return mean + math.sqrt(sched.posterior_variance(tau)) * noise


def corrector_step(z_tau: torch.Tensor, eps_hat: torch.Tensor, tau: int, sched: NoiseSchedule,
                   snr: float = DEFAULT_SNR, noise: torch.Tensor = None) -> torch.Tensor:
    """One Langevin refinement at level tau using the score implied by the noise estimate.

    score = -eps_hat / sqrt(1 - alpha_bar_tau); the step is 2 alpha_tau (snr |noise| / |score|)^2 with norms taken per
    sample and averaged over the batch.
    """
    sched.check_tau(tau)
    if snr < 0:
        raise InvalidInputError(f'snr must be >= 0, got {snr}')
    if noise is None:
        noise = torch.zeros_like(z_tau)
    score = -eps_hat / math.sqrt(1 - float(sched.alpha_bar[tau - 1]))
    batch = z_tau.shape[0]
    score_norm = torch.linalg.vector_norm(score.reshape(batch, -1), dim=-1).mean()
    noise_norm = torch.linalg.vector_norm(noise.reshape(batch, -1), dim=-1).mean()
    if float(score_norm) == 0.0 or snr == 0:
        return z_tau
    step = 2 * float(sched.alpha[tau - 1]) * (snr * noise_norm / score_norm) ** 2
    return z_tau + step * score + torch.sqrt(2 * step) * noise


def diffusion_loss(model: Model, z0: torch.Tensor, cond, sched: NoiseSchedule,
                   generator: torch.Generator = None) -> torch.Tensor:
    """Mean absolute error between the injected noise and its prediction, tau uniform in 1..T"""
    batch = z0.shape[0]
    tau = torch.randint(1, sched.steps + 1, (batch,), generator=generator)
    epsilon = torch.randn(z0.shape, generator=generator, dtype=z0.dtype).to(z0.device)
    z_tau = forward_sample(z0, tau, epsilon, sched)
    eps_hat = model(z_tau, tau.to(z0.device), cond)
    if eps_hat.shape != epsilon.shape:
        raise InvalidInputError(f'Model returned shape {tuple(eps_hat.shape)}, expected {tuple(epsilon.shape)}')
    return (epsilon - eps_hat).abs().mean()


def _checked(eps_hat: torch.Tensor, tau: int) -> torch.Tensor:
    if not bool(torch.isfinite(eps_hat).all()):
        raise SamplingFailed(f'Model output is not finite at diffusion step {tau}', tau)
    return eps_hat


def sample(model: Model, cond, shape, sched: NoiseSchedule, M: int = 2, snr: float = DEFAULT_SNR,
           generator: torch.Generator = None, device: Union[str, torch.device] = 'cpu',
           dtype: torch.dtype = torch.float32, start: Optional[DiffusionState] = None) -> torch.Tensor:
    """Predictor-corrector sampling from z_T ~ N(0, I) down to z0.

    Every predictor step is followed by M corrector steps at the new level (none after the last step); M = 0 is plain
    ancestral sampling. Noise is drawn on the CPU from ``generator`` so results do not depend on the device.
    ``start`` resumes the chain from an intermediate state instead of pure noise at step T.
    """
    if M < 0:
        raise InvalidInputError(f'M must be >= 0, got {M}')
    shape = tuple(shape)
    if start is not None:
        start.check(sched)
        if tuple(start.z_tau.shape) != shape:
            raise InvalidInputError(f'Start state shape {tuple(start.z_tau.shape)} differs from {shape}')
    began = time.time()

    def randn():
        return torch.randn(shape, generator=generator, dtype=dtype).to(device)

    def step_tensor(tau):
        return torch.full((shape[0],), tau, dtype=torch.long, device=device)

    with torch.no_grad():
        state = start if start is not None else DiffusionState(randn(), sched.steps)
        first = state.tau
        while state.tau > 0:
            tau, z = state.tau, state.z_tau.to(device=device, dtype=dtype)
            eps_hat = _checked(model(z, step_tensor(tau), cond), tau)
            z = predictor_step(z, eps_hat, tau, sched, randn() if tau > 1 else None)
            if tau > 1:
                for _ in range(M):
                    eps_hat = _checked(model(z, step_tensor(tau - 1), cond), tau - 1)
                    z = corrector_step(z, eps_hat, tau - 1, sched, snr, randn())
            state = DiffusionState(z, tau - 1)
            if not state.finite:
                raise SamplingFailed(f'Sample became non-finite at diffusion step {tau}', tau)
            if tau % 100 == 0:
                logger.debug('Sampling step %d', tau)
    logger.debug('sample took %.3f seconds (%d steps, M = %d)', time.time() - began, first, M)
    return state.z_tau
