"""
Stage-1 registration: find the stationary velocity field that warps a baseline onto a follow-up.

The energy is ``lambda * ssd(warp(S, exp(v)), F) + smoothness(v)`` and is minimized by normalized gradient descent
with step halving, so the energy trace never increases.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
from dataclasses_json import dataclass_json, config

from morphoflow.diffeo import integrate_svf, warp, DEFAULT_SQUARING_STEPS
from morphoflow.mylogger import logger
from morphoflow.subject import SubjectRecord
from morphoflow.volume import ScalarVolume, VectorField, VelocitySequence, InvalidInputError, partials, resample, \
    as_shape


class RegistrationFailed(RuntimeError):
    """The optimizer could not decrease the energy any more before converging"""

    def __init__(self, message: str, energy_trace: List[float], frame: Optional[int] = None):
        super().__init__(message)
        self.energy_trace = energy_trace
        self.frame = frame


@dataclass_json
@dataclass
class RegistrationConfig:
    lambda_: float = field(default=100.0, metadata=config(field_name='lambda'))
    """Weight of the intensity term"""
    iterations: int = 200
    step_size: float = 0.5
    """Largest voxel move of the first iteration"""
    K: int = DEFAULT_SQUARING_STEPS
    field_shape: Optional[List[int]] = None
    """Resolution at which v is optimized, defaults to the image shape"""
    max_halvings: int = 40
    tolerance: float = 1e-7
    """Relative energy decrease below which the solve is converged"""
    growth: float = 1.2
    jobs: int = 1

    @property
    def eta(self) -> float:
        """The registration weight, same as lambda for the Stage-1 loss"""
        return self.lambda_

    def validate(self) -> 'RegistrationConfig':
        if not self.lambda_ > 0:
            raise InvalidInputError(f'lambda must be > 0, got {self.lambda_}')
        if self.iterations < 1:
            raise InvalidInputError(f'iterations must be >= 1, got {self.iterations}')
        if not self.step_size > 0:
            raise InvalidInputError(f'step_size must be > 0, got {self.step_size}')
        if self.K < 0:
            raise InvalidInputError(f'K must be >= 0, got {self.K}')
        if self.max_halvings < 1 or self.jobs < 1 or not self.growth >= 1:
            raise InvalidInputError('max_halvings and jobs must be >= 1 and growth >= 1')
        if self.field_shape is not None:
            self.field_shape = list(as_shape(self.field_shape))
        return self


@dataclass
class RegistrationResult:
    velocity: VectorField
    energy_trace: List[float]
    final_ssd: float
    final_reg: float
    initial_ssd: float
    lambda_: float
    K: int

    @property
    def final_energy(self) -> float:
        return self.energy_trace[-1]

    @property
    def ssd_reduction(self) -> float:
        """Fraction of the initial intensity mismatch removed, 1.0 when nothing was left to remove"""
        if self.initial_ssd <= 0:
            return 1.0
        return 1.0 - self.final_ssd / self.initial_ssd


def _check_pair(a: ScalarVolume, b: ScalarVolume):
    if a.shape != b.shape:
        raise InvalidInputError(f'Image shapes differ: {a.shape} vs {b.shape}')


def ssd(a: ScalarVolume, b: ScalarVolume) -> float:
    """Sum (not mean) of squared intensity differences"""
    _check_pair(a, b)
    return float(((a.data - b.data) ** 2).sum())


def _smoothness(v: torch.Tensor, boundary) -> torch.Tensor:
    return sum((d ** 2).sum() for d in partials(v, boundary))


def smoothness(v: VectorField) -> float:
    """Sum over voxels, components and axes of squared central differences"""
    return float(_smoothness(v.data, v.boundary))


def energy_terms(v: VectorField, S: ScalarVolume, F: ScalarVolume, cfg: RegistrationConfig) \
        -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(energy, ssd, smoothness) as differentiable tensors. v may be coarser than the images."""
    _check_pair(S, F)
    v_img = resample(v, S.shape)
    phi = integrate_svf(v_img, cfg.K)
    data = ((warp(S, phi).data - F.data) ** 2).sum()
    reg = _smoothness(v.data, v.boundary)
    return cfg.lambda_ * data + reg, data, reg


def energy(v: VectorField, S: ScalarVolume, F: ScalarVolume, cfg: RegistrationConfig) -> float:
    return float(energy_terms(v, S, F, cfg)[0])


def energy_and_gradient(v: VectorField, S: ScalarVolume, F: ScalarVolume, cfg: RegistrationConfig) \
        -> Tuple[float, VectorField]:
    """Energy and its gradient with respect to every velocity component"""
    leaf = v.data.detach().clone().requires_grad_(True)
    total, _, _ = energy_terms(VectorField(leaf, v.boundary), S, F, cfg)
    grad, = torch.autograd.grad(total, leaf)
    return float(total.detach()), VectorField(grad, v.boundary)


def register_pair(S: ScalarVolume, F: ScalarVolume, cfg: RegistrationConfig = None,
                  v0: Optional[VectorField] = None) -> RegistrationResult:
    """Registers the template S onto the fixed image F"""
    cfg = (cfg or RegistrationConfig()).validate()
    _check_pair(S, F)
    start = time.time()
    field_shape = tuple(cfg.field_shape) if cfg.field_shape else S.shape
    dtype = S.data.dtype if S.data.dtype == torch.float64 else torch.float32
    v = v0 if v0 is not None else VectorField.zeros(field_shape, S.boundary, dtype)
    if v.shape != field_shape:
        raise InvalidInputError(f'Initial velocity shape {v.shape} differs from field shape {field_shape}')

    with torch.no_grad():
        _, initial_ssd, _ = energy_terms(v, S, F, cfg)
    e, g = energy_and_gradient(v, S, F, cfg)
    trace = [e]
    step = cfg.step_size
    for it in range(cfg.iterations):
        g_max = float(g.data.abs().max())
        if g_max == 0.0:
            logger.debug('Stationary point reached at iteration %d', it)
            break
        direction = g.data / g_max
        halvings = 0
        while True:
            trial = VectorField(v.data - step * direction, v.boundary)
            with torch.no_grad():
                e_trial = float(energy_terms(trial, S, F, cfg)[0])
            if e_trial < e:
                break
            step /= 2
            halvings += 1
            if halvings > cfg.max_halvings:
                # Increases within rounding mean there is nothing left to gain
                if abs(e_trial - e) <= 1e-12 * max(1.0, abs(e)):
                    trial = None
                    break
                raise RegistrationFailed(f'Energy kept increasing over {cfg.max_halvings} step reductions '
                                         f'(iteration {it}, energy {e:.6g})', trace)
        if trial is None:
            logger.debug('Converged to rounding at iteration %d', it)
            break
        decrease = (e - e_trial) / max(abs(e), 1e-300)
        v = trial
        e, g = energy_and_gradient(v, S, F, cfg)
        trace.append(e)
        step *= cfg.growth
        logger.debug('Iteration %d: energy %.6g, step %.3g', it, e, step)
        if decrease < cfg.tolerance:
            break

    with torch.no_grad():
        _, final_ssd, final_reg = energy_terms(v, S, F, cfg)
    logger.debug('register_pair took %.3f seconds (%d iterations, energy %.6g -> %.6g)',
                 time.time() - start, len(trace) - 1, trace[0], trace[-1])
    return RegistrationResult(velocity=v, energy_trace=trace, final_ssd=float(final_ssd),
                              final_reg=float(final_reg), initial_ssd=float(initial_ssd), lambda_=cfg.lambda_,
                              K=cfg.K)


def register_frames(subject: SubjectRecord, cfg: RegistrationConfig = None, jobs: Optional[int] = None) \
        -> List[RegistrationResult]:
    """Registers the baseline independently to every follow-up, in age order"""
    cfg = (cfg or RegistrationConfig()).validate()
    if subject.frames < 1:
        raise InvalidInputError(f'Subject {subject.subject_id} has no follow-ups')
    jobs = jobs or cfg.jobs

    def solve(t: int) -> RegistrationResult:
        try:
            return register_pair(subject.baseline, subject.followups[t], cfg)
        except RegistrationFailed as e:
            raise RegistrationFailed(f'Frame {t + 1} of {subject.subject_id}: {e}', e.energy_trace, t + 1) from e
        except InvalidInputError as e:
            raise InvalidInputError(f'Frame {t + 1} of {subject.subject_id}: {e}') from e

    if jobs == 1:
        return [solve(t) for t in range(subject.frames)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(solve, t) for t in range(subject.frames)]
        return [f.result() for f in futures]


def register_sequence(subject: SubjectRecord, cfg: RegistrationConfig = None,
                      jobs: Optional[int] = None) -> VelocitySequence:
    results = register_frames(subject, cfg, jobs)
    return VelocitySequence([r.velocity for r in results], subject.followup_ages)


def amortized_register(pair: Tuple[ScalarVolume, ScalarVolume], net) -> VectorField:
    """Predicts the velocity of a (template, fixed) pair with a trained RegNet"""
    S, F = pair
    _check_pair(S, F)
    return net.predict(S, F)
