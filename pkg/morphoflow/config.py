"""
The strict JSON run configuration used by the command line, and environment-variable defaults
"""
import json
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional

from dataclasses_json import dataclass_json, config, Undefined
from dataclasses_json.undefined import UndefinedParameterError

from morphoflow.checkpoint import ScheduleParams
from morphoflow.ldt import LdtConfig
from morphoflow.registration import RegistrationConfig
from morphoflow.volume import InvalidInputError, Boundary, as_shape

SCHEMA_VERSION = 1


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise InvalidInputError(f'{name} must be an integer, got {raw!r}') from None


def env_seed(default: int = 0) -> int:
    return _env_int('MORPHOFLOW_SEED', default)


def env_jobs(default: int = 1) -> int:
    return max(1, _env_int('MORPHOFLOW_JOBS', default))


def env_device(default: str = 'cpu') -> str:
    return os.getenv('MORPHOFLOW_DEVICE', default)


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    image_shape: List[int] = field(default_factory=lambda: [32, 32, 32])
    field_shape: List[int] = field(default_factory=lambda: [16, 16, 16])
    """Resolution of the registered velocities and of the diffusion model"""
    patch_size: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    frames: int = 3
    diffusion_steps: int = 1000
    lr: float = 1e-4
    batch: int = 4
    lambda_: float = field(default=100.0, metadata=config(field_name='lambda'))
    K: int = 7
    boundary: str = 'clamp'
    corrector_M: int = 2
    snr: float = 0.16

    @classmethod
    def desk(cls) -> 'RunConfig':
        return cls()

    @classmethod
    def full_scale(cls) -> 'RunConfig':
        """Full-scale values: 128^3 images, 32^3 velocities, four follow-ups, batch 48, the S model"""
        d, heads, layers = LdtConfig.PRESETS['S']
        return cls(image_shape=[128, 128, 128], field_shape=[32, 32, 32], frames=4, batch=48, d_model=d,
                   n_heads=heads, n_layers=layers)

    def validate(self) -> 'RunConfig':
        if self.schema_version != SCHEMA_VERSION:
            raise InvalidInputError(f'Config schema version {self.schema_version} is not supported '
                                    f'(expected {SCHEMA_VERSION})')
        self.image_shape = list(as_shape(self.image_shape))
        self.field_shape = list(as_shape(self.field_shape))
        try:
            Boundary(self.boundary)
        except ValueError:
            raise InvalidInputError(f'Unknown boundary {self.boundary!r}') from None
        if self.diffusion_steps < 2 or self.batch < 1 or self.frames < 1 or self.corrector_M < 0:
            raise InvalidInputError('diffusion_steps must be >= 2, batch and frames >= 1 and corrector_M >= 0')
        if not self.lr > 0 or not self.snr >= 0:
            raise InvalidInputError('lr must be > 0 and snr >= 0')
        self.registration_config()
        self.ldt_config()
        return self

    def with_preset(self, name: str) -> 'RunConfig':
        """Copy with d_model, n_heads and n_layers taken from a model-size preset"""
        preset = LdtConfig.preset(name)
        return replace(self, d_model=preset.d_model, n_heads=preset.n_heads, n_layers=preset.n_layers)

    def ldt_config(self, age_conditioning: str = 'appe') -> LdtConfig:
        return LdtConfig(d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
                         patch_size=self.patch_size, max_frames=self.frames, field_shape=list(self.field_shape),
                         age_conditioning=age_conditioning).validate()

    def registration_config(self, iterations: int = 200, jobs: int = 1) -> RegistrationConfig:
        field_shape = None if list(self.field_shape) == list(self.image_shape) else list(self.field_shape)
        return RegistrationConfig(lambda_=self.lambda_, iterations=iterations, K=self.K, field_shape=field_shape,
                                  jobs=jobs).validate()

    def schedule_params(self) -> ScheduleParams:
        return ScheduleParams(steps=self.diffusion_steps)


def load_run_config(path: Optional[str]) -> RunConfig:
    """Reads and validates a run config; no path means the desk defaults"""
    if path is None:
        return RunConfig.desk().validate()
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except OSError as e:
        raise InvalidInputError(f'Cannot read config {path}: {e.strerror}') from e
    except json.JSONDecodeError as e:
        raise InvalidInputError(f'Config {path} is not valid JSON: {e}') from e
    if not isinstance(raw, dict):
        raise InvalidInputError(f'Config {path} must hold a JSON object')
    try:
        # noinspection PyUnresolvedReferences
        cfg = RunConfig.from_dict(raw)
    except UndefinedParameterError as e:
        raise InvalidInputError(f'Config {path} has unknown keys: {e}') from e
    return cfg.validate()


def save_run_config(path: str, cfg: RunConfig):
    with open(path, 'w', encoding='utf-8') as f:
        # noinspection PyUnresolvedReferences
        f.write(cfg.to_json(indent=2, sort_keys=True) + '\n')
