"""
Checkpoint container: ``MFCK`` magic, little-endian uint32 version and header length, a JSON header, then the
serialized state dict of the transformer.
"""
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, List, Union

import torch
from dataclasses_json import dataclass_json

from morphoflow.ddpm import NoiseSchedule, cosine_schedule, DEFAULT_STEPS, DEFAULT_S_OFFSET
from morphoflow.diffeo import DEFAULT_SQUARING_STEPS
from morphoflow.ldt import LdtConfig, LDT
from morphoflow.mylogger import logger

MAGIC = b'MFCK'
VERSION = 1
_PREFIX = struct.Struct('<4sII')


class CheckpointError(ValueError):
    """The file is not a checkpoint this version can read, or does not match what it is used with"""


@dataclass_json
@dataclass
class ScheduleParams:
    steps: int = DEFAULT_STEPS
    s_offset: float = DEFAULT_S_OFFSET

    def build(self) -> NoiseSchedule:
        return cosine_schedule(self.steps, self.s_offset)


@dataclass_json
@dataclass
class CheckpointHeader:
    config: LdtConfig
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    step: int = 0
    """Training steps executed"""
    seed: int = 0
    data_scale: float = 1.0
    """Velocities are multiplied by this before diffusion and divided by it after sampling"""
    image_shape: Optional[List[int]] = None
    """Resolution of the images the velocities were registered on"""
    boundary: str = 'clamp'
    squaring_steps: int = DEFAULT_SQUARING_STEPS
    """K used when the cached velocities were registered"""


@dataclass
class LoadedCheckpoint:
    header: CheckpointHeader
    model: LDT
    schedule: NoiseSchedule


def save_checkpoint(path: str, model: LDT, header: CheckpointHeader):
    state = io.BytesIO()
    torch.save({k: v.detach().cpu() for k, v in model.state_dict().items()}, state)
    # noinspection PyUnresolvedReferences
    head = header.to_json(sort_keys=True).encode('utf-8')
    try:
        with open(path, 'wb') as f:
            f.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
            f.write(head)
            f.write(state.getvalue())
    except OSError as e:
        raise OSError(f'Cannot write {path}: {e.strerror}') from e
    logger.debug('Saved checkpoint %s at step %d', path, header.step)


def read_header(path: str) -> CheckpointHeader:
    return _read(path)[0]


def _read(path: str):
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise OSError(f'Cannot read {path}: {e.strerror}') from e
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f'{path} is too short to be a checkpoint')
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f'{path} is not a checkpoint (magic {magic!r})')
    if version != VERSION:
        raise CheckpointError(f'{path} has checkpoint version {version}, this build reads version {VERSION}')
    head_end = _PREFIX.size + head_len
    try:
        # noinspection PyUnresolvedReferences
        header = CheckpointHeader.from_dict(json.loads(blob[_PREFIX.size:head_end].decode('utf-8')))
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f'{path} has a corrupt header: {e}') from e
    return header, blob[head_end:]


def load_checkpoint(path: str, device: Union[str, torch.device] = 'cpu') -> LoadedCheckpoint:
    header, state_bytes = _read(path)
    try:
        model = LDT(header.config)
        state = torch.load(io.BytesIO(state_bytes), map_location='cpu', weights_only=True)
        model.load_state_dict(state)
    except (RuntimeError, ValueError) as e:
        raise CheckpointError(f'{path} does not match its configuration: {e}') from e
    model.to(device).eval()
    return LoadedCheckpoint(header, model, header.schedule.build())
