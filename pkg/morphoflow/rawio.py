"""
On-disk formats: raw float32 volumes/fields and the JSON manifests that describe them
"""
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional, Dict, Any, Sequence, TypeVar, Type

import numpy as np
import torch
from dataclasses_json import dataclass_json

from morphoflow.subject import SubjectRecord
from morphoflow.volume import ScalarVolume, VectorField, Boundary, InvalidInputError, as_shape

RAW_DTYPE = np.dtype('<f4')

M = TypeVar('M')


def write_raw(path: str, data: torch.Tensor):
    """Writes a tensor as little-endian float32 in row-major order"""
    arr = np.ascontiguousarray(data.detach().cpu().numpy(), dtype=RAW_DTYPE)
    try:
        with open(path, 'wb') as f:
            f.write(arr.tobytes())
    except OSError as e:
        raise OSError(f'Cannot write {path}: {e.strerror}') from e


def read_raw(path: str, shape: Sequence[int]) -> torch.Tensor:
    """Reads a little-endian float32 file into a float64 tensor of the given shape"""
    try:
        with open(path, 'rb') as f:
            buf = f.read()
    except OSError as e:
        raise OSError(f'Cannot read {path}: {e.strerror}') from e
    expected = int(np.prod(shape)) * RAW_DTYPE.itemsize
    if len(buf) != expected:
        raise InvalidInputError(f'{path} holds {len(buf)} bytes, expected {expected} for shape {tuple(shape)}')
    return torch.from_numpy(np.frombuffer(buf, dtype=RAW_DTYPE).astype(np.float64).reshape(tuple(shape)))


def save_volume(path: str, vol: ScalarVolume):
    write_raw(path, vol.data)


def load_volume(path: str, shape, boundary: Boundary = Boundary.CLAMP) -> ScalarVolume:
    return ScalarVolume(read_raw(path, as_shape(shape)), boundary)


def save_field(path: str, vf: VectorField):
    """Fields store their 3 component planes consecutively"""
    write_raw(path, vf.data)


def load_field(path: str, shape, boundary: Boundary = Boundary.CLAMP) -> VectorField:
    return VectorField(read_raw(path, (3, *as_shape(shape))), boundary)


def write_manifest(path: str, manifest):
    """Writes a dataclass_json object with sorted keys so reruns are byte-identical"""
    # noinspection PyUnresolvedReferences
    text = manifest.to_json(indent=2, sort_keys=True)
    try:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text + '\n')
    except OSError as e:
        raise OSError(f'Cannot write {path}: {e.strerror}') from e


def read_manifest(path: str, cls: Type[M]) -> M:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise OSError(f'Cannot read {path}: {e.strerror}') from e
    # noinspection PyUnresolvedReferences
    return cls.from_json(text)


@dataclass_json
@dataclass
class GroundTruthFiles:
    """Analytic ground truth shipped with a phantom subject"""
    velocities: List[str]
    """One velocity field per follow-up"""
    segmentation: Optional[str] = None
    """Label map of the baseline"""
    frame_segmentations: List[str] = field(default_factory=list)
    """Label maps of every follow-up, obtained with the true deformations"""


@dataclass_json
@dataclass
class SubjectManifest:
    """One longitudinal subject: the baseline is files[0] at ages[0]"""
    subject_id: str
    shape: List[int]
    ages: List[float]
    label: int
    files: List[str]
    synthetic_flags: List[bool]
    ground_truth: Optional[GroundTruthFiles] = None
    kind: str = 'subject'

    def followup_files(self) -> List[str]:
        return self.files[1:]


@dataclass_json
@dataclass
class SampleManifest:
    """A generated trajectory: every file is a synthesized follow-up at the matching age"""
    subject_id: str
    shape: List[int]
    ages: List[float]
    label: int
    files: List[str]
    deformation_files: List[str]
    synthetic_flags: List[bool]
    segmentation_files: List[str] = field(default_factory=list)
    baseline_age: Optional[float] = None
    corrector_m: int = 2
    seed: int = 0
    kind: str = 'sample'

    def followup_files(self) -> List[str]:
        return self.files


@dataclass_json
@dataclass
class IndexEntry:
    subject_id: str
    path: str
    label: int


@dataclass_json
@dataclass
class DatasetIndex:
    """Global index of a generated dataset"""
    spec: Dict[str, Any]
    subjects: List[IndexEntry]
    split: Dict[str, List[str]]


@dataclass_json
@dataclass
class VelocityManifest:
    """Sidecar of one cached velocity field"""
    file: str
    frame: int
    frame_age: float
    energy_trace_final: float
    initial_ssd: float
    final_ssd: float
    K: int
    field_shape: List[int]


@dataclass_json
@dataclass
class CacheEntry:
    subject_id: str
    path: str
    """Subject directory, relative to the cache directory"""
    label: int
    baseline_age: float
    ages: List[float]
    """Follow-up ages, one per frame"""
    frames: List[str]
    """Velocity sidecar JSON files, relative to the subject directory"""
    image_shape: List[int] = field(default_factory=list)
    baseline: str = 'baseline.raw'
    """Copy of the baseline image, for the anatomical prior"""
    status: str = 'ok'
    error: Optional[str] = None


@dataclass_json
@dataclass
class VelocityCacheIndex:
    """Links subjects to their cached velocity fields"""
    registration: Dict[str, Any]
    subjects: List[CacheEntry]
    boundary: str = 'clamp'


def load_manifest_dir(path: str):
    """Loads the manifest.json of a subject or sample directory, whichever kind it is"""
    manifest_path = os.path.join(path, 'manifest.json')
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except OSError as e:
        raise OSError(f'Cannot read {manifest_path}: {e.strerror}') from e
    if raw.get('kind') == 'sample':
        return SampleManifest.from_dict(raw)
    return SubjectManifest.from_dict(raw)


def load_subject(subject_dir: str, boundary: Boundary = Boundary.CLAMP) -> SubjectRecord:
    """Reads a subject directory written by the phantom generator (or laid out the same way)"""
    manifest = read_manifest(os.path.join(subject_dir, 'manifest.json'), SubjectManifest)
    volumes = [load_volume(os.path.join(subject_dir, f), manifest.shape, boundary) for f in manifest.files]
    segmentation = None
    if manifest.ground_truth is not None and manifest.ground_truth.segmentation:
        segmentation = load_volume(os.path.join(subject_dir, manifest.ground_truth.segmentation), manifest.shape,
                                   boundary)
    return SubjectRecord(subject_id=manifest.subject_id, baseline=volumes[0], followups=volumes[1:],
                         ages=manifest.ages, label=manifest.label, segmentation=segmentation,
                         synthetic_flags=manifest.synthetic_flags)


def load_dataset(data_dir: str, split: Optional[str] = None, boundary: Optional[Boundary] = None) \
        -> List[SubjectRecord]:
    """Loads the subjects of a dataset directory, optionally restricted to one split of its index.json.

    Without an index every sub-directory holding a manifest.json is a subject.
    """
    if not os.path.isdir(data_dir):
        raise InvalidInputError(f'{data_dir} is not a directory')
    index_path = os.path.join(data_dir, 'index.json')
    if os.path.exists(index_path):
        index = read_manifest(index_path, DatasetIndex)
        boundary = Boundary(boundary or index.spec.get('boundary', Boundary.CLAMP))
        wanted = set(index.split.get(split, [])) if split is not None else None
        paths = [e.path for e in index.subjects if wanted is None or e.subject_id in wanted]
    else:
        boundary = Boundary(boundary or Boundary.CLAMP)
        paths = sorted(d for d in os.listdir(data_dir) if os.path.exists(os.path.join(data_dir, d, 'manifest.json')))
    if not paths:
        raise InvalidInputError(f'No subjects found in {data_dir}' + (f' for split {split!r}' if split else ''))
    return [load_subject(os.path.join(data_dir, p), boundary) for p in paths]
