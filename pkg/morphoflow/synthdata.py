"""
Deterministic longitudinal phantoms: an ellipsoidal "brain" with a textured cortex shell and a central ventricle.

Follow-ups are the baseline warped by an analytic stationary velocity field whose magnitude grows with the class
atrophy rate times the age gap: the ventricle expands and the cortex shell thins.
"""
import hashlib
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from dataclasses_json import dataclass_json
from scipy.ndimage import gaussian_filter

from morphoflow.diffeo import integrate_svf, warp, DeformationField
from morphoflow.mylogger import logger
from morphoflow.rawio import save_volume, save_field, write_manifest, SubjectManifest, GroundTruthFiles, \
    IndexEntry, DatasetIndex
from morphoflow.subject import SubjectRecord, DiseaseLabel
from morphoflow.volume import ScalarVolume, VectorField, Boundary, InvalidInputError, as_shape, identity_grid

BACKGROUND, TISSUE, CORTEX, VENTRICLE = 0, 1, 2, 3

VENTRICLE_GAIN = 2.0
"""Ventricle velocity gain per unit of rate * years"""
SHELL_GAIN = 4.0
"""Inward cortex velocity (voxels) per unit of rate * years"""
SHELL_INNER = 0.8
"""Normalized radius where the cortex shell starts"""


@dataclass_json
@dataclass
class PhantomSpec:
    shape: List[int] = field(default_factory=lambda: [32, 32, 32])
    n_subjects: int = 8
    frames: int = 3
    """Follow-ups per subject"""
    age_range: List[float] = field(default_factory=lambda: [55.0, 92.0])
    class_mix: List[float] = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    """Proportions of CN, MCI and AD"""
    atrophy_rate: Dict[str, float] = field(default_factory=lambda: {'CN': 0.005, 'MCI': 0.015, 'AD': 0.03})
    """Fraction per year; configuration defaults without clinical meaning"""
    noise_sigma: float = 0.01
    seed: int = 0
    gap_range: List[float] = field(default_factory=lambda: [0.5, 3.0])
    """Years between consecutive visits"""
    train_fraction: float = 0.85
    boundary: str = 'clamp'

    def validate(self) -> 'PhantomSpec':
        self.shape = list(as_shape(self.shape))
        if min(self.shape) < 8:
            raise InvalidInputError(f'Phantoms need at least 8 voxels per axis, got {self.shape}')
        if self.n_subjects < 1 or self.frames < 1:
            raise InvalidInputError(f'Need n_subjects >= 1 and frames >= 1, got {self.n_subjects} and {self.frames}')
        if len(self.class_mix) != len(DiseaseLabel) or min(self.class_mix) < 0 or \
                abs(sum(self.class_mix) - 1.0) > 1e-6:
            raise InvalidInputError(f'class_mix must be 3 proportions summing to 1, got {self.class_mix}')
        for label in DiseaseLabel:
            if self.atrophy_rate.get(label.name, -1) < 0:
                raise InvalidInputError(f'atrophy_rate needs a non-negative rate for {label.name}')
        lo, hi = self.age_range
        gap_lo, gap_hi = self.gap_range
        if not 0 < gap_lo <= gap_hi or hi - lo < self.frames * gap_hi:
            raise InvalidInputError(f'Age range {self.age_range} cannot hold {self.frames} gaps of up to {gap_hi} y')
        if self.noise_sigma < 0 or not 0 < self.train_fraction <= 1:
            raise InvalidInputError('noise_sigma must be >= 0 and train_fraction in (0, 1]')
        Boundary(self.boundary)
        return self

    def rate(self, label: DiseaseLabel) -> float:
        return self.atrophy_rate[DiseaseLabel(label).name]


def derive_seed(seed: int, subject_id: str) -> int:
    """Stable per-subject seed, independent of generation order"""
    hasher = hashlib.md5(usedforsecurity=False)
    hasher.update(str(seed).encode())
    hasher.update(subject_id.encode())
    return int.from_bytes(hasher.digest()[:8], 'little')


@dataclass(frozen=True)
class PhantomGeometry:
    """Per-subject anatomy, in voxel coordinates"""
    center: Sequence[float]
    radii: Sequence[float]
    ventricle_radius: float
    texture_phase: Sequence[float]


@dataclass
class PhantomSubject:
    record: SubjectRecord
    geometry: PhantomGeometry
    velocities: List[VectorField]
    deformations: List[DeformationField]
    clean_frames: List[ScalarVolume]
    """Baseline and follow-ups before noise"""
    frame_segmentations: List[ScalarVolume]
    """Label maps of every follow-up"""


def random_geometry(shape, rng: np.random.Generator) -> PhantomGeometry:
    shape = np.array(as_shape(shape), dtype=float)
    center = (shape - 1) / 2 + rng.uniform(-0.5, 0.5, 3)
    radii = shape * np.array([0.38, 0.34, 0.36]) * rng.uniform(0.95, 1.05, 3)
    return PhantomGeometry(center=center.tolist(), radii=radii.tolist(),
                           ventricle_radius=float(0.3 * radii.min() * rng.uniform(0.9, 1.1)),
                           texture_phase=rng.uniform(0, 2 * math.pi, 3).tolist())


def _offsets(shape, geometry: PhantomGeometry) -> torch.Tensor:
    grid = identity_grid(shape)
    return grid - torch.tensor(geometry.center, dtype=torch.float64).view(3, 1, 1, 1)


def phantom_image(shape, geometry: PhantomGeometry) -> ScalarVolume:
    """Smooth-edged intensities: background 0, tissue 0.7, textured cortex around 1.0, ventricle 0.2"""
    x = _offsets(shape, geometry)
    radii = torch.tensor(geometry.radii, dtype=torch.float64).view(3, 1, 1, 1)
    rho = torch.linalg.vector_norm(x / radii, dim=0)
    mean_radius = float(np.mean(geometry.radii))
    brain = torch.sigmoid((1 - rho) * mean_radius)
    shell = torch.sigmoid((rho - SHELL_INNER) * mean_radius)
    freq = 2 * math.pi / 6.0
    texture = sum(torch.sin(freq * (x[i] + 3 * (i + 1)) + p) for i, p in enumerate(geometry.texture_phase)) / 3
    ventricle = torch.sigmoid(geometry.ventricle_radius - torch.linalg.vector_norm(x, dim=0))
    tissue = brain * (0.7 + 0.3 * shell * (1 + 0.15 * texture))
    return ScalarVolume(tissue * (1 - ventricle) + 0.2 * ventricle)


def phantom_labels(shape, geometry: PhantomGeometry) -> ScalarVolume:
    x = _offsets(shape, geometry)
    radii = torch.tensor(geometry.radii, dtype=torch.float64).view(3, 1, 1, 1)
    rho = torch.linalg.vector_norm(x / radii, dim=0)
    labels = torch.full(rho.shape, float(BACKGROUND), dtype=torch.float64)
    labels[rho <= 1] = TISSUE
    labels[(rho >= SHELL_INNER) & (rho <= 1)] = CORTEX
    labels[torch.linalg.vector_norm(x, dim=0) <= geometry.ventricle_radius] = VENTRICLE
    return ScalarVolume(labels)


def atrophy_velocity(shape, geometry: PhantomGeometry, rate: float, years: float,
                     boundary: Boundary = Boundary.CLAMP) -> VectorField:
    """Compactly supported radial velocity: inward sampling around the ventricle and at the inner cortex boundary.

    Warping with exp(v) samples the baseline closer to the center, so the ventricle grows and tissue pushes into the
    cortex shell. Zero rate or zero years gives the zero field.
    """
    x = _offsets(shape, geometry)
    r = torch.linalg.vector_norm(x, dim=0)
    strength = rate * years
    support = 2 * geometry.ventricle_radius
    s = (r / support).clamp(max=1.0)
    ventricle = -VENTRICLE_GAIN * strength * x * ((1 - s ** 2) ** 2)

    radii = torch.tensor(geometry.radii, dtype=torch.float64).view(3, 1, 1, 1)
    rho = torch.linalg.vector_norm(x / radii, dim=0)
    width = 0.15
    q = ((rho - SHELL_INNER) / width).clamp(-1.0, 1.0)
    bump = (1 - q ** 2) ** 2
    direction = x / r.clamp(min=1e-9)
    shell = -SHELL_GAIN * strength * direction * bump
    return VectorField(ventricle + shell, boundary)


def random_velocity(shape, max_norm: float, sigma: float = 3.0, seed: int = 0,
                    boundary: Boundary = Boundary.WRAP) -> VectorField:
    """Gaussian-smoothed white noise scaled to a given maximum vector length"""
    rng = np.random.default_rng(seed)
    mode = 'wrap' if Boundary(boundary) is Boundary.WRAP else 'nearest'
    noise = rng.standard_normal((3, *as_shape(shape)))
    smooth = np.stack([gaussian_filter(c, sigma, mode=mode) for c in noise])
    smooth *= max_norm / np.linalg.norm(smooth, axis=0).max()
    return VectorField(torch.from_numpy(smooth), boundary)


def generate_subject(spec: PhantomSpec, subject_seed: int, subject_id: Optional[str] = None,
                     label: Optional[DiseaseLabel] = None) -> PhantomSubject:
    """One phantom subject with its analytic ground truth; fully determined by (spec, subject_seed, label)"""
    spec.validate()
    rng = np.random.default_rng(subject_seed)
    shape = tuple(spec.shape)
    boundary = Boundary(spec.boundary)
    drawn = DiseaseLabel(int(rng.choice(len(DiseaseLabel), p=np.array(spec.class_mix) / sum(spec.class_mix))))
    label = DiseaseLabel.parse(label) if label is not None else drawn
    geometry = random_geometry(shape, rng)
    gaps = rng.uniform(spec.gap_range[0], spec.gap_range[1], spec.frames)
    lo, hi = spec.age_range
    baseline_age = float(rng.uniform(lo, hi - gaps.sum()))
    ages = [round(a, 4) for a in (baseline_age + np.concatenate([[0.0], np.cumsum(gaps)])).tolist()]

    clean = ScalarVolume(phantom_image(shape, geometry).data, boundary)
    labels = ScalarVolume(phantom_labels(shape, geometry).data, boundary)
    velocities, deformations, clean_frames, segs = [], [], [clean], []
    for age in ages[1:]:
        v = atrophy_velocity(shape, geometry, spec.rate(label), age - ages[0], boundary)
        phi = integrate_svf(v)
        velocities.append(v)
        deformations.append(phi)
        clean_frames.append(warp(clean, phi))
        segs.append(warp(labels, phi, mode='nearest'))

    def noisy(vol: ScalarVolume) -> ScalarVolume:
        if spec.noise_sigma == 0:
            return vol
        return vol.with_data(vol.data + torch.from_numpy(rng.normal(0, spec.noise_sigma, shape)))

    frames = [noisy(v) for v in clean_frames]
    record = SubjectRecord(subject_id=subject_id or f'subject-{subject_seed}', baseline=frames[0],
                           followups=frames[1:], ages=ages, label=label, segmentation=labels)
    return PhantomSubject(record, geometry, velocities, deformations, clean_frames, segs)


def write_subject(subject: PhantomSubject, out_dir: str) -> SubjectManifest:
    """Writes volumes, ground truth and manifest.json into ``out_dir``"""
    os.makedirs(out_dir, exist_ok=True)
    record = subject.record
    files = [f'vol_{i}.raw' for i in range(len(record.ages))]
    for name, vol in zip(files, [record.baseline, *record.followups]):
        save_volume(os.path.join(out_dir, name), vol)
    truth = GroundTruthFiles(velocities=[f'vel_{t}.raw' for t in range(1, len(record.ages))],
                             segmentation='seg_0.raw',
                             frame_segmentations=[f'seg_{t}.raw' for t in range(1, len(record.ages))])
    for name, v in zip(truth.velocities, subject.velocities):
        save_field(os.path.join(out_dir, name), v)
    save_volume(os.path.join(out_dir, truth.segmentation), record.segmentation)
    for name, seg in zip(truth.frame_segmentations, subject.frame_segmentations):
        save_volume(os.path.join(out_dir, name), seg)
    manifest = SubjectManifest(subject_id=record.subject_id, shape=list(record.baseline.shape), ages=record.ages,
                               label=int(record.label), files=files, synthetic_flags=list(record.synthetic_flags),
                               ground_truth=truth)
    write_manifest(os.path.join(out_dir, 'manifest.json'), manifest)
    return manifest


def split_subjects(subject_ids: List[str], train_fraction: float, seed: int) -> Dict[str, List[str]]:
    """Seeded shuffle, then the first round(fraction * n) subjects train"""
    order = np.random.default_rng(seed).permutation(len(subject_ids))
    n_train = min(len(subject_ids), max(1, int(round(train_fraction * len(subject_ids)))))
    shuffled = [subject_ids[i] for i in order]
    return {'train': sorted(shuffled[:n_train]), 'test': sorted(shuffled[n_train:])}


def generate_dataset(spec: PhantomSpec, out_dir: str, jobs: int = 1) -> DatasetIndex:
    """Writes one directory per subject plus index.json; reruns with the same spec are byte-identical"""
    spec.validate()
    start = time.time()
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise OSError(f'Cannot create {out_dir}: {e.strerror}') from e
    subject_ids = [f'sub-{i:03d}' for i in range(spec.n_subjects)]

    def build(subject_id: str) -> IndexEntry:
        subject = generate_subject(spec, derive_seed(spec.seed, subject_id), subject_id)
        write_subject(subject, os.path.join(out_dir, subject_id))
        return IndexEntry(subject_id=subject_id, path=subject_id, label=int(subject.record.label))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(build, subject_ids))
    else:
        entries = [build(s) for s in subject_ids]
    # noinspection PyUnresolvedReferences
    index = DatasetIndex(spec=spec.to_dict(), subjects=entries,
                         split=split_subjects(subject_ids, spec.train_fraction, spec.seed))
    write_manifest(os.path.join(out_dir, 'index.json'), index)
    logger.info('generate_dataset took %.3f seconds (%d subjects in %s)', time.time() - start, len(entries), out_dir)
    return index
