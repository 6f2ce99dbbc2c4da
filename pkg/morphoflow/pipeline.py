"""
Orchestration: registration of a whole dataset into a velocity cache, diffusion training on that cache, trajectory
synthesis from a single baseline, label propagation, sequence completion and directory-level evaluation.
"""
import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from dataclasses_json import dataclass_json

from morphoflow.checkpoint import CheckpointHeader, ScheduleParams, LoadedCheckpoint, load_checkpoint, \
    save_checkpoint, CheckpointError
from morphoflow.ddpm import diffusion_loss, sample, DEFAULT_SNR
from morphoflow.diffeo import DeformationField, DetJacStats, integrate_svf, warp, jacobian_determinant, \
    detjac_stats, write_detjac_report
from morphoflow.ldt import LDT, LdtConfig, LdtConditioning
from morphoflow.metrics import psnr, ssim3d, dice
from morphoflow.mylogger import logger
from morphoflow.rawio import CacheEntry, VelocityCacheIndex, VelocityManifest, SampleManifest, \
    save_volume, save_field, load_volume, load_field, write_manifest, read_manifest, load_manifest_dir
from morphoflow.registration import RegistrationConfig, RegistrationFailed, register_frames
from morphoflow.report import EvalRow, save_slice_png
from morphoflow.subject import SubjectRecord, DiseaseLabel
from morphoflow.volume import ScalarVolume, VectorField, VelocitySequence, Boundary, InvalidInputError, resample, \
    spatial_gradient

__all__ = ['DiseaseLabel', 'SubjectRecord', 'TrainingFailed', 'train_stage1', 'train_stage2', 'synthesize',
           'propagate_labels', 'complete_sequence', 'AgeStats', 'anatomical_prior', 'evaluate_directories']


class TrainingFailed(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


# Stage 1: registration into a velocity cache


@dataclass
class RegisterSummaryRow:
    subject: str
    frame: int
    initial_ssd: Optional[float]
    final_ssd: Optional[float]
    ssd_reduction: Optional[float]
    final_energy: Optional[float]
    status: str = 'ok'


@dataclass
class Stage1Result:
    index: VelocityCacheIndex
    rows: List[RegisterSummaryRow]

    @property
    def failed(self) -> List[str]:
        return [e.subject_id for e in self.index.subjects if e.status != 'ok']


def _register_subject(subject: SubjectRecord, cfg: RegistrationConfig, cache_dir: str) \
        -> Tuple[CacheEntry, List[RegisterSummaryRow]]:
    start = time.time()
    entry = CacheEntry(subject_id=subject.subject_id, path=subject.subject_id, label=int(subject.label),
                       baseline_age=subject.baseline_age, ages=subject.followup_ages, frames=[],
                       image_shape=list(subject.baseline.shape))
    try:
        results = register_frames(subject, cfg, jobs=1)
    except (RegistrationFailed, InvalidInputError) as e:
        logger.warning('Registration of %s failed: %s', subject.subject_id, e)
        entry.status, entry.error = 'failed', str(e)
        return entry, [RegisterSummaryRow(subject.subject_id, getattr(e, 'frame', None) or 0, None, None, None, None,
                                          'failed')]
    sub_dir = os.path.join(cache_dir, entry.path)
    os.makedirs(sub_dir, exist_ok=True)
    save_volume(os.path.join(sub_dir, entry.baseline), subject.baseline)
    rows = []
    for t, (result, age) in enumerate(zip(results, subject.followup_ages), start=1):
        save_field(os.path.join(sub_dir, f'vel_{t}.raw'), result.velocity)
        sidecar = VelocityManifest(file=f'vel_{t}.raw', frame=t, frame_age=age,
                                   energy_trace_final=result.final_energy, initial_ssd=result.initial_ssd,
                                   final_ssd=result.final_ssd, K=result.K, field_shape=list(result.velocity.shape))
        write_manifest(os.path.join(sub_dir, f'vel_{t}.json'), sidecar)
        entry.frames.append(f'vel_{t}.json')
        rows.append(RegisterSummaryRow(subject.subject_id, t, result.initial_ssd, result.final_ssd,
                                       result.ssd_reduction, result.final_energy))
    logger.info('Stage-1 subject %s took %.3f seconds (mean ssd reduction %.1f%%)', subject.subject_id,
                time.time() - start, 100 * float(np.mean([r.ssd_reduction for r in rows])))
    return entry, rows


def train_stage1(dataset: Sequence[SubjectRecord], reg_cfg: RegistrationConfig, cache_dir: str,
                 jobs: int = 1) -> Stage1Result:
    """Registers every subject's baseline to its follow-ups and caches the velocities.

    A subject whose registration fails is recorded as failed and skipped; the others are still cached.
    """
    reg_cfg.validate()
    if not dataset:
        raise InvalidInputError('Stage 1 needs at least one subject')
    for subject in dataset:
        if subject.frames < 1:
            raise InvalidInputError(f'Subject {subject.subject_id} has no follow-ups')
    try:
        os.makedirs(cache_dir, exist_ok=True)
    except OSError as e:
        raise OSError(f'Cannot create {cache_dir}: {e.strerror}') from e
    start = time.time()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(lambda s: _register_subject(s, reg_cfg, cache_dir), dataset))
    else:
        outcomes = [_register_subject(s, reg_cfg, cache_dir) for s in dataset]
    # noinspection PyUnresolvedReferences
    index = VelocityCacheIndex(registration=reg_cfg.to_dict(), subjects=[e for e, _ in outcomes],
                               boundary=dataset[0].baseline.boundary.value)
    write_manifest(os.path.join(cache_dir, 'index.json'), index)
    result = Stage1Result(index, [r for _, rows in outcomes for r in rows])
    if result.failed:
        logger.warning('Stage 1 failed for %d of %d subjects: %s', len(result.failed), len(dataset),
                       ', '.join(result.failed))
    logger.info('train_stage1 took %.3f seconds (%d subjects)', time.time() - start, len(dataset))
    return result


def write_register_summary(path: str, rows: Sequence[RegisterSummaryRow]):
    def cell(v):
        return '' if v is None else repr(v) if isinstance(v, float) else str(v)

    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['subject', 'frame', 'initial_ssd', 'final_ssd', 'ssd_reduction', 'final_energy', 'status'])
        for r in rows:
            writer.writerow([cell(r.subject), cell(r.frame), cell(r.initial_ssd), cell(r.final_ssd),
                             cell(r.ssd_reduction), cell(r.final_energy), r.status])


@dataclass
class CachedSubject:
    entry: CacheEntry
    velocities: VelocitySequence
    baseline: ScalarVolume


def load_velocity_cache(cache_dir: str) -> Tuple[VelocityCacheIndex, List[CachedSubject]]:
    """Reads the index and every successfully registered subject of a velocity cache"""
    index_path = os.path.join(cache_dir, 'index.json')
    if not os.path.exists(index_path):
        raise InvalidInputError(f'{cache_dir} is not a velocity cache (no index.json)')
    index = read_manifest(index_path, VelocityCacheIndex)
    boundary = Boundary(index.boundary)
    subjects = []
    for entry in index.subjects:
        if entry.status != 'ok':
            continue
        sub_dir = os.path.join(cache_dir, entry.path)
        frames = []
        for name in entry.frames:
            sidecar = read_manifest(os.path.join(sub_dir, name), VelocityManifest)
            frames.append(load_field(os.path.join(sub_dir, sidecar.file), sidecar.field_shape, boundary))
        baseline = load_volume(os.path.join(sub_dir, entry.baseline), entry.image_shape, boundary)
        subjects.append(CachedSubject(entry, VelocitySequence(frames, entry.ages), baseline))
    return index, subjects


# Stage 2: diffusion training


def anatomical_prior(baseline: ScalarVolume, field_shape) -> VectorField:
    """Spatial gradient of the baseline at the diffusion resolution"""
    return spatial_gradient(resample(baseline, field_shape))


@dataclass_json
@dataclass
class TrainRun:
    config: Dict
    loss_history: List[float]
    checkpoint_path: Optional[str]
    seed: int
    data_scale: float = 1.0


@dataclass
class TrainingData:
    """Stacked Stage-2 tensors: z0 (N, 3, T, h, w, l) already scaled, ages (N, T), labels (N,), priors"""
    z0: torch.Tensor
    ages: torch.Tensor
    labels: torch.Tensor
    priors: torch.Tensor
    data_scale: float
    image_shape: List[int]
    boundary: str


def stack_training_data(subjects: Sequence[CachedSubject], cfg: LdtConfig) -> TrainingData:
    if not subjects:
        raise InvalidInputError('No registered subjects to train on')
    lengths = {len(s.velocities) for s in subjects}
    if len(lengths) != 1:
        raise InvalidInputError(f'All subjects need the same number of follow-ups, got {sorted(lengths)}')
    frames = lengths.pop()
    if frames > cfg.max_frames:
        raise InvalidInputError(f'{frames} follow-ups exceed max_frames {cfg.max_frames}')
    fs = tuple(cfg.field_shape)
    z0 = torch.stack([torch.stack([resample(v, fs).data for v in s.velocities.frames], dim=1) for s in subjects])
    std = float(z0.std())
    data_scale = 1.0 / std if std > 0 else 1.0
    return TrainingData(z0=(z0 * data_scale).float(),
                        ages=torch.tensor([s.velocities.ages for s in subjects], dtype=torch.float32),
                        labels=torch.tensor([s.entry.label for s in subjects], dtype=torch.long),
                        priors=torch.stack([anatomical_prior(s.baseline, fs).data for s in subjects]).float(),
                        data_scale=data_scale, image_shape=list(subjects[0].baseline.shape),
                        boundary=subjects[0].baseline.boundary.value)


def smooth_losses(losses: Sequence[float], window: int = 100) -> List[float]:
    """Trailing moving average"""
    out, total = [], 0.0
    for i, value in enumerate(losses):
        total += value
        if i >= window:
            total -= losses[i - window]
        out.append(total / min(i + 1, window))
    return out


def write_losses(path: str, losses: Sequence[float]):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['step', 'loss'])
        for step, loss in enumerate(losses, start=1):
            writer.writerow([step, repr(loss)])


def train_stage2(cache: Union[str, Sequence[CachedSubject]], ldt_cfg: LdtConfig, sched: ScheduleParams = None,
                 steps: int = 1000, lr: float = 1e-4, batch: int = 4, seed: int = 0,
                 checkpoint_path: Optional[str] = None, losses_path: Optional[str] = None,
                 device: Union[str, torch.device] = 'cpu', squaring_steps: Optional[int] = None) -> TrainRun:
    """Trains the transformer to predict the noise of cached velocity stacks with the L1 loss and Adam"""
    ldt_cfg.validate()
    sched = sched or ScheduleParams()
    if steps < 1 or batch < 1:
        raise InvalidInputError(f'steps and batch must be >= 1, got {steps} and {batch}')
    if isinstance(cache, str):
        index, subjects = load_velocity_cache(cache)
        squaring_steps = squaring_steps if squaring_steps is not None else index.registration.get('K', 7)
    else:
        subjects = list(cache)
    data = stack_training_data(subjects, ldt_cfg)
    schedule = sched.build()
    start = time.time()

    torch.manual_seed(seed)
    model = LDT(ldt_cfg).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)
    losses = []
    model.train()
    for step in range(1, steps + 1):
        idx = torch.randint(data.z0.shape[0], (batch,), generator=generator)
        cond = LdtConditioning(data.ages[idx], data.labels[idx], data.priors[idx]).to(device)
        loss = diffusion_loss(model, data.z0[idx].to(device), cond, schedule, generator)
        if not bool(torch.isfinite(loss)):
            logger.error('Training aborted at step %d: loss is %s', step, float(loss))
            raise TrainingFailed(f'Non-finite loss at step {step}', step)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
        if step % 100 == 0 or step == steps:
            logger.debug('Step %d: loss %.5f (smoothed %.5f)', step, losses[-1], smooth_losses(losses)[-1])
    model.eval()
    logger.info('train_stage2 took %.3f seconds (%d steps, final smoothed loss %.5f)', time.time() - start, steps,
                smooth_losses(losses)[-1])

    if checkpoint_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(checkpoint_path)), exist_ok=True)
        header = CheckpointHeader(config=ldt_cfg, schedule=sched, step=steps, seed=seed, data_scale=data.data_scale,
                                  image_shape=data.image_shape, boundary=data.boundary,
                                  squaring_steps=squaring_steps if squaring_steps is not None else 7)
        save_checkpoint(checkpoint_path, model, header)
    if losses_path is not None:
        write_losses(losses_path, losses)
    # noinspection PyUnresolvedReferences
    return TrainRun(config=ldt_cfg.to_dict(), loss_history=losses, checkpoint_path=checkpoint_path, seed=seed,
                    data_scale=data.data_scale)


# Synthesis


@dataclass
class SynthesisResult:
    ages: List[float]
    volumes: List[ScalarVolume]
    deformations: List[DeformationField]
    velocities: List[VectorField]
    """Sampled velocities at image resolution"""
    detjac: List[DetJacStats]


def _check_ages(ages: Sequence[float], baseline_age: Optional[float]) -> List[float]:
    ages = [float(a) for a in ages]
    if not ages:
        raise InvalidInputError('Need at least one follow-up age')
    if any(b <= a for a, b in zip(ages, ages[1:])):
        raise InvalidInputError(f'Follow-up ages must be strictly increasing, got {ages}')
    if baseline_age is not None and ages[0] <= baseline_age:
        raise InvalidInputError(f'Follow-up ages must come after the baseline age {baseline_age}, got {ages}')
    return ages


def synthesize(baseline: ScalarVolume, ages: Sequence[float], label, checkpoint: Union[str, LoadedCheckpoint],
               M: int = 2, seed: int = 0, baseline_age: Optional[float] = None, snr: float = DEFAULT_SNR,
               device: Union[str, torch.device] = 'cpu') -> SynthesisResult:
    """Samples a velocity sequence for the given follow-up ages and deforms the baseline with it"""
    ages = _check_ages(ages, baseline_age)
    label = DiseaseLabel.parse(label)
    ckpt = load_checkpoint(checkpoint, device) if isinstance(checkpoint, str) else checkpoint
    header, cfg = ckpt.header, ckpt.header.config
    if header.image_shape and list(baseline.shape) != list(header.image_shape):
        raise CheckpointError(f'Checkpoint was trained on {header.image_shape} images, baseline is {baseline.shape}')
    if len(ages) > cfg.max_frames:
        raise CheckpointError(f'{len(ages)} ages exceed the model\'s max_frames {cfg.max_frames}')
    if int(label) >= cfg.num_classes:
        raise CheckpointError(f'Label {label.name} is outside the model\'s {cfg.num_classes} classes')
    start = time.time()
    fs = tuple(cfg.field_shape)
    cond = LdtConditioning(ages=torch.tensor([ages], dtype=torch.float32),
                           labels=torch.tensor([int(label)], dtype=torch.long),
                           grad_prior=anatomical_prior(baseline, fs).data.unsqueeze(0).float()).to(device)
    generator = torch.Generator().manual_seed(seed)
    z = sample(ckpt.model, cond, (1, cfg.input_channels, len(ages), *fs), ckpt.schedule, M=M, snr=snr,
               generator=generator, device=device)
    z = z[0].detach().cpu().double() / header.data_scale

    result = SynthesisResult(ages, [], [], [], [])
    for t in range(len(ages)):
        v = resample(VectorField(z[:, t], baseline.boundary), baseline.shape)
        phi = integrate_svf(v, header.squaring_steps)
        result.velocities.append(v)
        result.deformations.append(phi)
        result.volumes.append(warp(baseline, phi))
        result.detjac.append(detjac_stats(jacobian_determinant(phi)))
    logger.info('synthesize took %.3f seconds (%d frames, M = %d)', time.time() - start, len(ages), M)
    return result


def propagate_labels(segmentation: ScalarVolume, deformations: Sequence[DeformationField]) -> List[ScalarVolume]:
    """Nearest-neighbour warp of a label map through every deformation"""
    return [warp(segmentation, phi, mode='nearest') for phi in deformations]


def write_trajectory(result: SynthesisResult, out_dir: str, subject_id: str, label, seed: int = 0, M: int = 2,
                     baseline_age: Optional[float] = None, segmentation: Optional[ScalarVolume] = None,
                     model_name: str = 'LDT') -> SampleManifest:
    """frame_<i>.raw, def_<i>.raw, optional seg_<i>.raw, slice previews, detjac_report.csv and manifest.json"""
    os.makedirs(out_dir, exist_ok=True)
    count = len(result.volumes)
    files = [f'frame_{i}.raw' for i in range(1, count + 1)]
    deformation_files = [f'def_{i}.raw' for i in range(1, count + 1)]
    for i, (name, vol, phi) in enumerate(zip(files, result.volumes, result.deformations), start=1):
        save_volume(os.path.join(out_dir, name), vol)
        save_field(os.path.join(out_dir, deformation_files[i - 1]), phi.displacement)
        save_slice_png(vol, os.path.join(out_dir, f'frame_{i}.png'))
    segmentation_files = []
    if segmentation is not None:
        for i, seg in enumerate(propagate_labels(segmentation, result.deformations), start=1):
            segmentation_files.append(f'seg_{i}.raw')
            save_volume(os.path.join(out_dir, segmentation_files[-1]), seg)
    write_detjac_report(os.path.join(out_dir, 'detjac_report.csv'), model_name, result.detjac)
    manifest = SampleManifest(subject_id=subject_id, shape=list(result.volumes[0].shape), ages=list(result.ages),
                              label=int(DiseaseLabel.parse(label)), files=files, deformation_files=deformation_files,
                              synthetic_flags=[True] * count, segmentation_files=segmentation_files,
                              baseline_age=baseline_age, corrector_m=M, seed=seed)
    write_manifest(os.path.join(out_dir, 'manifest.json'), manifest)
    return manifest


# Sequence completion


@dataclass_json
@dataclass
class GapStats:
    mean: float
    std: float
    min: float
    max: float
    count: int


@dataclass_json
@dataclass
class AgeStats:
    """Per-class statistics of the years between consecutive visits"""
    gaps: Dict[str, GapStats] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Sequence[SubjectRecord]) -> 'AgeStats':
        by_class: Dict[str, List[float]] = {}
        for r in records:
            by_class.setdefault(r.label.name, []).extend(b - a for a, b in zip(r.ages, r.ages[1:]))
        pooled = [g for values in by_class.values() for g in values]
        if not pooled:
            raise InvalidInputError('Age statistics need at least one subject with a follow-up')

        def stats(values: List[float]) -> GapStats:
            return GapStats(float(np.mean(values)), float(np.std(values)), float(min(values)), float(max(values)),
                            len(values))

        # Classes without follow-ups fall back to the pooled statistics
        return cls({label.name: stats(by_class.get(label.name) or pooled) for label in DiseaseLabel})

    def sample_gaps(self, label, n: int, rng: np.random.Generator) -> List[float]:
        """n gaps from a normal with the class mean and std, clipped to the observed range"""
        s = self.gaps[DiseaseLabel.parse(label).name]
        lo = max(s.min, 1e-3)
        return [float(np.clip(rng.normal(s.mean, s.std), lo, max(s.max, lo))) for _ in range(n)]


def complete_sequence(subject: SubjectRecord, checkpoint: Union[str, LoadedCheckpoint], target_frames: int,
                      age_stats: AgeStats, M: int = 2, seed: int = 0,
                      device: Union[str, torch.device] = 'cpu') -> SubjectRecord:
    """Appends synthesized follow-ups until the subject has ``target_frames`` of them.

    The model is conditioned on every follow-up age, real and new; only the new frames are kept, flagged as
    synthetic. A subject that is already complete is returned as is.
    """
    missing = target_frames - subject.frames
    if missing <= 0:
        return subject
    rng = np.random.default_rng(seed)
    new_ages = (subject.ages[-1] + np.cumsum(age_stats.sample_gaps(subject.label, missing, rng))).tolist()
    result = synthesize(subject.baseline, subject.followup_ages + new_ages, subject.label, checkpoint, M=M, seed=seed,
                        baseline_age=subject.baseline_age, device=device)
    synthetic = result.volumes[subject.frames:]
    logger.info('Completed %s with %d synthetic frames at ages %s', subject.subject_id, missing,
                ', '.join(f'{a:.2f}' for a in new_ages))
    return SubjectRecord(subject_id=subject.subject_id, baseline=subject.baseline,
                         followups=list(subject.followups) + synthetic, ages=subject.ages + new_ages,
                         label=subject.label, segmentation=subject.segmentation,
                         synthetic_flags=list(subject.synthetic_flags) + [True] * missing)


# Evaluation


def _frame_files(path: str, manifest) -> Tuple[List[str], List[str], List[str]]:
    """(volumes, label maps, deformations) of the follow-ups described by a manifest"""
    if isinstance(manifest, SampleManifest):
        return ([os.path.join(path, f) for f in manifest.files],
                [os.path.join(path, f) for f in manifest.segmentation_files],
                [os.path.join(path, f) for f in manifest.deformation_files])
    segs = manifest.ground_truth.frame_segmentations if manifest.ground_truth else []
    return [os.path.join(path, f) for f in manifest.followup_files()], [os.path.join(path, f) for f in segs], []


def evaluate_pair(pred_dir: str, ref_dir: str) -> List[EvalRow]:
    """Per-frame PSNR and SSIM (plus Dice and DetJac when available) of one prediction against its reference"""
    pred, ref = load_manifest_dir(pred_dir), load_manifest_dir(ref_dir)
    if list(pred.shape) != list(ref.shape):
        raise InvalidInputError(f'{pred_dir} and {ref_dir} differ in shape: {pred.shape} vs {ref.shape}')
    pred_vols, pred_segs, pred_defs = _frame_files(pred_dir, pred)
    ref_vols, ref_segs, _ = _frame_files(ref_dir, ref)
    if len(pred_vols) != len(ref_vols):
        raise InvalidInputError(f'{pred_dir} has {len(pred_vols)} frames, {ref_dir} has {len(ref_vols)}')
    rows = []
    for t in range(len(pred_vols)):
        a = load_volume(ref_vols[t], ref.shape)
        b = load_volume(pred_vols[t], pred.shape)
        row = EvalRow(ref.subject_id, t + 1, psnr(a, b), ssim3d(a, b))
        if pred_segs and ref_segs:
            sa, sb = load_volume(ref_segs[t], ref.shape), load_volume(pred_segs[t], pred.shape)
            labels = sorted({int(v) for v in torch.unique(torch.round(sa.data)).tolist()} - {0})
            row.dice = float(np.mean([dice(sa, sb, label) for label in labels])) if labels else 1.0
        if pred_defs:
            phi = DeformationField(load_field(pred_defs[t], pred.shape))
            row.neg_detjac_fraction = detjac_stats(jacobian_determinant(phi)).negative_fraction
        rows.append(row)
    return rows


def evaluate_directories(pred_dir: str, ref_dir: str) -> List[EvalRow]:
    """Evaluates one prediction directory, or every sub-directory of a prediction root with a matching reference"""
    for path in (pred_dir, ref_dir):
        if not os.path.isdir(path):
            raise InvalidInputError(f'{path} is not a directory')
    if os.path.exists(os.path.join(pred_dir, 'manifest.json')):
        return evaluate_pair(pred_dir, ref_dir)
    names = sorted(d for d in os.listdir(pred_dir) if os.path.exists(os.path.join(pred_dir, d, 'manifest.json')))
    if not names:
        raise InvalidInputError(f'{pred_dir} holds no manifests')
    rows = []
    for name in names:
        ref = os.path.join(ref_dir, name)
        if not os.path.exists(os.path.join(ref, 'manifest.json')):
            raise InvalidInputError(f'No reference for {name} in {ref_dir}')
        rows.extend(evaluate_pair(os.path.join(pred_dir, name), ref))
    return rows
