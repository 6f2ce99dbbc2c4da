"""
Command-line surface: gen-data, register, train, sample, eval and report.

Exit codes are 0 on success, 2 for usage or validation problems and 1 for runtime failures.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

from morphoflow.checkpoint import CheckpointError, load_checkpoint
from morphoflow.config import load_run_config, env_seed, env_jobs, env_device
from morphoflow.ldt import LdtConfig
from morphoflow.mylogger import logger
from morphoflow.pipeline import train_stage1, write_register_summary, train_stage2, synthesize, write_trajectory
from morphoflow.pipeline import evaluate_directories
from morphoflow.rawio import load_dataset, load_subject, load_volume
from morphoflow.report import write_eval_csv, build_report
from morphoflow.subject import DiseaseLabel
from morphoflow.synthdata import PhantomSpec, generate_dataset
from morphoflow.volume import InvalidInputError, Boundary, as_shape


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated numbers, got {text!r}') from None


def _shape(text: str) -> List[int]:
    try:
        return list(as_shape([int(x) for x in text.split(',')]) if ',' in text else as_shape(int(text)))
    except (ValueError, InvalidInputError):
        raise argparse.ArgumentTypeError(f'expected N or H,W,L, got {text!r}') from None


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected an integer, got {text!r}') from None
    if value < 1:
        raise argparse.ArgumentTypeError(f'must be >= 1, got {value}')
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='morphoflow', description='Longitudinal brain-anatomy synthesis')
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument('--seed', type=int, default=None, help='defaults to $MORPHOFLOW_SEED or 0')
        p.add_argument('--config', default=None, help='strict JSON run config')

    p = sub.add_parser('gen-data', help='write a synthetic phantom dataset')
    p.add_argument('--out', required=True)
    p.add_argument('--subjects', type=_positive, default=8)
    p.add_argument('--frames', type=_positive, default=None, help='follow-ups per subject, defaults to the config')
    p.add_argument('--shape', type=_shape, default=None, help='N or H,W,L, defaults to the config image_shape')
    p.add_argument('--class-mix', type=_floats, default=None, help='CN,MCI,AD proportions')
    p.add_argument('--noise', type=float, default=None, help='Gaussian intensity noise sigma')
    p.add_argument('--jobs', type=_positive, default=None)
    common(p)

    p = sub.add_parser('register', help='register every subject and cache the velocity fields')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--iters', type=_positive, default=200)
    p.add_argument('--lambda', dest='lambda_', type=float, default=None)
    p.add_argument('--field-shape', type=_shape, default=None)
    p.add_argument('--split', default=None, help='restrict to one split of index.json')
    p.add_argument('--jobs', type=_positive, default=None)
    common(p)

    p = sub.add_parser('train', help='train the diffusion transformer on a velocity cache')
    p.add_argument('--velocities', required=True)
    p.add_argument('--out', required=True, help='checkpoint path')
    p.add_argument('--steps', type=_positive, default=1000)
    p.add_argument('--preset', choices=sorted(LdtConfig.PRESETS), default=None)
    p.add_argument('--age-conditioning', choices=['appe', 'adaln'], default='appe')
    p.add_argument('--losses', default=None, help='defaults to losses.csv next to the checkpoint')
    p.add_argument('--device', default=None)
    common(p)

    p = sub.add_parser('sample', help='synthesize follow-ups of a baseline')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--baseline', required=True, help='subject directory or raw volume')
    p.add_argument('--ages', type=_floats, required=True, help='comma-separated follow-up ages')
    p.add_argument('--label', required=True, help='CN, MCI or AD')
    p.add_argument('--out', required=True)
    p.add_argument('--corrector-M', dest='corrector_m', type=int, default=None)
    p.add_argument('--snr', type=float, default=None)
    p.add_argument('--segmentation', default=None, help='raw label map of the baseline to propagate')
    p.add_argument('--baseline-age', type=float, default=None)
    p.add_argument('--subject-id', default=None)
    p.add_argument('--device', default=None)
    common(p)

    p = sub.add_parser('eval', help='compare generated frames with reference frames')
    p.add_argument('--pred', required=True)
    p.add_argument('--ref', required=True)
    p.add_argument('--report', required=True, help='output CSV')

    p = sub.add_parser('report', help='summary table and trend plots of an evaluation CSV')
    p.add_argument('--csv', required=True)
    p.add_argument('--plots', required=True)
    return parser


def cmd_gen_data(args) -> int:
    run = load_run_config(args.config)
    spec = PhantomSpec(shape=args.shape or list(run.image_shape), n_subjects=args.subjects,
                       frames=args.frames or run.frames, seed=env_seed() if args.seed is None else args.seed,
                       boundary=run.boundary)
    if args.class_mix is not None:
        spec.class_mix = args.class_mix
    if args.noise is not None:
        spec.noise_sigma = args.noise
    generate_dataset(spec, args.out, jobs=args.jobs or env_jobs())
    print(os.path.join(args.out, 'index.json'))
    return 0


def cmd_register(args) -> int:
    run = load_run_config(args.config)
    # Without a config file the dataset's own boundary and shape stand
    boundary = Boundary(run.boundary) if args.config else None
    dataset = load_dataset(args.data, args.split, boundary)
    image_shape = list(dataset[0].baseline.shape)
    if args.config and image_shape != list(run.image_shape):
        raise InvalidInputError(f'{args.data} holds {image_shape} images but {args.config} expects '
                                f'{list(run.image_shape)}')
    field_shape = list(args.field_shape or run.field_shape)
    if field_shape == image_shape:
        field_shape = None
    cfg = replace(run.registration_config(iterations=args.iters), field_shape=field_shape)
    if args.lambda_ is not None:
        cfg = replace(cfg, lambda_=args.lambda_)
    result = train_stage1(dataset, cfg.validate(), args.out, jobs=args.jobs or env_jobs())
    summary = os.path.join(args.out, 'register_summary.csv')
    write_register_summary(summary, result.rows)
    print(summary)
    return 1 if len(result.failed) == len(dataset) else 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    if args.preset is not None:
        run = run.with_preset(args.preset)
    losses = args.losses or os.path.join(os.path.dirname(os.path.abspath(args.out)), 'losses.csv')
    train_stage2(args.velocities, run.ldt_config(args.age_conditioning), run.schedule_params(), steps=args.steps,
                 lr=run.lr, batch=run.batch, seed=env_seed() if args.seed is None else args.seed,
                 checkpoint_path=args.out, losses_path=losses, device=args.device or env_device())
    print(args.out)
    return 0


def cmd_sample(args) -> int:
    run = load_run_config(args.config)
    label = DiseaseLabel.parse(args.label)
    device = args.device or env_device()
    ckpt = load_checkpoint(args.ckpt, device)
    boundary = Boundary(ckpt.header.boundary)
    segmentation, baseline_age, subject_id = None, args.baseline_age, args.subject_id
    if os.path.isdir(args.baseline):
        subject = load_subject(args.baseline, boundary)
        baseline, segmentation = subject.baseline, subject.segmentation
        baseline_age = subject.baseline_age if baseline_age is None else baseline_age
        subject_id = subject_id or subject.subject_id
    else:
        if not ckpt.header.image_shape:
            raise CheckpointError(f'{args.ckpt} does not record an image shape; pass a subject directory')
        baseline = load_volume(args.baseline, ckpt.header.image_shape, boundary)
        subject_id = subject_id or os.path.splitext(os.path.basename(args.baseline))[0]
    if args.segmentation is not None:
        segmentation = load_volume(args.segmentation, baseline.shape, boundary)
    M = run.corrector_M if args.corrector_m is None else args.corrector_m
    seed = env_seed() if args.seed is None else args.seed
    result = synthesize(baseline, args.ages, label, ckpt, M=M, seed=seed, baseline_age=baseline_age,
                        snr=run.snr if args.snr is None else args.snr, device=device)
    write_trajectory(result, args.out, subject_id, label, seed=seed, M=M, baseline_age=baseline_age,
                     segmentation=segmentation)
    print(os.path.join(args.out, 'manifest.json'))
    return 0


def cmd_eval(args) -> int:
    rows = evaluate_directories(args.pred, args.ref)
    write_eval_csv(args.report, rows)
    logger.info('Evaluated %d frames into %s', len(rows), args.report)
    print(args.report)
    return 0


def cmd_report(args) -> int:
    for path in build_report(args.csv, args.plots):
        print(path)
    return 0


COMMANDS = {
    'gen-data': cmd_gen_data,
    'register': cmd_register,
    'train': cmd_train,
    'sample': cmd_sample,
    'eval': cmd_eval,
    'report': cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return COMMANDS[args.command](args)
    except (InvalidInputError, CheckpointError) as e:
        print(f'morphoflow {args.command}: {e}', file=sys.stderr)
        return 2
    except Exception as e:
        logger.debug('Command %s failed', args.command, exc_info=True)
        print(f'morphoflow {args.command}: {type(e).__name__}: {e}', file=sys.stderr)
        return 1
