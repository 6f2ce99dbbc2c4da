# Optional: enable logging to see what's happening
import logging
import os

logging.basicConfig(level=logging.INFO)

from morphoflow import DiseaseLabel, train_stage1, train_stage2, synthesize, RegistrationConfig
from morphoflow.pipeline import write_trajectory
from morphoflow.ldt import LdtConfig
from morphoflow.rawio import load_dataset
from morphoflow.synthdata import PhantomSpec, generate_dataset

out = os.getenv('MORPHOFLOW_EXAMPLE_OUT', 'example-out')

# %%

# A handful of 16^3 phantoms with three follow-ups each
generate_dataset(PhantomSpec(shape=[16, 16, 16], n_subjects=6, frames=3, seed=7), os.path.join(out, 'data'))
dataset = load_dataset(os.path.join(out, 'data'), 'train')

# %%

# Stage 1: one velocity field per follow-up, cached on disk
train_stage1(dataset, RegistrationConfig(iterations=100, field_shape=[8, 8, 8]), os.path.join(out, 'cache'))

# %%

# Stage 2: a tiny transformer over the cached velocities (a real run needs many more steps)
ckpt = os.path.join(out, 'ldt.ckpt')
train_stage2(os.path.join(out, 'cache'), LdtConfig(field_shape=[8, 8, 8], patch_size=4, max_frames=3),
             steps=int(os.getenv('MORPHOFLOW_EXAMPLE_STEPS', '200')), checkpoint_path=ckpt)

# %%

# Synthesize an AD trajectory from the first subject's baseline
subject = dataset[0]
ages = [subject.baseline_age + 1.5, subject.baseline_age + 3.0, subject.baseline_age + 4.5]
result = synthesize(subject.baseline, ages, DiseaseLabel.AD, ckpt, M=2, seed=0, baseline_age=subject.baseline_age)
write_trajectory(result, os.path.join(out, 'sample'), subject.subject_id, DiseaseLabel.AD,
                 baseline_age=subject.baseline_age, segmentation=subject.segmentation)
for age, stats in zip(result.ages, result.detjac):
    print(f'age {age:.1f}: mean DetJac {stats.mean:.4f}, folded voxels {100 * stats.negative_fraction:.2f}%')
