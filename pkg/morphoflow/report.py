"""
CSV and image outputs: evaluation rows, per-metric summaries, trend plots and slice previews
"""
import csv
import math
import os
from dataclasses import dataclass
from typing import List, Optional, Dict

import numpy as np
from PIL import Image

from morphoflow.mylogger import logger
from morphoflow.volume import ScalarVolume, InvalidInputError

EVAL_COLUMNS = ['subject', 'frame', 'psnr', 'ssim', 'dice', 'neg_detjac_fraction']
METRICS = ['psnr', 'ssim', 'dice', 'neg_detjac_fraction']


@dataclass
class EvalRow:
    subject: str
    frame: int
    psnr: float
    ssim: float
    dice: Optional[float] = None
    neg_detjac_fraction: Optional[float] = None


@dataclass
class SummaryRow:
    metric: str
    frame: str
    """1-based frame index, or ``all``"""
    mean: float
    std: float
    count: int


def _cell(value) -> str:
    return '' if value is None else repr(value) if isinstance(value, float) else str(value)


def _optional(text: str) -> Optional[float]:
    return float(text) if text != '' else None


def write_eval_csv(path: str, rows: List[EvalRow]):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(EVAL_COLUMNS)
        for row in rows:
            writer.writerow([_cell(getattr(row, c)) for c in EVAL_COLUMNS])


def read_eval_csv(path: str) -> List[EvalRow]:
    try:
        with open(path, newline='') as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != EVAL_COLUMNS:
                raise InvalidInputError(f'{path} is not an evaluation CSV (columns {reader.fieldnames})')
            return [EvalRow(r['subject'], int(r['frame']), float(r['psnr']), float(r['ssim']), _optional(r['dice']),
                            _optional(r['neg_detjac_fraction'])) for r in reader]
    except OSError as e:
        raise InvalidInputError(f'Cannot read {path}: {e.strerror}') from e


def summarize(rows: List[EvalRow]) -> List[SummaryRow]:
    """Mean and population std of every metric per frame and over all frames; missing values are skipped"""
    out = []
    frames = sorted({r.frame for r in rows})
    for metric in METRICS:
        groups: Dict[str, List[float]] = {str(f): [] for f in frames}
        groups['all'] = []
        for r in rows:
            value = getattr(r, metric)
            if value is None:
                continue
            groups[str(r.frame)].append(value)
            groups['all'].append(value)
        for frame, values in groups.items():
            if values:
                out.append(SummaryRow(metric, frame, float(np.mean(values)), float(np.std(values)), len(values)))
    return out


def write_summary_csv(path: str, rows: List[SummaryRow]):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['metric', 'frame', 'mean', 'std', 'count'])
        for row in rows:
            writer.writerow([row.metric, row.frame, repr(row.mean), repr(row.std), row.count])


def plot_metrics(summary: List[SummaryRow], plots_dir: str) -> List[str]:
    """One trend plot (mean +- std per frame) per metric that has values"""
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    os.makedirs(plots_dir, exist_ok=True)
    written = []
    for metric in METRICS:
        points = sorted((int(r.frame), r.mean, r.std) for r in summary if r.metric == metric and r.frame != 'all')
        if not points:
            continue
        frames, means, stds = (np.array(v) for v in zip(*points))
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.errorbar(frames, means, yerr=stds, marker='o', capsize=3)
        ax.set_xlabel('frame')
        ax.set_ylabel(metric)
        ax.set_xticks(frames)
        ax.set_title(f'{metric} per frame')
        fig.tight_layout()
        path = os.path.join(plots_dir, f'{metric}.png')
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def build_report(eval_csv: str, plots_dir: str) -> List[str]:
    """summary.csv plus the trend plots, all inside ``plots_dir``"""
    rows = read_eval_csv(eval_csv)
    if not rows:
        raise InvalidInputError(f'{eval_csv} has no rows')
    summary = summarize(rows)
    os.makedirs(plots_dir, exist_ok=True)
    summary_path = os.path.join(plots_dir, 'summary.csv')
    write_summary_csv(summary_path, summary)
    written = [summary_path, *plot_metrics(summary, plots_dir)]
    logger.info('Report with %d files written to %s', len(written), plots_dir)
    return written


def save_slice_png(vol: ScalarVolume, path: str, axis: int = 2, index: Optional[int] = None,
                   value_range: Optional[tuple] = None):
    """Grayscale PNG of one slice (the middle one by default), scaled to the volume's or the given range"""
    data = vol.data.detach().cpu().numpy()
    index = data.shape[axis] // 2 if index is None else index
    plane = np.take(data, index, axis=axis)
    lo, hi = value_range if value_range is not None else (float(data.min()), float(data.max()))
    scale = 255.0 / (hi - lo) if hi > lo and math.isfinite(hi - lo) else 0.0
    pixels = np.clip((plane - lo) * scale, 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PNG')
