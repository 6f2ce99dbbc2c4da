import csv

import pytest
import torch
from PIL import Image

from morphoflow.report import EvalRow, write_eval_csv, read_eval_csv, summarize, build_report, save_slice_png
from morphoflow.volume import ScalarVolume, InvalidInputError


def _rows():
    return [
        EvalRow('sub-000', 1, 31.0, 0.90, 0.95, 0.0),
        EvalRow('sub-000', 2, 27.0, 0.80, None, 0.001),
        EvalRow('sub-001', 1, 33.0, 0.94, 0.85, 0.0),
        EvalRow('sub-001', 2, 29.0, 0.86, None, 0.0),
    ]


def test_eval_csv_round_trip(tmp_path):
    path = tmp_path / 'eval.csv'
    write_eval_csv(str(path), _rows())
    with open(path, newline='') as f:
        lines = list(csv.reader(f))
    assert lines[0] == ['subject', 'frame', 'psnr', 'ssim', 'dice', 'neg_detjac_fraction']
    assert lines[2][4] == ''
    assert read_eval_csv(str(path)) == _rows()


def test_summary_groups_by_frame():
    summary = {(r.metric, r.frame): r for r in summarize(_rows())}
    assert summary[('psnr', '1')].mean == pytest.approx(32.0)
    assert summary[('psnr', '1')].std == pytest.approx(1.0)
    assert summary[('psnr', 'all')].count == 4
    assert summary[('dice', 'all')].count == 2
    assert ('dice', '2') not in summary


def test_report_writes_summary_and_plots(tmp_path):
    path = tmp_path / 'eval.csv'
    write_eval_csv(str(path), _rows())
    written = build_report(str(path), str(tmp_path / 'plots'))
    names = sorted(p.rsplit('/', 1)[-1] for p in written)
    assert names == ['dice.png', 'neg_detjac_fraction.png', 'psnr.png', 'ssim.png', 'summary.csv']
    for p in written:
        assert (tmp_path / 'plots' / p.rsplit('/', 1)[-1]).stat().st_size > 0


def test_report_rejects_other_csv(tmp_path):
    path = tmp_path / 'other.csv'
    path.write_text('a,b\n1,2\n')
    with pytest.raises(InvalidInputError):
        build_report(str(path), str(tmp_path / 'plots'))
    with pytest.raises(InvalidInputError):
        build_report(str(tmp_path / 'missing.csv'), str(tmp_path / 'plots'))


def test_slice_png(tmp_path):
    data = torch.zeros((6, 5, 4), dtype=torch.float64)
    data[:, :, 2] = torch.linspace(0, 1, 6).view(6, 1)
    path = tmp_path / 'slice.png'
    save_slice_png(ScalarVolume(data), str(path))
    with Image.open(path) as img:
        assert img.size == (5, 6)
        assert img.mode == 'L'
        assert img.getpixel((0, 5)) == 255
