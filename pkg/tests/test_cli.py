import json

import pytest

from morphoflow.cli import main, build_parser
from morphoflow.rawio import read_manifest, SubjectManifest

TINY = {
    'schema_version': 1,
    'image_shape': [16, 16, 16],
    'field_shape': [8, 8, 8],
    'patch_size': 4,
    'd_model': 24,
    'n_heads': 2,
    'n_layers': 1,
    'frames': 2,
    'diffusion_steps': 20,
    'batch': 2,
    'lambda': 100.0,
}


def test_gen_data_is_reproducible(tmp_path, capsys):
    args = ['gen-data', '--subjects', '3', '--frames', '1', '--shape', '8', '--seed', '5']
    assert main(args + ['--out', str(tmp_path / 'a')]) == 0
    assert capsys.readouterr().out.strip().endswith('index.json')
    assert main(args + ['--out', str(tmp_path / 'b')]) == 0
    for name in ['index.json', 'sub-002/vol_1.raw', 'sub-002/manifest.json']:
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()


def test_usage_errors_exit_2(tmp_path):
    assert main(['gen-data', '--out', str(tmp_path / 'x'), '--subjects', '0']) == 2
    assert main(['gen-data', '--out', str(tmp_path / 'x'), '--shape', '8,8']) == 2
    assert main(['frobnicate']) == 2
    assert main(['register', '--data', str(tmp_path / 'missing'), '--out', str(tmp_path / 'cache')]) == 2


def test_invalid_label_exits_2(tmp_path):
    assert main(['sample', '--ckpt', str(tmp_path / 'none.ckpt'), '--baseline', str(tmp_path), '--ages', '71',
                 '--label', 'XYZ', '--out', str(tmp_path / 'out')]) == 2


def test_bad_config_exits_2(tmp_path):
    cfg = tmp_path / 'cfg.json'
    cfg.write_text(json.dumps({'schema_version': 1, 'steps': 3}))
    assert main(['train', '--velocities', str(tmp_path), '--out', str(tmp_path / 'm.ckpt'),
                 '--config', str(cfg)]) == 2


def test_malformed_seed_environment_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv('MORPHOFLOW_SEED', 'abc')
    assert main(['gen-data', '--out', str(tmp_path / 'x'), '--subjects', '1', '--shape', '8']) == 2


def test_config_drives_generation_and_registration(tmp_path):
    cfg = tmp_path / 'cfg.json'
    cfg.write_text(json.dumps({'schema_version': 1, 'image_shape': [8, 8, 8], 'field_shape': [8, 8, 8],
                               'patch_size': 2, 'frames': 1, 'boundary': 'wrap'}))
    data, cache = tmp_path / 'data', tmp_path / 'cache'
    assert main(['gen-data', '--out', str(data), '--subjects', '2', '--seed', '1', '--config', str(cfg)]) == 0
    index = json.loads((data / 'index.json').read_text())
    assert index['spec']['boundary'] == 'wrap'
    assert index['spec']['shape'] == [8, 8, 8] and index['spec']['frames'] == 1
    assert (data / 'sub-000' / 'vol_1.raw').stat().st_size == 8 ** 3 * 4
    assert main(['register', '--data', str(data), '--out', str(cache), '--iters', '3', '--config', str(cfg)]) == 0
    assert json.loads((cache / 'index.json').read_text())['boundary'] == 'wrap'

    wrong = tmp_path / 'wrong.json'
    wrong.write_text(json.dumps({'schema_version': 1, 'image_shape': [16, 16, 16]}))
    assert main(['register', '--data', str(data), '--out', str(tmp_path / 'other'), '--config', str(wrong)]) == 2


def test_parser_knows_every_command():
    parser = build_parser()
    for command in ['gen-data', 'register', 'train', 'sample', 'eval', 'report']:
        assert parser.parse_args(_minimal(command)).command == command


def _minimal(command):
    return {
        'gen-data': ['gen-data', '--out', 'd'],
        'register': ['register', '--data', 'd', '--out', 'c'],
        'train': ['train', '--velocities', 'c', '--out', 'm.ckpt'],
        'sample': ['sample', '--ckpt', 'm', '--baseline', 'b', '--ages', '1,2', '--label', 'AD', '--out', 'o'],
        'eval': ['eval', '--pred', 'p', '--ref', 'r', '--report', 'e.csv'],
        'report': ['report', '--csv', 'e.csv', '--plots', 'p'],
    }[command]


def test_end_to_end(tmp_path):
    cfg = tmp_path / 'cfg.json'
    cfg.write_text(json.dumps(TINY))
    data, cache, ckpt = tmp_path / 'data', tmp_path / 'cache', tmp_path / 'run' / 'ldt.ckpt'
    assert main(['gen-data', '--out', str(data), '--subjects', '4', '--frames', '2', '--shape', '16',
                 '--seed', '3']) == 0
    assert main(['register', '--data', str(data), '--out', str(cache), '--iters', '5', '--config', str(cfg)]) == 0
    assert (cache / 'index.json').exists() and (cache / 'register_summary.csv').exists()
    assert main(['train', '--velocities', str(cache), '--out', str(ckpt), '--steps', '3', '--config', str(cfg),
                 '--seed', '1']) == 0
    assert (tmp_path / 'run' / 'losses.csv').exists()

    manifest = read_manifest(str(data / 'sub-000' / 'manifest.json'), SubjectManifest)
    a0 = manifest.ages[0]
    sample_dir = tmp_path / 'sample'
    assert main(['sample', '--ckpt', str(ckpt), '--baseline', str(data / 'sub-000'),
                 '--ages', f'{a0 + 1},{a0 + 2}', '--label', 'AD', '--out', str(sample_dir), '--corrector-M', '1',
                 '--config', str(cfg), '--seed', '4']) == 0
    for name in ['manifest.json', 'frame_1.raw', 'frame_2.raw', 'seg_2.raw', 'detjac_report.csv']:
        assert (sample_dir / name).exists(), name

    report = tmp_path / 'eval.csv'
    assert main(['eval', '--pred', str(sample_dir), '--ref', str(data / 'sub-000'), '--report', str(report)]) == 0
    lines = report.read_text().splitlines()
    assert lines[0] == 'subject,frame,psnr,ssim,dice,neg_detjac_fraction'
    assert len(lines) == 3
    assert main(['report', '--csv', str(report), '--plots', str(tmp_path / 'plots')]) == 0
    assert (tmp_path / 'plots' / 'summary.csv').exists()
    assert (tmp_path / 'plots' / 'psnr.png').stat().st_size > 0

    single = tmp_path / 'single'
    assert main(['gen-data', '--out', str(single), '--subjects', '1', '--frames', '1', '--shape', '16']) == 0
    assert main(['eval', '--pred', str(sample_dir), '--ref', str(single / 'sub-000'),
                 '--report', str(tmp_path / 'bad.csv')]) == 2


@pytest.mark.slow
def test_sampling_is_reproducible(tmp_path):
    cfg = tmp_path / 'cfg.json'
    cfg.write_text(json.dumps(TINY))
    data, cache, ckpt = tmp_path / 'data', tmp_path / 'cache', tmp_path / 'ldt.ckpt'
    main(['gen-data', '--out', str(data), '--subjects', '2', '--frames', '2', '--shape', '16'])
    main(['register', '--data', str(data), '--out', str(cache), '--iters', '5', '--config', str(cfg)])
    main(['train', '--velocities', str(cache), '--out', str(ckpt), '--steps', '3', '--config', str(cfg)])
    a0 = read_manifest(str(data / 'sub-000' / 'manifest.json'), SubjectManifest).ages[0]
    for out in ('s1', 's2'):
        assert main(['sample', '--ckpt', str(ckpt), '--baseline', str(data / 'sub-000'), '--ages', f'{a0 + 1}',
                     '--label', 'CN', '--out', str(tmp_path / out), '--config', str(cfg), '--seed', '8']) == 0
    assert (tmp_path / 's1' / 'frame_1.raw').read_bytes() == (tmp_path / 's2' / 'frame_1.raw').read_bytes()
