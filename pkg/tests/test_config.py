import json

import pytest

from morphoflow.config import RunConfig, load_run_config, save_run_config, env_seed, env_jobs, env_device, \
    SCHEMA_VERSION
from morphoflow.volume import InvalidInputError


def _write(tmp_path, payload) -> str:
    path = tmp_path / 'cfg.json'
    path.write_text(json.dumps(payload))
    return str(path)


def test_defaults_without_a_file():
    cfg = load_run_config(None)
    assert cfg.image_shape == [32, 32, 32]
    assert cfg.field_shape == [16, 16, 16]
    assert cfg.diffusion_steps == 1000
    assert cfg.lambda_ == 100.0


def test_lambda_key_and_derived_configs(tmp_path):
    cfg = load_run_config(_write(tmp_path, {'schema_version': 1, 'lambda': 20.0, 'image_shape': [16, 16, 16],
                                            'field_shape': [16, 16, 16], 'K': 5}))
    reg = cfg.registration_config(iterations=7)
    assert reg.lambda_ == 20.0 and reg.K == 5 and reg.iterations == 7
    assert reg.field_shape is None
    ldt = cfg.ldt_config('adaln')
    assert ldt.max_frames == cfg.frames and ldt.age_conditioning == 'adaln'
    assert cfg.schedule_params().steps == 1000


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(InvalidInputError, match='unknown'):
        load_run_config(_write(tmp_path, {'schema_version': 1, 'learning_rate': 0.1}))


def test_schema_and_value_checks(tmp_path):
    with pytest.raises(InvalidInputError):
        load_run_config(_write(tmp_path, {'schema_version': SCHEMA_VERSION + 1}))
    with pytest.raises(InvalidInputError):
        load_run_config(_write(tmp_path, {'boundary': 'mirror'}))
    with pytest.raises(InvalidInputError):
        load_run_config(_write(tmp_path, {'field_shape': [15, 16, 16]}))
    with pytest.raises(InvalidInputError):
        load_run_config(_write(tmp_path, [1, 2]))
    with pytest.raises(InvalidInputError):
        load_run_config(str(tmp_path / 'missing.json'))


def test_presets():
    cfg = RunConfig().with_preset('S')
    assert (cfg.d_model, cfg.n_heads, cfg.n_layers) == (384, 6, 12)
    full = RunConfig.full_scale().validate()
    assert full.image_shape == [128, 128, 128] and full.frames == 4 and full.batch == 48


def test_save_and_reload(tmp_path):
    path = tmp_path / 'saved.json'
    save_run_config(str(path), RunConfig(d_model=48, lambda_=7.5))
    assert 'lambda' in json.loads(path.read_text())
    assert load_run_config(str(path)) == RunConfig(d_model=48, lambda_=7.5)


def test_environment_defaults(monkeypatch):
    monkeypatch.setenv('MORPHOFLOW_SEED', '42')
    monkeypatch.setenv('MORPHOFLOW_JOBS', '0')
    monkeypatch.delenv('MORPHOFLOW_DEVICE', raising=False)
    assert env_seed() == 42
    assert env_jobs() == 1
    assert env_device() == 'cpu'


def test_malformed_environment_is_invalid_input(monkeypatch):
    monkeypatch.setenv('MORPHOFLOW_SEED', 'seven')
    with pytest.raises(InvalidInputError, match='MORPHOFLOW_SEED'):
        env_seed()
    monkeypatch.setenv('MORPHOFLOW_JOBS', '2.5')
    with pytest.raises(InvalidInputError):
        env_jobs()
