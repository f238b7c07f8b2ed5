import json

import pytest
from pydantic import ValidationError

from app.schemas import ExperimentConfig
from app.utils.enhanced_config import ExperimentConfigManager, load_experiment_config
from app.utils.error_handler import (CheckFailure, ConfigurationError, DatasetParseError, ErrorCategory,
                                     NumericalAbortError, classify_error, handle_error)
from app.utils.file_handler import (get_file_hash, get_stable_hash, load_json_file, save_csv_file, save_json_file,
                                    write_manifest)
from app.utils.performance_monitor import PerformanceMonitor


class TestConfig:
    def test_defaults_without_file(self):
        cfg = load_experiment_config()
        assert cfg == ExperimentConfig()

    def test_yaml_file_and_override_precedence(self, tmp_path):
        path = tmp_path / 'exp.yaml'
        path.write_text('n_sets: 50\ntrain:\n  epochs: 7\n', encoding='utf-8')
        cfg = load_experiment_config(path, ['train.epochs=3'])
        assert cfg.n_sets == 50
        assert cfg.train.epochs == 3
        assert cfg.train.batch_size == ExperimentConfig().train.batch_size

    def test_json_file(self, tmp_path):
        path = tmp_path / 'exp.json'
        path.write_text(json.dumps({'seed': 9}), encoding='utf-8')
        assert load_experiment_config(path).seed == 9

    @pytest.mark.parametrize('raw,expected', [
        ('true', True), ('null', None), ('3', 3), ('0.5', 0.5), ('1e-3', 1e-3), ('[1,2]', [1, 2]),
        ('uniform', 'uniform'),
    ])
    def test_override_value_conversion(self, raw, expected):
        assert ExperimentConfigManager._convert_value(raw) == expected

    def test_invalid_field_names_path(self):
        with pytest.raises(ConfigurationError) as excinfo:
            load_experiment_config(overrides=['train.epochs=0'])
        assert excinfo.value.field_path == 'train.epochs'

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_experiment_config(tmp_path / 'absent.yaml')

    def test_width_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            load_experiment_config(overrides=['model.phi_widths=[2,8,16]'])


class TestErrorClassification:
    @pytest.mark.parametrize('exc,category,code', [
        (CheckFailure('x'), ErrorCategory.CHECK, 1),
        (ConfigurationError('x'), ErrorCategory.CONFIGURATION, 2),
        (DatasetParseError('x', line_number=3), ErrorCategory.CONFIGURATION, 2),
        (FileNotFoundError('x'), ErrorCategory.FILE_SYSTEM, 2),
        (NumericalAbortError('x', tensor='loss'), ErrorCategory.NUMERICAL, 3),
    ])
    def test_exit_codes(self, exc, category, code):
        info = handle_error(exc)
        assert info.category == category
        assert info.exit_code == code

    def test_pydantic_validation_error_is_configuration(self):
        with pytest.raises(ValidationError) as excinfo:
            ExperimentConfig(n_sets=0)
        assert classify_error(excinfo.value) == ErrorCategory.CONFIGURATION

    def test_messages_carry_context(self):
        assert str(ConfigurationError('bad', field_path='task.kind')) == 'task.kind: bad'
        assert DatasetParseError('bad', line_number=4).line_number == 4


class TestFiles:
    def test_json_is_deterministic(self, tmp_path):
        a = save_json_file({'b': 1, 'a': [0.1, 2.0]}, tmp_path / 'a.json')
        b = save_json_file({'a': [0.1, 2.0], 'b': 1}, tmp_path / 'b.json')
        assert a.read_bytes() == b.read_bytes()
        assert load_json_file(a) == {'a': [0.1, 2.0], 'b': 1}

    def test_stable_hash_ignores_volatile_fields(self, tmp_path):
        a = save_json_file({'loss': 0.5, 'seconds': 1.0}, tmp_path / 'a.json')
        b = save_json_file({'loss': 0.5, 'seconds': 2.5}, tmp_path / 'b.json')
        assert get_file_hash(a) != get_file_hash(b)
        assert get_stable_hash(a, ['seconds']) == get_stable_hash(b, ['seconds'])

    def test_stable_hash_drops_csv_columns(self, tmp_path):
        a = save_csv_file([(0, 1.5, 0.1)], ('trial', 'p', 'seconds'), tmp_path / 'a.csv')
        b = save_csv_file([(0, 1.5, 0.9)], ('trial', 'p', 'seconds'), tmp_path / 'b.csv')
        assert get_stable_hash(a, ['seconds']) == get_stable_hash(b, ['seconds'])

    def test_csv_floats_round_trip(self, tmp_path):
        path = save_csv_file([(0.1 + 0.2,)], ('x',), tmp_path / 'x.csv')
        assert float(path.read_text(encoding='utf-8').splitlines()[1]) == 0.1 + 0.2

    def test_manifest_lists_files(self, tmp_path):
        f = save_json_file({'seconds': 1.0}, tmp_path / 'report.json')
        manifest = load_json_file(write_manifest(tmp_path, [f], volatile={'report.json': ['seconds']},
                                                 command='train'))
        assert manifest['format_version'] == 1
        assert manifest['files'][0]['file'] == 'report.json'
        assert manifest['files'][0]['sha256'] == get_file_hash(f)


def test_performance_monitor_accumulates():
    monitor = PerformanceMonitor()
    for _ in range(3):
        with monitor.measure_time('trial') as timing:
            pass
        assert timing.seconds >= 0.0
    assert monitor.summary()['trial']['count'] == 3
    assert monitor.total_seconds('missing') == 0.0
