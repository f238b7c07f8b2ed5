from pathlib import Path

import pytest

from app.core import experiment
from app.schemas import JanossyKind, SearchStrategyEnum
from app.utils.enhanced_config import load_experiment_config
from app.utils.error_handler import ConfigurationError
from app.utils.file_handler import load_csv_file, load_json_file

DEFAULT_CONFIG = Path(__file__).parent.parent / 'config' / 'default_experiment.yaml'


def config(tmp_path, *overrides, name='run'):
    base = [f'output_dir={tmp_path / name}', 'n_sets=40', 'task.set_size=4', 'model.phi_widths=[1,6,3]',
            'model.rho_widths=[3,6,1]', 'model.activation=tanh', 'train.epochs=2', 'train.batch_size=16']
    return load_experiment_config(DEFAULT_CONFIG, [*base, *overrides])


class TestCriticalPoint:
    def test_smallest_width_within_tolerance(self):
        rows = [(1, 1.0), (2, 0.5), (4, 0.46), (8, 0.45), (16, 0.47)]
        assert experiment.critical_point(rows) == 4

    def test_flat_curve(self):
        assert experiment.critical_point([(1, 0.3), (2, 0.3)]) == 1


class TestPipeline:
    def test_missing_dataset_path(self, tmp_path):
        cfg = config(tmp_path, f'dataset_path={tmp_path / "missing.ndjson"}')
        with pytest.raises(FileNotFoundError):
            experiment.load_or_generate(cfg)

    def test_generated_dataset_can_be_reloaded(self, tmp_path):
        cfg = config(tmp_path)
        result = experiment.gen_data(cfg)
        reloaded = config(tmp_path, f'dataset_path={result.summary["path"]}')
        a = experiment.load_or_generate(cfg)
        b = experiment.load_or_generate(reloaded)
        assert (a.batch.elements == b.batch.elements).all()

    def test_build_model_latent_override(self, tmp_path):
        model = experiment.build_model(config(tmp_path), latent=5)
        assert model.latent_dim == 5

    def test_train_is_reproducible(self, tmp_path):
        first = experiment.run_train(config(tmp_path, name='a'))
        second = experiment.run_train(config(tmp_path, name='b'))
        manifests = [load_json_file(r.output_dir / 'manifest.json') for r in (first, second)]
        hashes = [{e['file']: e['content_sha256'] for e in m['files'] if e['file'] != 'config.json'}
                  for m in manifests]
        assert hashes[0] == hashes[1]
        assert (first.output_dir / 'checkpoint.json').read_bytes() == (
            second.output_dir / 'checkpoint.json').read_bytes()

    def test_search_rejects_point_clouds(self, tmp_path):
        cfg = config(tmp_path, 'task={"kind": "toy_point_cloud", "element_dim": 3, "points_per_cloud": 8}',
                     'model.phi_widths=[3,6,3]', 'model.rho_widths=[3,6,3]', 'train.loss=cross_entropy')
        with pytest.raises(ConfigurationError) as excinfo:
            experiment.run_search(cfg, SearchStrategyEnum.GRID)
        assert 'task.kind' in str(excinfo.value)


class TestCheckSuite:
    def test_default_suite_passes(self, tmp_path):
        reports = experiment.check_suite(config(tmp_path))
        failed = [r.name for r in reports if not r.passed]
        assert failed == []
        assert 'permutation_invariance[janossy_kary]' in {r.name for r in reports}

    def test_sampled_janossy_is_skipped(self, tmp_path):
        reports = experiment.check_suite(config(tmp_path, f'janossy.kind={JanossyKind.SAMPLED.value}'))
        assert not any(r.name.startswith('permutation_invariance[janossy') for r in reports)

    def test_probe_failure_carries_witness(self, tmp_path):
        result = experiment.run_check(config(tmp_path), inject_order_sensitive=True)
        assert not result.summary['passed']
        assert result.summary['failed'] == ['permutation_invariance[order_sensitive_probe]']
        assert result.summary['witnesses']['permutation_invariance[order_sensitive_probe]'] is not None


@pytest.mark.slow
@pytest.mark.parametrize('seed', [0, 1, 2])
def test_median_error_falls_with_latent_width(tmp_path, seed):
    cfg = load_experiment_config(DEFAULT_CONFIG, [f'output_dir={tmp_path}', f'seed={seed}',
                                                  f'train.seed={seed}', 'train.epochs=100'])
    experiment.run_latent_sweep(cfg, dims=[1, 2, 4, 8, 16])
    rmse = [float(row['rmse']) for row in load_csv_file(tmp_path / 'latent_sweep.csv')]
    assert rmse[-1] <= 0.5 * rmse[0]
    assert all(b <= a * 1.1 for a, b in zip(rmse, rmse[1:]))


def search_config(tmp_path, *overrides):
    return load_experiment_config(DEFAULT_CONFIG, [
        f'output_dir={tmp_path}', 'n_sets=500', 'train.epochs=40', 'model.activation=tanh',
        'search.p_range=[-5.0,5.0]', 'search.step=0.5', *overrides])


@pytest.mark.slow
def test_grid_search_prefers_large_p_for_max_task(tmp_path):
    result = experiment.run_search(search_config(tmp_path, 'task.kind=max_of_set'), SearchStrategyEnum.GRID)
    assert result.summary['best_p'] >= 3.0


@pytest.mark.slow
def test_grid_search_prefers_mean_for_mean_task(tmp_path):
    result = experiment.run_search(search_config(tmp_path, 'task.kind=mean_of_set'), SearchStrategyEnum.GRID)
    assert abs(result.summary['best_p'] - 1.0) <= 1.5


@pytest.mark.slow
def test_joint_search_keeps_p_near_one_for_mean_task(tmp_path):
    result = experiment.run_search(search_config(tmp_path, 'task.kind=mean_of_set'), SearchStrategyEnum.GRADIENT)
    assert abs(result.summary['best_p'] - 1.0) < 0.5
