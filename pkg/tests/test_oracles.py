import numpy as np
import pytest

from app.core import oracles
from app.core.oracles import (FirstElementProbe, cardinality_squared, check_modularity,
                              check_permutation_invariance, check_submodularity, check_sum_isomorphism, grad_check)
from app.core.setnn import SetBatch, predict_set_function_over_powerset
from app.schemas import AggregatorKind, MonotoneMapSpec
from app.utils.error_handler import ConfigurationError, ResourceError
from app.utils.numerics import Rng
from tests.conftest import make_model


@pytest.fixture
def ground():
    return Rng(50).uniform(0.5, 1.5, size=(5, 1))


def scalar_set_function(kind, ground, seed=0):
    model = make_model(kind, d=1, latent=1, rho_identity=True, seed=seed)
    return predict_set_function_over_powerset(model, ground)


class TestPermutationInvariance:
    def test_mean_model_passes(self, positive_sets):
        report = check_permutation_invariance(make_model(seed=1), positive_sets)
        assert report.passed
        assert report.witness is None

    def test_order_sensitive_probe_fails_with_witness(self, positive_sets):
        report = check_permutation_invariance(FirstElementProbe(), positive_sets)
        assert not report.passed
        assert report.worst_violation > 0.0
        assert set(report.witness) == {'set_index', 'permutation', 'deviation'}
        assert report.witness['set_index'] > 0

    def test_singletons_have_zero_violation(self):
        sets = [np.array([[float(i), 1.0]]) for i in range(4)]
        report = check_permutation_invariance(FirstElementProbe(), sets)
        assert report.worst_violation == 0.0
        assert report.passed

    def test_sampled_permutations_are_reproducible(self):
        sets = [Rng(3).uniform(0.5, 1.5, size=(9, 2))]
        a = check_permutation_invariance(FirstElementProbe(), sets, n_perms=10, rng=Rng(7))
        b = check_permutation_invariance(FirstElementProbe(), sets, n_perms=10, rng=Rng(7))
        assert a.worst_violation == b.worst_violation
        assert a.witness == b.witness

    def test_random_models_are_invariant(self):
        kinds = [AggregatorKind.SUM, AggregatorKind.MEAN, AggregatorKind.MAX, AggregatorKind.MIN,
                 AggregatorKind.POWER_MEAN, AggregatorKind.LOGSUMEXP_MEAN]
        rng = Rng(77)
        worst = 0.0
        for i in range(200):
            kind = kinds[i % len(kinds)]
            p = float(rng.uniform(-4.0, 4.0)) if kind == AggregatorKind.POWER_MEAN else None
            model = make_model(kind, p=p, seed=i)
            sets = [rng.child(i, j).uniform(0.5, 1.5, size=(j + 2, 2)) for j in range(3)]
            worst = max(worst, check_permutation_invariance(model, sets).worst_violation)
        assert worst < 1e-9

    def test_tolerance_must_be_positive(self, positive_sets):
        with pytest.raises(ConfigurationError):
            check_permutation_invariance(make_model(), positive_sets, tol=0.0)


class TestSetFunctionChecks:
    def test_sum_model_is_modular(self, ground):
        assert check_modularity(scalar_set_function(AggregatorKind.SUM, ground), 5).passed

    def test_max_model_is_submodular(self, ground):
        assert check_submodularity(scalar_set_function(AggregatorKind.MAX, ground), 5).passed

    def test_max_model_is_not_modular(self, ground):
        report = check_modularity(scalar_set_function(AggregatorKind.MAX, ground), 5)
        assert not report.passed
        assert set(report.witness) == {'S', 'T', 'gap'}

    def test_cardinality_squared_is_not_submodular(self):
        report = check_submodularity(cardinality_squared, 4)
        assert not report.passed
        assert report.witness['gap'] < 0

    def test_worst_submodular_gap_of_cardinality_squared(self):
        # gap(S, T) = -2|S\T||T\S|，在 V 对半分时最小
        report = check_submodularity(cardinality_squared, 4)
        assert report.worst_violation == 8.0

    def test_ground_set_limit(self):
        with pytest.raises(ResourceError):
            check_modularity(cardinality_squared, 11)

    def test_mapping_input(self):
        table = {frozenset(s): float(sum(s)) for s in [(0,), (1,), (0, 1)]}
        assert check_modularity(table, 2).passed


class TestGradCheck:
    def batch(self, d=2):
        rng = Rng(12)
        sets = [rng.child(i).uniform(0.5, 1.5, size=(3, d)) for i in range(4)]
        return SetBatch.from_sets(sets, rng.uniform(0.0, 1.0, size=4))

    @pytest.mark.parametrize('kind,p,learnable', [
        (AggregatorKind.MEAN, None, False),
        (AggregatorKind.SUM, None, False),
        (AggregatorKind.POWER_MEAN, 0.0, False),
        (AggregatorKind.POWER_MEAN, 2.0, False),
        (AggregatorKind.POWER_MEAN, 0.5, True),
    ])
    def test_backprop_matches_finite_difference(self, kind, p, learnable):
        model = make_model(kind, p=p, learnable=learnable, seed=6)
        report = grad_check(model, self.batch())
        assert report.passed, report.witness
        assert report.skipped == 0

    @pytest.mark.parametrize('kind,fields', [
        (AggregatorKind.LOGSUMEXP_MEAN, {}),
        (AggregatorKind.QUASI_ARITHMETIC, {'g': MonotoneMapSpec(kind='ln')}),
        (AggregatorKind.MAX, {}),
        (AggregatorKind.MIN, {}),
    ])
    def test_other_aggregators(self, kind, fields):
        model = make_model(kind, seed=7, **fields)
        assert grad_check(model, self.batch()).passed

    def test_small_skewed_gradient_fails(self, monkeypatch):
        model = make_model(AggregatorKind.POWER_MEAN, p=1.0, learnable=True, seed=6)
        exact_backward = oracles.backward

        def skewed(*args, **kwargs):
            grads = exact_backward(*args, **kwargs)
            grads.p *= 1.005
            return grads

        monkeypatch.setattr(oracles, 'backward', skewed)
        report = grad_check(model, self.batch())
        assert not report.passed
        assert report.witness['parameter'] == 'p'

    def test_parameters_restored(self):
        model = make_model(AggregatorKind.POWER_MEAN, p=1.0, learnable=True, seed=6)
        before = model.get_flat().copy()
        grad_check(model, self.batch())
        assert np.array_equal(model.get_flat(), before)

    def test_max_ties_are_skipped(self):
        model = make_model(AggregatorKind.MAX, d=1, latent=2, seed=4)
        theta = model.get_flat()
        for i, name in enumerate(model.flat_parameter_names()):
            if name.startswith('phi.W0['):
                theta[i] = 0.0
        model.set_flat(theta)
        batch = SetBatch.from_sets([np.array([[1.0], [-1.0]])], [100.0])
        report = grad_check(model, batch)
        assert report.skipped >= 1

    def test_step_outside_range_rejected(self):
        with pytest.raises(ConfigurationError):
            grad_check(make_model(), self.batch(), h=1e-2)


class TestSumIsomorphism:
    @pytest.mark.parametrize('kind', ['identity', 'ln'])
    def test_passes(self, kind, positive_sets):
        report = check_sum_isomorphism(MonotoneMapSpec(kind=kind), positive_sets)
        assert report.passed
        assert report.name == f'sum_isomorphism[{kind}]'

    def test_ln_handles_large_values(self):
        sets = [np.array([[300.0], [310.0], [305.0]])]
        assert check_sum_isomorphism(MonotoneMapSpec(kind='ln'), sets).passed

    def test_ln_beyond_exp_overflow(self):
        sets = [np.array([[800.0], [790.0], [805.0]])]
        report = check_sum_isomorphism(MonotoneMapSpec(kind='ln'), sets)
        assert report.passed
        assert report.worst_violation <= 1e-12
