import numpy as np
import pytest

from grokking_lab.models.models import CircuitTag, LogitTensor
from grokking_lab.schemas.schemas import EfficiencyRecord
from grokking_lab.services.circuit_analysis import (
    FourierBasis,
    bucket_index,
    collect_logit_tensor,
    correct_logit_margin,
    correct_logit_mean,
    decomposition_csv,
    gen_only_filter,
    isologit_buckets,
    key_frequencies,
    project_trig,
    residues,
)
from grokking_lab.services.transformer import forward, init_params


def record(logit: float, size: int, norm: float, seed: int = 0) -> EfficiencyRecord:
    return EfficiencyRecord(
        tag=CircuitTag.MEM_ONLY, seed=seed, weight_decay=1.0, dataset_size=size, param_norm=norm,
        correct_logit_train=logit,
    )


class TestBasis:
    @pytest.mark.parametrize("P, K", [(2, 1), (7, 3), (8, 4), (113, 56)])
    def test_frequency_count(self, P, K):
        assert FourierBasis(P).K == K

    @pytest.mark.parametrize("P", [7, 23, 113])
    def test_orthonormal(self, P):
        assert np.allclose(FourierBasis(P).gram(), np.eye(FourierBasis(P).K), atol=1e-10)

    def test_materialized_vectors_are_orthonormal(self):
        basis = FourierBasis(7).materialize()
        assert basis.shape == (3, 343)
        assert np.allclose(basis @ basis.T, np.eye(3), atol=1e-12)

    def test_vector_depends_on_residue_only(self):
        basis = FourierBasis(7)
        v = basis.vector(2)
        assert residues(7)[3, 5, 1] == 0
        assert v[3, 5, 1] == pytest.approx(v[0, 0, 0])
        assert v[1, 2, 3] == pytest.approx(v[0, 0, 0])

    def test_frequency_out_of_range(self):
        with pytest.raises(ValueError):
            FourierBasis(7).vector(4)


class TestProjection:
    def test_matches_brute_force(self, rng):
        Z = rng.normal(size=(7, 7, 7))
        B = FourierBasis(7).materialize()
        coef = B @ Z.reshape(-1)
        decomp = project_trig(Z)
        assert np.allclose(decomp.coefficients, coef, rtol=0, atol=1e-10)
        assert np.allclose(decomp.trig_component.reshape(-1), coef @ B, rtol=0, atol=1e-10)
        assert np.allclose(decomp.trig_component + decomp.mem_component, Z, rtol=0, atol=1e-10)

    def test_idempotent(self, rng):
        Z = rng.normal(size=(11, 11, 11))
        once = project_trig(Z).trig_component
        assert np.allclose(project_trig(once).trig_component, once, rtol=0, atol=1e-9)
        assert project_trig(once).trig_norm_fraction == pytest.approx(1.0)

    def test_residual_is_orthogonal(self, rng):
        Z = rng.normal(size=(7, 7, 7))
        mem = project_trig(Z).mem_component
        assert np.allclose(FourierBasis(7).materialize() @ mem.reshape(-1), 0, atol=1e-12)

    def test_linear(self, rng):
        A = rng.normal(size=(7, 7, 7))
        B = rng.normal(size=(7, 7, 7))
        combined = project_trig(2 * A - 3 * B).trig_component
        expected = 2 * project_trig(A).trig_component - 3 * project_trig(B).trig_component
        assert np.allclose(combined, expected, rtol=0, atol=1e-9)

    def test_pure_wave(self):
        basis = FourierBasis(13)
        decomp = project_trig(LogitTensor(values=5 * basis.vector(4), P=13))
        assert decomp.trig_norm_fraction == pytest.approx(1.0)
        assert key_frequencies(decomp) == [4]
        assert gen_only_filter(decomp)

    def test_constant_tensor_has_no_trig_part(self):
        decomp = project_trig(np.ones((7, 7, 7)))
        assert decomp.trig_norm_fraction == pytest.approx(0.0, abs=1e-20)
        assert key_frequencies(decomp) == []

    def test_zero_tensor(self):
        decomp = project_trig(np.zeros((5, 5, 5)))
        assert decomp.trig_norm_fraction == 0.0
        assert not gen_only_filter(decomp)

    def test_noise_is_mostly_memorization(self, rng):
        decomp = project_trig(rng.normal(size=(23, 23, 23)))
        assert decomp.trig_norm_fraction < 0.05
        assert not gen_only_filter(decomp)

    def test_random_tensor_fraction_at_full_modulus(self, rng):
        expected = 56 / 113 ** 3
        for _ in range(10):
            fraction = project_trig(rng.standard_normal((113, 113, 113))).trig_norm_fraction
            assert expected / 3 < fraction < expected * 3

    def test_wrong_basis_size(self):
        with pytest.raises(ValueError):
            project_trig(np.zeros((5, 5, 5)), FourierBasis(7))

    def test_key_frequencies_pick_the_strongest(self):
        basis = FourierBasis(17)
        Z = 10 * basis.vector(3) + 9 * basis.vector(7) + 0.1 * basis.vector(1)
        assert key_frequencies(project_trig(Z), energy_fraction=0.9) == [3, 7]
        assert key_frequencies(project_trig(Z), energy_fraction=0.5) == [3]

    def test_key_frequencies_from_energy_shares(self):
        basis = FourierBasis(11)
        Z = np.sqrt(0.6) * basis.vector(2) + np.sqrt(0.3) * basis.vector(5) + np.sqrt(0.1) * basis.vector(1)
        assert key_frequencies(project_trig(Z), energy_fraction=0.85) == [2, 5]

    def test_csv(self):
        text = decomposition_csv(project_trig(FourierBasis(5).vector(1)))
        lines = text.splitlines()
        assert lines[0].startswith("# trig_norm_fraction=")
        assert lines[1] == "k,coefficient"
        assert len(lines) == 2 + 2


class TestGenOnlyFilter:
    def test_fraction_and_none(self):
        assert gen_only_filter(0.99)
        assert not gen_only_filter(0.95)
        assert not gen_only_filter(None)

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            gen_only_filter(0.5, threshold=1.5)


class TestCorrectLogits:
    def test_mean_and_margin(self):
        Z = np.zeros((3, 3, 3))
        Z.reshape(9, 3)[0] = [4.0, 1.0, 2.0]
        Z.reshape(9, 3)[5] = [0.0, 3.0, 1.0]
        assert correct_logit_mean(Z, [0, 5], [0, 1]) == pytest.approx(3.5)
        assert correct_logit_margin(Z, [0, 5], [0, 1]) == pytest.approx(2.0)
        assert correct_logit_margin(Z, [0], [1]) == pytest.approx(-3.0)

    def test_empty_ids(self):
        with pytest.raises(ValueError):
            correct_logit_mean(np.zeros((3, 3, 3)), [], [])

    def test_collect_matches_forward(self, tiny_task, tiny_model):
        params = init_params(tiny_model)
        Z = collect_logit_tensor(params, tiny_task, chunk=10)
        assert Z.values.shape == (7, 7, 7)
        tokens = np.array([[3, 7, 5, 8]])
        assert np.allclose(Z.values[3, 5], forward(params, tokens)[0])


class TestIsologit:
    def test_bucket_edges(self):
        edges = np.geomspace(1.0, 100.0, 4)
        idx = bucket_index(np.array([1.0, edges[1], 50.0, 100.0]), edges)
        assert idx.tolist() == [0, 1, 2, 2]

    def test_single_value_range(self):
        assert bucket_index(np.array([2.0, 2.0]), np.array([2.0, 2.0])).tolist() == [0, 0]

    def test_no_correlation_for_a_symmetric_profile(self):
        records = [record(5.0, 100, 1.0), record(5.0, 200, 2.0), record(5.0, 300, 1.0)]
        summary = isologit_buckets(records, n_buckets=1)
        assert summary.correlations["spearman"].iloc[0] == pytest.approx(0.0)

    def test_norm_rising_with_size(self):
        records = [record(2.0 + 0.01 * i, 100 * (i + 1), 1.0 + i) for i in range(5)]
        summary = isologit_buckets(records, n_buckets=1)
        assert summary.correlations["spearman"].iloc[0] == pytest.approx(1.0)
        assert summary.positive_share() == 1.0

    def test_sizes_are_averaged_within_a_bucket(self):
        records = [record(3.0, 100, 1.0, seed=0), record(3.0, 100, 3.0, seed=1), record(3.0, 200, 5.0)]
        points = isologit_buckets(records, n_buckets=1).points
        assert points["mean_param_norm"].tolist() == [2.0, 5.0]
        assert points["n_records"].tolist() == [2, 1]

    def test_single_size_gives_nan(self):
        summary = isologit_buckets([record(3.0, 100, 1.0), record(3.1, 100, 2.0)], n_buckets=1)
        assert np.isnan(summary.correlations["spearman"].iloc[0])

    def test_non_positive_logits_are_excluded(self):
        summary = isologit_buckets([record(-1.0, 100, 1.0), record(0.0, 100, 1.0), record(2.0, 100, 1.0)])
        assert summary.excluded == 2
        assert summary.points["n_records"].sum() == 1

    def test_all_excluded(self):
        summary = isologit_buckets([record(-1.0, 100, 1.0)])
        assert summary.points.empty and summary.correlations.empty

    def test_norm_independent_of_size_gives_no_correlation(self, rng):
        sizes = 100 + 20 * np.arange(50)
        records = [
            EfficiencyRecord(
                tag=CircuitTag.GEN_ONLY, seed=i, weight_decay=1.0, dataset_size=int(size),
                param_norm=float(10 + rng.normal()), correct_logit_train=float(5 + 0.01 * rng.random()),
            )
            for i, size in enumerate(sizes)
        ]
        summary = isologit_buckets(records, n_buckets=1)
        assert summary.correlations["n_records"].iloc[0] == 50
        assert abs(summary.correlations["spearman"].iloc[0]) < 0.3
