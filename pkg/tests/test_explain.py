import numpy as np
import pytest

from fgfl.explain import (
    CallableValueFunction,
    EdgeValueFunction,
    ExplainError,
    exact_shapley,
    explain_sample,
    mc_shapley,
    model_similarity,
    node_centrality,
    similarity_matrix,
)
from fgfl.model import forward, init_parameters

from conftest import toy_model_config, toy_sample


def additive_vf(weights):
    weights = np.asarray(weights, dtype=np.float64)

    def fn(mask):
        return sum(w for i, w in enumerate(weights) if mask & (1 << i))

    return CallableValueFunction(len(weights), fn)


def small_gnn_vf(seed=3, max_edges=8):
    sample = toy_sample(seed=seed, v=4, n_layers=1, percentile=99.0)
    config = toy_model_config(sample)
    params = init_parameters(config, seed=seed)
    vf = EdgeValueFunction(params, sample)
    assert vf.n_edges <= max_edges, f"instance has {vf.n_edges} edges"
    return vf, sample, params


class TestExactShapley:
    def test_constant_function_gives_zero(self):
        vf = CallableValueFunction(5, lambda mask: 3.7)
        np.testing.assert_array_equal(exact_shapley(vf), np.zeros(5))

    def test_additive_function_recovers_weights(self):
        weights = (0.5, -1.0, 2.0)
        phi = exact_shapley(additive_vf(weights))
        np.testing.assert_allclose(phi, weights, atol=1e-10)

    def test_efficiency_on_real_gnn(self):
        vf, _, _ = small_gnn_vf()
        phi = exact_shapley(vf)
        assert abs(phi.sum() - (vf.full_value() - vf.empty_value())) < 1e-10

    def test_null_player_gets_zero(self):
        # edge 2 never affects the value
        def fn(mask):
            return (1.0 if mask & 1 else 0.0) + (2.0 if mask & 2 else 0.0)

        phi = exact_shapley(CallableValueFunction(3, fn))
        assert phi[2] == 0.0
        np.testing.assert_allclose(phi[:2], [1.0, 2.0], atol=1e-12)

    def test_symmetry_of_interchangeable_edges(self):
        # edges 0 and 1 contribute identically over every subset
        def fn(mask):
            count = bin(mask & 0b11).count("1")
            bonus = 0.5 if mask & 0b100 else 0.0
            return count * count + bonus

        phi = exact_shapley(CallableValueFunction(3, fn))
        assert phi[0] == pytest.approx(phi[1], abs=1e-12)

    def test_enumeration_guard(self):
        with pytest.raises(ExplainError, match="mc_shapley"):
            exact_shapley(CallableValueFunction(21, lambda m: 0.0))

    def test_edge_reindexing_invariance(self):
        weights = np.array([0.3, -0.7, 1.4, 0.9])
        phi = exact_shapley(additive_vf(weights))
        perm = [2, 0, 3, 1]
        permuted = additive_vf(weights[perm])
        phi_perm = exact_shapley(permuted)
        np.testing.assert_allclose(phi_perm, phi[perm], atol=1e-12)


class TestMcShapley:
    def test_constant_function_exactly_zero(self):
        vf = CallableValueFunction(6, lambda mask: -2.0)
        np.testing.assert_array_equal(mc_shapley(vf, m_samples=25, seed=1), np.zeros(6))

    def test_additive_function_zero_variance(self):
        weights = (1.0, 2.0, -0.5)
        phi = mc_shapley(additive_vf(weights), m_samples=3, seed=0)
        np.testing.assert_allclose(phi, weights, atol=1e-12)

    def test_seeded_determinism_is_bitwise(self):
        vf, _, _ = small_gnn_vf()
        a = mc_shapley(vf, m_samples=50, seed=9)
        b = mc_shapley(vf, m_samples=50, seed=9)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, mc_shapley(vf, m_samples=50, seed=10))

    def test_converges_to_exact_on_gnn_instance(self):
        vf, _, _ = small_gnn_vf()
        exact = exact_shapley(vf)
        estimate = mc_shapley(vf, m_samples=4000, seed=2)
        spread = exact.max() - exact.min()
        assert spread > 0
        assert np.abs(estimate - exact).max() < 0.05 * spread

    def test_invalid_sample_count(self):
        with pytest.raises(ExplainError):
            mc_shapley(CallableValueFunction(2, lambda m: 0.0), m_samples=0)


class TestEdgeValueFunction:
    def test_full_subset_matches_unmasked_prediction(self):
        vf, sample, params = small_gnn_vf()
        assert vf.full_value() == forward(sample, params)

    def test_cache_hits_are_consistent(self):
        vf, _, _ = small_gnn_vf()
        mask = vf.subset_mask([0, 2])
        assert vf.value(mask) == vf.value(mask)
        assert len(vf._cache) >= 1

    def test_self_loops_survive_empty_subset(self):
        vf, sample, params = small_gnn_vf()
        # prediction stays finite with every explained edge removed
        assert np.isfinite(vf.empty_value())


class TestNodeCentrality:
    def test_equal_phi_gives_equal_centrality(self):
        edges = [(0, (0, 1)), (0, (1, 2)), (0, (0, 2))]
        cent = node_centrality(np.array([0.6, 0.6, 0.6]), edges)
        assert set(cent.values()) == {0.6}

    def test_star_graph_single_active_edge(self):
        edges = [(0, (0, 1)), (0, (0, 2)), (0, (0, 3))]
        phi = np.array([0.9, 0.0, 0.0])
        cent = node_centrality(phi, edges)
        assert cent[(0, 1)] == pytest.approx(0.9)
        assert cent[(0, 2)] == 0.0 and cent[(0, 3)] == 0.0
        assert cent[(0, 0)] == pytest.approx(0.9 / 3)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(6)
        edges = [(0, (u, v)) for u in range(6) for v in range(u + 1, 6) if rng.random() < 0.5]
        phi = rng.normal(size=len(edges))
        cent = node_centrality(phi, edges)
        for layer, vertex in cent:
            incident = [abs(p) for p, (li, (u, v)) in zip(phi, edges) if li == layer and vertex in (u, v)]
            assert cent[(layer, vertex)] == pytest.approx(sum(incident) / len(incident))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ExplainError):
            node_centrality(np.zeros(2), [(0, (0, 1))])


class TestExplainSample:
    def test_exact_mode_auto_selected_and_efficient(self):
        _, sample, params = small_gnn_vf()
        report = explain_sample(params, sample, seed=0)
        assert report.method == "exact"
        assert report.efficiency_residual < 1e-9
        assert len(report.edges) == len(report.phi)
        assert report.provenance  # tags carried through for plotting

    def test_json_and_csv_outputs(self, tmp_path):
        _, sample, params = small_gnn_vf()
        report = explain_sample(params, sample, seed=0)
        report.write(tmp_path / "r.json", tmp_path / "r.csv")
        import json

        blob = json.loads((tmp_path / "r.json").read_text())
        assert len(blob["edges"]) == len(report.edges)
        header, *rows = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert header.split(",")[:4] == ["layer", "u", "v", "phi"]
        assert len(rows) == len(report.edges)


class TestModelSimilarity:
    def test_identical_vectors(self):
        u = np.array([1.0, 2.0, 3.0])
        assert model_similarity(u, u) == 1.0

    def test_opposite_vectors(self):
        u = np.array([1.0, -2.0])
        assert model_similarity(u, -u) == pytest.approx(0.0, abs=1e-15)

    def test_hand_computed_value(self):
        assert model_similarity(np.array([3.0, 0.0]), np.array([0.0, 4.0])) == pytest.approx(
            1.0 - 5.0 / 7.0
        )

    def test_zero_vectors_count_as_identical(self):
        assert model_similarity(np.zeros(4), np.zeros(4)) == 1.0

    def test_bounds_and_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            u = rng.normal(size=10) * 10.0 ** rng.integers(-2, 3)
            v = rng.normal(size=10)
            s = model_similarity(u, v)
            assert 0.0 <= s <= 1.0
            assert s == pytest.approx(model_similarity(v, u), abs=1e-15)

    def test_orthogonal_transform_invariance(self):
        rng = np.random.default_rng(4)
        u = rng.normal(size=6)
        v = rng.normal(size=6)
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        assert model_similarity(q @ u, q @ v) == pytest.approx(model_similarity(u, v), abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ExplainError):
            model_similarity(np.zeros(3), np.zeros(4))


class TestSimilarityMatrix:
    def test_identical_models_all_ones(self):
        u = np.array([1.0, 2.0])
        m = similarity_matrix({"a": u, "b": u.copy()})
        np.testing.assert_array_equal(m.values, np.ones((2, 2)))
        assert m.overall_mean == 1.0

    def test_symmetry_and_unit_diagonal(self):
        rng = np.random.default_rng(1)
        m = similarity_matrix({f"m{i}": rng.normal(size=8) for i in range(4)})
        np.testing.assert_array_equal(np.diag(m.values), np.ones(4))
        np.testing.assert_array_equal(m.values, m.values.T)

    def test_subgroup_means_match_hand_average(self):
        vecs = {
            "a1": np.array([1.0, 0.0]),
            "a2": np.array([0.9, 0.1]),
            "b1": np.array([0.0, 1.0]),
        }
        groups = {"a1": "left", "a2": "left", "b1": "right"}
        m = similarity_matrix(vecs, groups)
        i, j = m.labels.index("a1"), m.labels.index("a2")
        assert m.subgroup_means()["left"] == pytest.approx(m.values[i, j])
        overall = (
            m.values[0, 1] + m.values[0, 2] + m.values[1, 2]
        ) / 3.0
        assert m.overall_mean == pytest.approx(overall)

    def test_needs_two_models(self):
        with pytest.raises(ExplainError):
            similarity_matrix({"only": np.zeros(2)})
