import json

import numpy as np
import pytest

from sparseblp.model_core import (
    ConfigurationError,
    Dataset,
    MarketData,
    ModelConfig,
    Theta,
    canonicalize_gamma,
    compute_indices,
    group_index_matrix,
    load_dataset_csv,
    load_model_config,
    save_dataset_csv,
    save_model_config,
    validate_dataset,
)

from conftest import random_market, random_theta


def cfg(J=3, L=4, G=2, K=2, n=2, partition=(1, 1, 2, 2)):
    return ModelConfig(n_markets=n, J=J, L=L, G=G, K=K, partition=partition)


class TestModelConfig:
    def test_partition_must_be_total(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(n_markets=1, J=2, L=3, G=2, K=1, partition=(1, 1))

    def test_every_group_needs_a_member(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(n_markets=1, J=2, L=3, G=2, K=1, partition=(1, 1, 1))

    def test_labels_must_lie_in_range(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(n_markets=1, J=2, L=2, G=1, K=1, partition=(1, 3))

    def test_group_members(self):
        c = cfg()
        members = c.group_members
        assert [m.tolist() for m in members] == [[0, 1], [2, 3]]
        assert c.n_moments == 6
        assert c.n_params == 8


class TestTheta:
    def test_stacking_order_is_beta_then_gamma(self):
        th = Theta(beta=np.array([1.0, 2.0]), gamma=np.array([3.0, 4.0]))
        assert th.stacked().tolist() == [1.0, 2.0, 3.0, 4.0]
        back = Theta.from_stacked(th.stacked())
        assert back.beta.tolist() == [1.0, 2.0]
        assert back.gamma.tolist() == [3.0, 4.0]

    def test_unequal_blocks_rejected(self):
        with pytest.raises(ConfigurationError):
            Theta(beta=np.zeros(2), gamma=np.zeros(3))

    def test_canonicalize_flips_negative_groups(self):
        c = cfg()
        th = Theta(beta=np.array([1.0, -1, 0, 0]), gamma=np.array([-2.0, 1.0, 0.5, 0.2]))
        out = canonicalize_gamma(th, c)
        # group 1 flips (largest |.| is -2), group 2 already positive
        assert out.gamma.tolist() == [2.0, -1.0, 0.5, 0.2]
        assert out.beta.tolist() == th.beta.tolist()
        # involution on already-canonical input
        again = canonicalize_gamma(out, c)
        assert np.array_equal(again.gamma, out.gamma)


class TestComputeIndices:
    def test_zero_theta_gives_zero_indices(self, rng):
        c = cfg()
        m = random_market(rng, c)
        nu = compute_indices(m, Theta.zeros(c.L), c)
        assert np.all(nu == 0.0)

    def test_hand_example(self):
        c = ModelConfig(n_markets=1, J=1, L=2, G=1, K=1, partition=(1, 1))
        m = MarketData(X=np.array([[1.0, 2.0]]), S=np.array([0.5]), H=np.ones((1, 1)))
        nu = compute_indices(m, Theta(beta=np.array([1.0, 1.0]), gamma=np.array([0.5, 0.5])), c)
        assert nu[0].tolist() == [3.0, 1.5]

    def test_matches_bruteforce_loop(self, rng):
        c = cfg(J=3, L=4)
        m = random_market(rng, c)
        th = random_theta(rng, c.L)
        nu = compute_indices(m, th, c)
        for j in range(c.J):
            assert nu[j, 0] == pytest.approx(sum(m.X[j, l] * th.beta[l] for l in range(c.L)), abs=1e-12)
            for g in range(1, c.G + 1):
                manual = sum(m.X[j, l] * th.gamma[l] for l in range(c.L) if c.partition[l] == g)
                assert nu[j, g] == pytest.approx(manual, abs=1e-12)

    def test_linearity_in_theta(self, rng):
        c = cfg()
        m = random_market(rng, c)
        t1, t2 = random_theta(rng, c.L), random_theta(rng, c.L)
        combo = Theta(beta=2 * t1.beta - 3 * t2.beta, gamma=2 * t1.gamma - 3 * t2.gamma)
        lhs = compute_indices(m, combo, c)
        rhs = 2 * compute_indices(m, t1, c) - 3 * compute_indices(m, t2, c)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_group_columns_local_to_their_cell(self, rng):
        c = cfg()
        m = random_market(rng, c)
        th = random_theta(rng, c.L)
        bumped = Theta(beta=th.beta, gamma=th.gamma + np.array([0, 0, 1.0, 0]))
        d = compute_indices(m, bumped, c) - compute_indices(m, th, c)
        assert np.all(d[:, 1] == 0.0)  # attribute 2 belongs to group 2
        assert np.any(d[:, 2] != 0.0)

    def test_group_index_matrix_agrees(self, rng):
        c = cfg()
        m = random_market(rng, c)
        th = random_theta(rng, c.L)
        assert np.allclose(compute_indices(m, th, c)[:, 1:], group_index_matrix(m.X, th.gamma, c))


class TestValidateDataset:
    def test_well_formed_dataset_passes(self, rng):
        c = cfg()
        ds = Dataset(config=c, markets=[random_market(rng, c) for _ in range(c.n_markets)])
        assert validate_dataset(ds) == []

    def test_shares_summing_past_one_flagged(self, rng):
        c = cfg(J=2, L=4, K=2)
        m = random_market(rng, c)
        bad = MarketData(X=m.X, S=np.array([0.6, 0.5]), H=m.H)
        ds = Dataset(config=c, markets=[bad, random_market(rng, c)])
        problems = validate_dataset(ds)
        assert len(problems) == 1 and "sum" in problems[0]

    def test_boundary_share_flagged(self, rng):
        c = cfg(J=2, L=4, K=2)
        m = random_market(rng, c)
        bad = MarketData(X=m.X, S=np.array([0.0, 0.5]), H=m.H)
        problems = validate_dataset(Dataset(config=c, markets=[bad, m]))
        assert any("(0, 1)" in p for p in problems)


class TestSerialization:
    def test_model_config_roundtrip(self, tmp_path):
        c = cfg()
        save_model_config(c, tmp_path / "m.json")
        assert load_model_config(tmp_path / "m.json") == c

    def test_model_config_missing_key(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"n": 1, "J": 2}))
        with pytest.raises(ConfigurationError):
            load_model_config(tmp_path / "m.json")

    def test_dataset_csv_roundtrip(self, rng, tmp_path):
        c = cfg()
        ds = Dataset(config=c, markets=[random_market(rng, c) for _ in range(c.n_markets)])
        save_dataset_csv(ds, tmp_path / "d.csv")
        back = load_dataset_csv(tmp_path / "d.csv", c)
        for m1, m2 in zip(ds.markets, back.markets):
            assert np.allclose(m1.X, m2.X, atol=1e-15)
            assert np.allclose(m1.S, m2.S, atol=1e-15)
            assert np.allclose(m1.H, m2.H, atol=1e-15)
