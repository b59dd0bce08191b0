from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policy_phases.dataset import (
    HALFCHEETAH_SCHEMA,
    BranchSpec,
    Episode,
    FeatureSchema,
    SyntheticConfig,
    TrajectoryDataset,
    generate_synthetic,
    labels_by_episode,
    load_schema,
    load_trajectories,
    parse_branch,
    simplex_anchors,
    write_schema,
    write_trajectories,
)
from policy_phases.errors import ConfigError, DataError, ParseError, SchemaError
from policy_phases.phase_graph import conditional_entropy, transition_counts

from .conftest import dataset_from_lengths


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


SMALL_SCHEMA = FeatureSchema(("p", "q"), ("u",))


class TestSchema:
    def test_duplicate_names_rejected(self):
        with pytest.raises(SchemaError):
            FeatureSchema(("a", "a"), ("u",))

    def test_needs_one_feature_each(self):
        with pytest.raises(SchemaError):
            FeatureSchema((), ("u",))
        with pytest.raises(SchemaError):
            FeatureSchema(("a",), ())

    def test_halfcheetah_labels(self):
        s = HALFCHEETAH_SCHEMA
        assert s.n_states == 17 and s.n_actions == 6
        assert s.state_names[0] == "Root Z"
        assert s.state_names[1] == "Root Ang"
        assert s.state_names[7] == "F-Foot"
        assert s.state_names[10] == "Vel Root Ang"
        assert s.state_names[16] == "Vel F-Foot"
        assert s.action_names == ("B-Thigh", "B-Shin", "B-Foot", "F-Thigh", "F-Shin", "F-Foot")
        assert s.state_units[0] == "m" and s.state_units[8] == "m/s" and s.state_units[10] == "rad/s"

    def test_schema_file_roundtrip(self, tmp_path):
        write_schema(HALFCHEETAH_SCHEMA, tmp_path / "s.toml")
        assert load_schema(tmp_path / "s.toml") == HALFCHEETAH_SCHEMA

    def test_schema_file_missing_key(self, tmp_path):
        (tmp_path / "s.toml").write_text('state_names = ["a"]\n')
        with pytest.raises(SchemaError):
            load_schema(tmp_path / "s.toml")


class TestLoad:
    def test_two_episodes_three_steps(self, tmp_path):
        rows = ["episode,step,s_p,s_q,a_u"]
        for e in range(2):
            for t in range(3):
                rows.append(f"{e},{t},{0.1 * t},{e},{t - 1}")
        ds = load_trajectories(_write(tmp_path / "t.csv", rows), SMALL_SCHEMA)
        assert len(ds.episodes) == 2
        assert ds.n_transitions == 4
        assert ds.states.shape == (6, 2)
        np.testing.assert_array_equal(ds.step_index, [0, 1, 2, 0, 1, 2])

    def test_halfcheetah_file(self, tmp_path):
        s = HALFCHEETAH_SCHEMA
        rng = np.random.default_rng(1)
        ds = TrajectoryDataset((Episode(0, rng.normal(size=(4, 17)), rng.uniform(-1, 1, size=(4, 6))),), s)
        write_trajectories(ds, tmp_path / "hc.csv")
        back = load_trajectories(tmp_path / "hc.csv", s)
        assert back.schema.state_names == s.state_names
        assert back.schema.action_names == s.action_names
        assert back.equals(ds)

    def test_skipped_step(self, tmp_path):
        rows = ["episode,step,s_p,s_q,a_u", "0,0,1,1,1", "0,2,1,1,1"]
        with pytest.raises(DataError, match="non-consecutive steps"):
            load_trajectories(_write(tmp_path / "t.csv", rows), SMALL_SCHEMA)

    def test_malformed_row_names_line(self, tmp_path):
        rows = ["episode,step,s_p,s_q,a_u", "0,0,1,1,1", "0,1,1,oops,1"]
        with pytest.raises(ParseError, match="line 3"):
            load_trajectories(_write(tmp_path / "t.csv", rows), SMALL_SCHEMA)

    def test_wrong_field_count(self, tmp_path):
        rows = ["episode,step,s_p,s_q,a_u", "0,0,1,1"]
        with pytest.raises(ParseError, match="line 2"):
            load_trajectories(_write(tmp_path / "t.csv", rows), SMALL_SCHEMA)

    def test_dimension_mismatch(self, tmp_path):
        rows = ["episode,step,s_p,a_u", "0,0,1,1", "0,1,1,1"]
        with pytest.raises(SchemaError):
            load_trajectories(_write(tmp_path / "t.csv", rows), SMALL_SCHEMA)

    def test_renamed_column(self, tmp_path):
        rows = ["episode,step,s_p,s_z,a_u", "0,0,1,1,1", "0,1,1,1,1"]
        with pytest.raises(SchemaError):
            load_trajectories(_write(tmp_path / "t.csv", rows), SMALL_SCHEMA)

    @pytest.mark.parametrize("bad", ["nan", "inf", "-inf"])
    def test_non_finite(self, tmp_path, bad):
        rows = ["episode,step,s_p,s_q,a_u", "0,0,1,1,1", f"0,1,1,{bad},1"]
        with pytest.raises(DataError):
            load_trajectories(_write(tmp_path / "t.csv", rows), SMALL_SCHEMA)

    def test_split_episode(self, tmp_path):
        rows = ["episode,step,s_p,s_q,a_u", "0,0,1,1,1", "0,1,1,1,1", "1,0,1,1,1", "1,1,1,1,1", "0,2,1,1,1"]
        with pytest.raises(DataError, match="contiguous"):
            load_trajectories(_write(tmp_path / "t.csv", rows), SMALL_SCHEMA)

    def test_single_step_episode(self, tmp_path):
        rows = ["episode,step,s_p,s_q,a_u", "0,0,1,1,1"]
        with pytest.raises(DataError):
            load_trajectories(_write(tmp_path / "t.csv", rows), SMALL_SCHEMA)

    def test_empty_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_trajectories(_write(tmp_path / "t.csv", ["episode,step,s_p,s_q,a_u"]), SMALL_SCHEMA)


@settings(max_examples=25, deadline=None)
@given(
    lengths=st.lists(st.integers(2, 6), min_size=1, max_size=4),
    seed=st.integers(0, 2**16),
    scale=st.sampled_from([1e-300, 1e-8, 1.0, 1e12, 1e300]),
)
def test_csv_roundtrip_is_exact(tmp_path_factory, lengths, seed, scale):
    ds = dataset_from_lengths(lengths, ds=3, da=2, seed=seed)
    ds = TrajectoryDataset(
        tuple(Episode(ep.episode_id, ep.states * scale, ep.actions) for ep in ds.episodes), ds.schema
    )
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    write_trajectories(ds, path)
    back = load_trajectories(path, ds.schema)
    assert back.equals(ds)
    write_trajectories(back, path.with_name("again.csv"))
    assert path.read_bytes() == path.with_name("again.csv").read_bytes()


class TestSynthetic:
    def test_deterministic_schedule(self):
        cfg = SyntheticConfig(n_phases=4, steps_per_phase=10, episodes=1, steps=40, noise_sigma=0.0)
        _, labels = generate_synthetic(cfg)
        np.testing.assert_array_equal(labels.labels, np.repeat([0, 1, 2, 3], 10))

    def test_states_sit_on_anchors_without_noise(self):
        cfg = SyntheticConfig(n_phases=5, episodes=1, steps=20, noise_sigma=0.0)
        ds, labels, truth = generate_synthetic(cfg, return_truth=True)
        np.testing.assert_array_equal(ds.states, truth.anchors[labels.labels])

    @pytest.mark.parametrize("P, dim", [(3, 2), (3, 3), (5, 5), (10, 10), (4, 6)])
    def test_anchors_regular_unit_simplex(self, P, dim):
        a = simplex_anchors(P, dim)
        assert a.shape == (P, dim)
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)
        d = np.linalg.norm(a[:, None] - a[None], axis=2)[np.triu_indices(P, 1)]
        np.testing.assert_allclose(d, d[0], atol=1e-12)
        # separation is at least 6 default noise sigmas
        assert d[0] >= 6 * SyntheticConfig().noise_sigma

    def test_bit_identical_reruns(self):
        cfg = SyntheticConfig(n_phases=3, episodes=2, steps=50, seed=7)
        a, la = generate_synthetic(cfg)
        b, lb = generate_synthetic(cfg)
        assert a.equals(b)
        np.testing.assert_array_equal(la.labels, lb.labels)

    def test_seed_changes_data(self):
        a, _ = generate_synthetic(SyntheticConfig(seed=1, steps=50))
        b, _ = generate_synthetic(SyntheticConfig(seed=2, steps=50))
        assert not a.equals(b)

    def test_branch_successors_balanced(self):
        cfg = SyntheticConfig(n_phases=4, episodes=4, steps=4000, branch=BranchSpec(3, 0, 1, 0.5), seed=3)
        ds, labels = generate_synthetic(cfg)
        m = transition_counts(labels, ds)
        row = m.counts[3]
        assert set(np.flatnonzero(row)) == {0, 1}
        n = row.sum()
        # within 3 sigma of a fair coin
        assert abs(row[0] - n / 2) <= 3 * np.sqrt(n / 4)

    def test_linear_actions(self):
        cfg = SyntheticConfig(n_phases=3, steps=100, action_noise=0.0, seed=4)
        ds, labels, truth = generate_synthetic(cfg, return_truth=True)
        expected = np.einsum("tij,tj->ti", truth.action_matrices[labels.labels], ds.states)
        np.testing.assert_allclose(ds.actions, expected, atol=1e-12)

    def test_zero_noise_ground_truth_entropy_is_zero(self):
        cfg = SyntheticConfig(n_phases=6, episodes=3, steps=200, noise_sigma=0.0)
        ds, labels = generate_synthetic(cfg)
        assert conditional_entropy(transition_counts(labels, ds)) == 0.0

    def test_dwell_adds_self_transitions(self):
        # with dwell L the row is (L-1)/L self-loop and 1/L advance, so H_c is no longer 0
        cfg = SyntheticConfig(n_phases=6, steps_per_phase=3, episodes=3, steps=200, noise_sigma=0.0)
        ds, labels = generate_synthetic(cfg)
        m = transition_counts(labels, ds)
        assert np.all(np.diag(m.counts) > 0)
        assert conditional_entropy(m) > 0

    def test_feature_branch_uses_gain_column(self):
        spec = BranchSpec(2, 0, 3, 0.5, feature=1, gain=1.5)
        cfg = SyntheticConfig(n_phases=5, steps=400, branch=spec, action_noise=0.0, seed=5)
        ds, labels, truth = generate_synthetic(cfg, return_truth=True)
        np.testing.assert_array_equal(truth.branch_matrix[:, 1], 1.5)
        # runs exiting to target_b follow the branch matrix
        for (e, start), nxt in truth.exits.items():
            row = int(ds.episode_offsets[e]) + start
            M = truth.branch_matrix if nxt == 3 else truth.action_matrices[2]
            np.testing.assert_allclose(ds.actions[row], M @ ds.states[row], atol=1e-12)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(n_phases=1),
            dict(noise_sigma=-0.1),
            dict(steps=1),
            dict(state_dim=2, n_phases=5),
            dict(branch=BranchSpec(0, 1, 9, 0.5)),
            dict(branch=BranchSpec(0, 1, 2, 1.5)),
        ],
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ConfigError):
            SyntheticConfig(**kwargs)

    def test_short_run_missing_phase(self):
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticConfig(n_phases=5, episodes=1, steps=3))


def test_parse_branch():
    assert parse_branch("5:0:6:0.5") == BranchSpec(5, 0, 6, 0.5)
    assert parse_branch("5:0:6:0.25:3:2.0") == BranchSpec(5, 0, 6, 0.25, 3, 2.0)
    with pytest.raises(ConfigError):
        parse_branch("5:0")


def test_labels_by_episode():
    ds = dataset_from_lengths([2, 3])
    parts = labels_by_episode(ds, [0, 1, 1, 0, 1])
    assert [p.tolist() for p in parts] == [[0, 1], [1, 0, 1]]


def test_standardized():
    ds = dataset_from_lengths([50, 50], ds=3, seed=2)
    z = ds.standardized().states
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-12)


def test_arrays_are_read_only():
    ds = dataset_from_lengths([3])
    with pytest.raises(ValueError):
        ds.states[0, 0] = 1.0
