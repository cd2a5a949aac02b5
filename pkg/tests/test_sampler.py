import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from conftest import sequence_of
from covariance import ModelParams, stationary_covariance
from sampler import (
    BINARY_HEADER,
    PathBatch,
    SamplingGrid,
    build_cov_sequence,
    circulant_sample,
    covariance_values,
    embedding_plan,
    read_path_batch,
    sample_autocovariance,
    simulate_block,
    write_path_batch,
    write_path_csv,
    z_to_x,
)
from utils import DomainError, EmbeddingError, ReportError


def ar1_sequence(phi: float, n: int = 65, delta: float = 1.0):
    return sequence_of(phi ** np.arange(n), delta)


# ---------------------------------------------------------------------------
# Grids and sequences
# ---------------------------------------------------------------------------


class TestGrid:
    def test_horizon_and_times(self):
        grid = SamplingGrid(4, 0.25)
        assert grid.horizon == 1.0
        np.testing.assert_allclose(grid.times, [0.0, 0.25, 0.5, 0.75])

    @pytest.mark.parametrize("n, delta", [(0, 1.0), (4, 0.0), (4, -1.0)])
    def test_rejects_bad_grid(self, n, delta):
        with pytest.raises(DomainError):
            SamplingGrid(n, delta)

    def test_sequence_length_must_match(self):
        from sampler import CovSequence

        with pytest.raises(DomainError):
            CovSequence(grid=SamplingGrid(3, 1.0), values=np.array([1.0, 0.5]))


class TestCovarianceValues:
    def test_custom_sequence_is_zero_padded(self):
        cov = stationary_covariance(ModelParams.custom([1.0, 0.5]))
        np.testing.assert_array_equal(covariance_values(cov, 0.1, 4), [1.0, 0.5, 0.0, 0.0])
        np.testing.assert_array_equal(covariance_values(cov, 0.1, 4, start=1), [0.5, 0.0, 0.0])

    def test_model_sequence_follows_grid(self, fou1_cov):
        seq = build_cov_sequence(fou1_cov, SamplingGrid(5, 0.5))
        assert seq.rho0 == pytest.approx(fou1_cov.rho0, rel=1e-6)
        assert seq.values[2] == pytest.approx(fou1_cov(1.0))

    def test_lag_values_extend_past_grid(self, fou1_cov):
        seq = build_cov_sequence(fou1_cov, SamplingGrid(3, 0.5))
        extended = seq.lag_values(5)
        assert extended.shape == (5,)
        assert extended[4] == pytest.approx(fou1_cov(2.0))


# ---------------------------------------------------------------------------
# Circulant embedding
# ---------------------------------------------------------------------------


class TestEmbedding:
    @pytest.mark.parametrize("n, length", [(1, 1), (2, 2), (3, 4), (65, 128), (100, 256)])
    def test_fft_length_is_power_of_two(self, n, length):
        assert embedding_plan(ar1_sequence(0.5, n)).fft_length == length

    @settings(max_examples=30, deadline=None)
    @given(st.floats(min_value=0.0, max_value=0.9))
    def test_convex_decreasing_sequence_embeds(self, phi):
        plan = embedding_plan(ar1_sequence(phi))
        assert plan.doublings == 0
        assert plan.min_eigenvalue >= -1e-8
        assert plan.clipped_mass == 0.0

    def test_not_positive_definite_is_rejected(self):
        with pytest.raises(EmbeddingError) as info:
            embedding_plan(sequence_of([1.0, 1.0, -1.0]))
        assert info.value.fft_length == 64
        assert info.value.clipped_mass > 1e-4

    @pytest.mark.parametrize("delta", [0.1, 0.5, 1.0])
    def test_fou1_embeds_with_little_clipping(self, fou1_cov, delta):
        plan = embedding_plan(build_cov_sequence(fou1_cov, SamplingGrid(64, delta)))
        assert plan.clipped_mass <= 1e-4


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


class TestCirculantSample:
    def test_shape_and_kind(self):
        batch = circulant_sample(ar1_sequence(0.5), reps=10, seed=1, block_size=4)
        assert batch.data.shape == (10, 65)
        assert batch.kind == "Z"
        assert list(batch.substreams) == list(range(10))

    def test_rejects_zero_reps(self):
        with pytest.raises(DomainError):
            circulant_sample(ar1_sequence(0.5), reps=0, seed=1)

    def test_sample_covariance_matches(self):
        batch = circulant_sample(ar1_sequence(0.5), reps=4000, seed=7, block_size=500)
        np.testing.assert_allclose(sample_autocovariance(batch, 3), [1.0, 0.5, 0.25, 0.125], atol=0.03)

    def test_fou1_marginal_variance(self, fou1_cov):
        seq = build_cov_sequence(fou1_cov, SamplingGrid(64, 0.5))
        batch = circulant_sample(seq, reps=3000, seed=11)
        assert np.var(batch.data) == pytest.approx(fou1_cov.rho0, rel=0.05)

    def test_same_seed_same_paths(self):
        seq = ar1_sequence(0.3)
        first = circulant_sample(seq, reps=20, seed=5, block_size=8)
        second = circulant_sample(seq, reps=20, seed=5, block_size=8)
        np.testing.assert_array_equal(first.data, second.data)

    def test_seeds_differ(self):
        seq = ar1_sequence(0.3)
        first = circulant_sample(seq, reps=5, seed=5)
        second = circulant_sample(seq, reps=5, seed=6)
        assert not np.allclose(first.data, second.data)

    def test_thread_count_does_not_change_paths(self):
        seq = ar1_sequence(0.3)
        serial = circulant_sample(seq, reps=40, seed=3, threads=1, block_size=8)
        parallel = circulant_sample(seq, reps=40, seed=3, threads=3, block_size=8)
        np.testing.assert_array_equal(serial.data, parallel.data)

    def test_block_partition_does_not_change_paths(self):
        seq = ar1_sequence(0.3)
        small = circulant_sample(seq, reps=30, seed=3, block_size=7)
        large = circulant_sample(seq, reps=30, seed=3, block_size=64)
        np.testing.assert_allclose(small.data, large.data, rtol=1e-12, atol=1e-12)

    def test_rows_depend_only_on_their_index(self):
        seq = ar1_sequence(0.3)
        plan = embedding_plan(seq)
        full = circulant_sample(seq, reps=6, seed=9)
        block = simulate_block(plan, (3, 4), seed=9)
        assert block.first_replication == 3
        np.testing.assert_allclose(block.data, full.data[3:5], rtol=1e-12, atol=1e-12)


class TestZToX:
    def test_starts_at_zero_and_subtracts_decay(self):
        seq = ar1_sequence(0.5, n=8, delta=0.5)
        batch = circulant_sample(seq, reps=3, seed=2)
        mapped = z_to_x(batch, rate=2.0)
        assert mapped.kind == "X"
        np.testing.assert_array_equal(mapped.data[:, 0], 0.0)
        expected = batch.data[:, 3] - np.exp(-2.0 * 1.5) * batch.data[:, 0]
        np.testing.assert_allclose(mapped.data[:, 3], expected)

    def test_kind_s_for_second_kind(self):
        batch = circulant_sample(ar1_sequence(0.5, n=8), reps=2, seed=2)
        assert z_to_x(batch, 1.0, kind="S").kind == "S"

    def test_requires_stationary_input(self):
        batch = circulant_sample(ar1_sequence(0.5, n=8), reps=2, seed=2)
        with pytest.raises(DomainError):
            z_to_x(z_to_x(batch, 1.0), 1.0)

    def test_requires_positive_rate(self):
        batch = circulant_sample(ar1_sequence(0.5, n=8), reps=2, seed=2)
        with pytest.raises(DomainError):
            z_to_x(batch, 0.0)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


class TestExport:
    def test_binary_layout(self, tmp_path):
        batch = circulant_sample(ar1_sequence(0.5, n=5, delta=0.25), reps=3, seed=4)
        path = write_path_batch(batch, str(tmp_path / "paths.bin"))
        raw = open(path, "rb").read()
        assert raw[:6] == b"OUSME1"
        assert len(raw) == BINARY_HEADER.size + 8 * 5 * 3

        restored = read_path_batch(path)
        assert restored.grid == batch.grid
        np.testing.assert_array_equal(restored.data, batch.data)

    def test_binary_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "foreign.bin"
        path.write_bytes(b"NOTOUS" + bytes(40))
        with pytest.raises(ReportError):
            read_path_batch(str(path))

    def test_csv_has_replication_column(self, tmp_path):
        batch = PathBatch(grid=SamplingGrid(2, 1.0), data=np.array([[1.0, 2.0], [3.0, 4.0]]), seed=0)
        frame = pd.read_csv(write_path_csv(batch, str(tmp_path / "paths.csv")))
        assert list(frame.columns) == ["replication", "t0", "t1"]
        assert frame["t1"].tolist() == [2.0, 4.0]


@pytest.mark.slow
@pytest.mark.parametrize("params", [ModelParams.fou1(1.0, 0.6), ModelParams.fou2(1.0, 0.75)], ids=["fou1", "fou2"])
def test_sample_autocovariance_within_four_standard_errors(params):
    cov = stationary_covariance(params)
    seq = build_cov_sequence(cov, SamplingGrid(64, 0.5))
    batch = circulant_sample(seq, reps=100_000, seed=2024, threads=4)
    assert batch.embedding.clipped_mass <= 1e-6

    for lag in range(6):
        per_row = np.mean(batch.data[:, : 64 - lag] * batch.data[:, lag:], axis=1)
        se = per_row.std(ddof=1) / np.sqrt(batch.reps)
        assert abs(per_row.mean() - seq.values[lag]) <= 4 * se
