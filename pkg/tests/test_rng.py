"""Stream addressing, determinism, and the Gaussian sampler."""

import numpy as np
import pytest

from dpfedsim.rng import RngStream, StreamLabel, gaussian_vector


class TestRngStream:
    def test_same_address_same_draws(self):
        a = RngStream(42, StreamLabel.SAMPLING, round_index=7)
        b = RngStream(42, StreamLabel.SAMPLING, round_index=7)
        np.testing.assert_array_equal(a.generator().random(100), b.generator().random(100))

    def test_labels_give_distinct_streams(self):
        draws = {
            label: RngStream(42, label, round_index=3).generator().random(32).tobytes()
            for label in StreamLabel
        }
        assert len(set(draws.values())) == len(StreamLabel)

    def test_rounds_and_substreams_give_distinct_streams(self):
        seen = set()
        for round_index in range(5):
            for substream in range(5):
                stream = RngStream(0, StreamLabel.DATA_GEN, round_index, substream)
                seen.add(stream.generator().random(16).tobytes())
        assert len(seen) == 25

    def test_master_seed_changes_everything(self):
        a = RngStream(1, StreamLabel.UPDATE_NOISE, 0).generator().random(16)
        b = RngStream(2, StreamLabel.UPDATE_NOISE, 0).generator().random(16)
        assert not np.array_equal(a, b)

    def test_stream_isolation(self):
        """Consuming extra draws from one stream leaves another untouched."""
        noisy = RngStream(9, StreamLabel.COUNT_NOISE, 0)
        noisy.generator().random(10_000)
        before = RngStream(9, StreamLabel.SAMPLING, 0).generator().random(64)
        noisy.generator().random(10_000)
        after = RngStream(9, StreamLabel.SAMPLING, 0).generator().random(64)
        np.testing.assert_array_equal(before, after)

    @pytest.mark.parametrize("field", ["master_seed", "round_index", "substream"])
    def test_rejects_out_of_range_words(self, field):
        kwargs = dict(master_seed=0, label=StreamLabel.SAMPLING, round_index=0, substream=0)
        kwargs[field] = 2**64
        with pytest.raises(ValueError):
            RngStream(**kwargs)
        kwargs[field] = -1
        with pytest.raises(ValueError):
            RngStream(**kwargs)


class TestGaussianVector:
    def test_zero_stddev_is_zero_vector(self):
        out = gaussian_vector(RngStream(0, StreamLabel.UPDATE_NOISE, 0), 17, 0.0)
        np.testing.assert_array_equal(out, np.zeros(17))

    def test_zero_dim(self):
        assert gaussian_vector(RngStream(0, StreamLabel.UPDATE_NOISE, 0), 0, 1.0).shape == (0,)

    def test_same_address_twice_identical(self):
        stream = RngStream(5, StreamLabel.UPDATE_NOISE, 11)
        np.testing.assert_array_equal(
            gaussian_vector(stream, 101, 2.5), gaussian_vector(stream, 101, 2.5)
        )

    def test_stddev_scales_linearly(self):
        stream = RngStream(3, StreamLabel.COUNT_NOISE, 2)
        unit = gaussian_vector(stream, 50, 1.0)
        np.testing.assert_allclose(gaussian_vector(stream, 50, 3.0), 3.0 * unit, rtol=1e-15)

    def test_moments_million_draws(self):
        """Sample mean within +-0.004 and stddev within +-0.5% of 1."""
        draws = gaussian_vector(RngStream(123, StreamLabel.UPDATE_NOISE, 0), 10**6, 1.0)
        assert abs(float(draws.mean())) < 0.004
        assert abs(float(draws.std()) - 1.0) < 0.005

    def test_all_finite_near_uniform_edges(self):
        # 1 - u in (0, 1] keeps the Box-Muller log finite for any uniforms.
        draws = gaussian_vector(RngStream(77, StreamLabel.UPDATE_NOISE, 1), 10**5, 1.0)
        assert np.all(np.isfinite(draws))

    def test_rejects_negative_args(self):
        stream = RngStream(0, StreamLabel.UPDATE_NOISE, 0)
        with pytest.raises(ValueError):
            gaussian_vector(stream, -1, 1.0)
        with pytest.raises(ValueError):
            gaussian_vector(stream, 4, -0.1)

    def test_odd_and_even_dims(self):
        stream = RngStream(1, StreamLabel.UPDATE_NOISE, 0)
        assert gaussian_vector(stream, 7, 1.0).shape == (7,)
        # An odd request consumes the same uniforms as the next even one.
        np.testing.assert_array_equal(
            gaussian_vector(stream, 7, 1.0), gaussian_vector(stream, 8, 1.0)[:7]
        )
