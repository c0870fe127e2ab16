import numpy as np
import pytest

from fbnll_simulator.Errors import ConfigError, ShapeError
from fbnll_simulator.FeatureMapper import FeatureMapper
from fbnll_simulator.SimilarityMatrix import build_similarity_matrix
from fbnll_simulator.SyntheticData import SyntheticSpec, generate_synthetic
from fbnll_simulator.UserPartition import FederationConfig, partition_users


class TestSyntheticData:

    def test_exact_class_counts(self):
        ds = generate_synthetic(SyntheticSpec(num_classes=4, classes_per_task=2, samples_per_class=25), seed=0)
        assert ds.class_histogram(4).tolist() == [25, 25, 25, 25]
        assert ds.sample_ids.tolist() == list(range(100))
        assert ds.dim == 4

    def test_seeded(self):
        spec = SyntheticSpec(samples_per_class=10)
        np.testing.assert_array_equal(generate_synthetic(spec, 3).features, generate_synthetic(spec, 3).features)
        assert not np.array_equal(generate_synthetic(spec, 3).features, generate_synthetic(spec, 4).features)

    def test_dimension_below_class_count(self):
        with pytest.raises(ShapeError):
            generate_synthetic(SyntheticSpec(num_classes=6, dim=4), seed=0)

    def test_negative_separation(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(separation=-1.0)

    def test_well_separated_classes(self):
        spec = SyntheticSpec(samples_per_class=200, dim=8, separation=6.0)
        ds = generate_synthetic(spec, seed=1)
        means = spec.separation * np.eye(6, 8)
        nearest = np.argmin(((ds.features[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
        assert np.mean(nearest == ds.true_labels) > 0.99

    def test_no_separation_makes_users_alike(self):
        spec = SyntheticSpec(samples_per_class=1000, dim=8, separation=0.0)
        ds = generate_synthetic(spec, seed=2)
        part = partition_users(ds, spec.task_spec(), FederationConfig(users=4, clusters=2, classes=6))
        R = build_similarity_matrix(part, FeatureMapper())
        assert np.all(R.values > 0.8)
