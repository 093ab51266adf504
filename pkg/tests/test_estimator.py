import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from biped.config import tiny_config
from biped.errors import DimensionError, InputError
from biped.estimator import BiPedEstimator
from biped.validation import check_binary, check_boxes, check_dataset, check_split


@pytest.fixture(scope="module")
def config():
    return tiny_config(obs_len=15, pred_len=30, ego_future_mode="ground_truth")


class TestEstimator:
    def test_params_and_clone(self, config):
        est = BiPedEstimator(config=config, epochs=2, lr=1e-3)
        params = est.get_params()
        assert params["epochs"] == 2 and params["config"] is config
        twin = clone(est)
        assert twin.get_params()["lr"] == 1e-3 and twin is not est
        est.set_params(alpha=0.2)
        assert est.alpha == 0.2

    def test_fit_predict_score(self, config, small_dataset):
        est = BiPedEstimator(config=config, epochs=2, batch_size=4, lr=1e-3).fit(small_dataset)
        assert est.n_parameters_ == est.model_.num_parameters()
        assert len(est.log_.rows) == 2
        n_test = len(small_dataset.split("test"))
        boxes = est.predict(small_dataset, split="test")
        assert boxes.shape == (n_test, 30, 4)
        proba = est.predict_proba(small_dataset, split="test")
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        assert est.score(small_dataset, split="test") <= 0

    def test_fit_from_path_is_deterministic(self, config, small_dataset_dir, small_dataset):
        a = BiPedEstimator(config=config, epochs=1, batch_size=4).fit(str(small_dataset_dir))
        b = BiPedEstimator(config=config, epochs=1, batch_size=4).fit(small_dataset)
        np.testing.assert_array_equal(a.predict(small_dataset), b.predict(small_dataset))

    def test_unfitted(self, small_dataset):
        with pytest.raises(NotFittedError):
            BiPedEstimator().predict(small_dataset)


class TestValidation:
    def test_check_dataset(self, tmp_path):
        with pytest.raises(InputError):
            check_dataset(tmp_path / "missing")
        with pytest.raises(InputError):
            check_dataset(np.zeros(3))

    def test_check_split(self, small_dataset):
        assert len(check_split(small_dataset, None)) == len(small_dataset)
        with pytest.raises(InputError):
            check_split(small_dataset, "holdout")

    def test_check_boxes(self):
        good = np.array([[[0, 0, 1, 1]]])
        assert check_boxes(good, length=1).dtype == np.float64
        with pytest.raises(DimensionError):
            check_boxes(np.zeros((1, 4)))
        with pytest.raises(DimensionError):
            check_boxes(good, length=2)
        with pytest.raises(InputError):
            check_boxes([[[2, 0, 1, 1]]])
        with pytest.raises(InputError):
            check_boxes([[[0, 0, np.nan, 1]]])

    def test_check_binary(self):
        assert check_binary([True, False]).tolist() == [1, 0]
        with pytest.raises(InputError):
            check_binary([0, 2])
