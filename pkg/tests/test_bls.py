import numpy as np
import pytest

from bls import (
    BlsConfig,
    BlsModel,
    ModelFileError,
    OutsourcedBackend,
    StateError,
    assemble_A,
    build_enhancement_nodes,
    build_feature_nodes,
    class_scores,
    design_matrix,
    evaluate,
    labels_from_scores,
    load_model,
    predict,
    ridge_residual,
    save_model,
    train,
)
from client_outsourcer import LoopbackChannel, ResultRejectedError, local_pinv
from cloud_worker import CloudWorker
from config import PblsConfig
from data import Dataset, one_hot, synthetic_blobs, train_test_split
from matrix_core import DimensionError, InvalidArgumentError, dense_matrix, mat_mul


def single_group_model(w_f, b_f, w_h, b_h, feature_activation='linear', enhancement_activation='tanh'):
    w_f, w_h = np.asarray(w_f, dtype=float), np.asarray(w_h, dtype=float)
    config = BlsConfig(n_feature_groups=1, nodes_per_feature_group=w_f.shape[1],
                       n_enh_groups=1, nodes_per_enh_group=w_h.shape[1],
                       feature_activation=feature_activation, enhancement_activation=enhancement_activation)
    return BlsModel(config=config, input_dim=w_f.shape[0], n_classes=2,
                    feature_groups=[(w_f, np.asarray(b_f, dtype=float))],
                    enhancement_groups=[(w_h, np.asarray(b_h, dtype=float))])


@pytest.fixture(scope='module')
def blobs():
    return synthetic_blobs(2, 100, 10, separation=6.0, seed=3)


class TestNodes:
    def test_zero_feature_weights(self):
        model = single_group_model(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 1)), np.zeros(1))
        assert not np.any(build_feature_nodes(np.ones((4, 3)), model))

    def test_identity_feature_map(self, rng):
        model = single_group_model(np.eye(3), np.zeros(3), np.zeros((3, 1)), np.zeros(1))
        x = rng.uniform(size=(5, 3))
        assert np.array_equal(build_feature_nodes(x, model), x)

    def test_sigmoid_at_zero(self):
        model = single_group_model(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 1)), np.zeros(1),
                                   feature_activation='sigmoid')
        assert np.all(build_feature_nodes(np.ones((4, 3)), model) == 0.5)

    def test_tanh_at_zero(self):
        model = single_group_model(np.eye(2), np.zeros(2), np.zeros((2, 3)), np.zeros(3))
        assert not np.any(build_enhancement_nodes(np.ones((4, 2)), model))

    def test_constant_enhancement_column(self):
        model = single_group_model(np.eye(2), np.zeros(2), np.zeros((2, 1)), [0.7])
        h = build_enhancement_nodes(np.ones((4, 2)), model)
        assert h.shape == (4, 1)
        np.testing.assert_allclose(h, np.tanh(0.7))

    def test_input_width_checked(self):
        model = single_group_model(np.eye(3), np.zeros(3), np.zeros((3, 1)), np.zeros(1))
        with pytest.raises(DimensionError):
            build_feature_nodes(np.ones((2, 4)), model)
        with pytest.raises(DimensionError):
            build_enhancement_nodes(np.ones((2, 2)), model)

    def test_assemble(self):
        assert np.array_equal(assemble_A(np.ones((2, 1)), np.zeros((2, 1))), [[1.0, 0.0], [1.0, 0.0]])
        with pytest.raises(DimensionError):
            assemble_A(np.ones((2, 1)), np.ones((3, 1)))

    def test_design_matrix_width(self, blobs):
        config = BlsConfig()
        model = train(blobs, config)
        assert design_matrix(model, blobs.x).shape == (blobs.n_samples, config.total_nodes)


class TestTrain:
    def test_output_weights_come_from_backend(self):
        config = BlsConfig(n_feature_groups=1, nodes_per_feature_group=2, n_enh_groups=1, nodes_per_enh_group=2)
        n = config.total_nodes
        labels = np.arange(n) % 2
        dataset = Dataset(x=dense_matrix(np.linspace(0.0, 1.0, 3 * n).reshape(n, 3)),
                          y=dense_matrix(one_hot(labels, 2)), labels=labels)
        calls = []

        def identity_backend(a, lam):
            calls.append((a.shape, lam))
            return np.eye(n)

        model = train(dataset, config, identity_backend)
        assert calls == [((n, n), config.lam)]
        assert np.array_equal(model.output_weights, dataset.y)

    def test_separable_blobs(self, blobs):
        model = train(blobs, BlsConfig(seed=7))
        assert evaluate(model, blobs) >= 0.95

    def test_same_seed_same_weights(self, blobs):
        first = train(blobs, BlsConfig(seed=5))
        second = train(blobs, BlsConfig(seed=5))
        assert np.array_equal(first.output_weights, second.output_weights)

    def test_ridge_residual(self, blobs):
        config = BlsConfig(seed=1)
        model = train(blobs, config)
        a = design_matrix(model, blobs.x)
        assert ridge_residual(a, model.output_weights, blobs.y, config.lam) <= 1e-6

    def test_ridge_residual_sees_wrong_weights(self, blobs):
        config = BlsConfig(seed=1)
        model = train(blobs, config)
        a = design_matrix(model, blobs.x)
        assert ridge_residual(a, np.zeros_like(model.output_weights), blobs.y, config.lam) == pytest.approx(1.0)


class TestOutsourcedTraining:
    def test_matches_local_backend(self, blobs):
        config = BlsConfig(seed=2)
        local = train(blobs, config)
        outsourced = train(blobs, config, OutsourcedBackend(LoopbackChannel(CloudWorker()), seed=2))
        diff = np.linalg.norm(outsourced.output_weights - local.output_weights)
        assert diff <= 1e-6 * np.linalg.norm(local.output_weights)
        assert abs(evaluate(outsourced, blobs) - evaluate(local, blobs)) <= 0.005

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_local_backend_many_seeds(self, seed):
        dataset = synthetic_blobs(3, 80, 12, separation=6.0, seed=seed)
        config = BlsConfig(seed=seed)
        local = train(dataset, config)
        outsourced = train(dataset, config, OutsourcedBackend(LoopbackChannel(CloudWorker()), seed=seed))
        diff = np.linalg.norm(outsourced.output_weights - local.output_weights)
        assert diff <= 1e-6 * np.linalg.norm(local.output_weights)
        assert abs(evaluate(outsourced, dataset) - evaluate(local, dataset)) <= 0.005

    @pytest.mark.parametrize("seed", range(20))
    def test_default_network_on_two_blobs(self, seed):
        train_set, test_set = train_test_split(synthetic_blobs(2, 200, 10, separation=6.0, seed=seed), 0.5, seed)
        config = BlsConfig(seed=seed)
        local = train(train_set, config)
        outsourced = train(train_set, config, OutsourcedBackend(LoopbackChannel(CloudWorker()), seed=seed))
        for part in (train_set, test_set):
            assert evaluate(local, part) >= 0.95
            assert abs(evaluate(outsourced, part) - evaluate(local, part)) <= 0.005
        a = design_matrix(local, train_set.x)
        for model in (local, outsourced):
            assert ridge_residual(a, model.output_weights, train_set.y, config.lam) <= 1e-6

    def test_backend_counts_operations(self, blobs):
        backend = OutsourcedBackend(LoopbackChannel(CloudWorker()), seed=4)
        train(blobs, BlsConfig(seed=4), backend)
        assert backend.calls == 1
        assert backend.metrics.total_ops(['transform', 'recover', 'verify']) > 0

    def test_cheating_worker_rejected(self, blobs):
        backend = OutsourcedBackend(LoopbackChannel(CloudWorker(fault_mode='random')), seed=4)
        with pytest.raises(ResultRejectedError):
            train(blobs, BlsConfig(seed=4), backend)

    def test_backend_reads_config(self, isolated_env):
        config = PblsConfig()
        config.set('outsourcing.verify_rounds', 3)
        config.set('bls.verify_identity', 'pinv')
        backend = OutsourcedBackend(LoopbackChannel(CloudWorker()), config)
        assert backend.verify_rounds == 3
        assert backend.identity == 'pinv'


class TestPredict:
    def test_argmax(self):
        assert labels_from_scores([[0.1, 0.9]]).tolist() == [1]

    def test_tie_goes_to_first_class(self):
        assert labels_from_scores([[0.5, 0.5], [0.2, 0.2]]).tolist() == [0, 0]

    def test_untrained_model(self, blobs):
        model = single_group_model(np.eye(10), np.zeros(10), np.zeros((10, 1)), np.zeros(1))
        with pytest.raises(StateError):
            predict(model, blobs.x)
        with pytest.raises(StateError):
            class_scores(model, blobs.x)

    def test_predict_shape(self, blobs):
        model = train(blobs, BlsConfig())
        labels = predict(model, blobs.x)
        assert labels.shape == (blobs.n_samples,)
        assert set(labels.tolist()) <= {0, 1}


class TestConfig:
    def test_widths(self):
        config = BlsConfig(n_feature_groups=3, nodes_per_feature_group=5, n_enh_groups=2, nodes_per_enh_group=7)
        assert (config.feature_width, config.enhancement_width, config.total_nodes) == (15, 14, 29)

    @pytest.mark.parametrize("kwargs", [
        {'n_feature_groups': 0},
        {'nodes_per_enh_group': 0},
        {'lam': 0.0},
        {'enhancement_scale': -1.0},
        {'feature_activation': 'relu'},
        {'enhancement_activation': 'linear'},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            BlsConfig(**kwargs)

    def test_from_config(self, isolated_env):
        config = PblsConfig()
        config.set('bls.nodes_per_enh_group', 25)
        bls_config = BlsConfig.from_config(config, seed=9, lam=1e-6)
        assert bls_config.nodes_per_enh_group == 25
        assert bls_config.seed == 9
        assert bls_config.lam == 1e-6


class TestModelFile:
    def test_round_trip(self, blobs, tmp_path):
        model = train(blobs, BlsConfig(seed=6))
        path = tmp_path / 'model.bin'
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.config == model.config
        assert np.array_equal(loaded.output_weights, model.output_weights)
        assert np.array_equal(predict(loaded, blobs.x), predict(model, blobs.x))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'model.bin'
        path.write_bytes(b'NOTMODEL' + bytes(16))
        with pytest.raises(ModelFileError):
            load_model(path)

    def test_truncated_weights(self, blobs, tmp_path):
        path = tmp_path / 'model.bin'
        save_model(train(blobs, BlsConfig()), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ModelFileError):
            load_model(path)

    def test_untrained_cannot_be_saved(self, tmp_path):
        model = single_group_model(np.eye(2), np.zeros(2), np.zeros((2, 1)), np.zeros(1))
        with pytest.raises(StateError):
            save_model(model, tmp_path / 'model.bin')


def test_local_pinv_is_the_default_backend(blobs):
    config = BlsConfig(seed=8)
    model = train(blobs, config)
    a = design_matrix(model, blobs.x)
    assert np.array_equal(model.output_weights, mat_mul(local_pinv(a, config.lam), blobs.y))
