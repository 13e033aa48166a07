import math
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from app.classifier.architectures import ArchHyper
from app.classifier.prediction import init_model
from app.core.exceptions import DomainError, TrainingError
from app.neural.tensor import Tensor
from app.trajectories.records import CircuitConfig, crop_dataset
from app.trajectories.simulator import generate_dataset
from . import services
from .services import (
    TrainConfig, build_pool, member_seeds, train, train_ensemble, train_resampled, write_training_log,
)

VERTICES = ((0.85, 0.075, 0.075), (0.075, 0.85, 0.075), (0.075, 0.075, 0.85))


def vertex_datasets(M=12, L=4, T=6, seed=5):
    return [generate_dataset(CircuitConfig(L, T, *gammas, master_seed=seed), M) for gammas in VERTICES]


class PoolTests(SimpleTestCase):

    def test_labels_follow_coordinates(self):
        trivial, lr, spt = vertex_datasets()
        pool = build_pool(spt, trivial, lr)
        self.assertIs(pool.datasets[1], trivial)
        self.assertIs(pool.datasets[2], lr)
        self.assertIs(pool.datasets[3], spt)
        self.assertEqual(pool.size, 36)

    def test_geometry_mismatch(self):
        trivial, lr, _ = vertex_datasets()
        spt = generate_dataset(CircuitConfig(5, 6, *VERTICES[2]), 12)
        with self.assertRaises(DomainError):
            build_pool(trivial, lr, spt)

    def test_duplicate_class(self):
        trivial, lr, _ = vertex_datasets()
        with self.assertRaises(DomainError):
            build_pool(trivial, lr, trivial)


class TrainTests(SimpleTestCase):

    def setUp(self):
        self.pool = build_pool(*vertex_datasets())
        self.arch = ArchHyper(T=6, L=4, h1=2, h2=2)

    def test_step_count_and_partition(self):
        seen = []

        def fake_step(model, opt, dataset, indices, label, dropout_rng, epoch, step):
            seen.append((epoch, label, tuple(int(i) for i in indices)))
            return 1.0

        with mock.patch.object(services, '_optimizer_step', side_effect=fake_step):
            report = train(init_model(self.arch, 0), self.pool, TrainConfig(epochs=2, N=4))
        self.assertEqual(report.steps, 2 * 3 * 3)
        for epoch in (1, 2):
            for label in (1, 2, 3):
                used = sorted(i for e, l, idx in seen if e == epoch and l == label for i in idx)
                self.assertEqual(used, list(range(12)))

    def test_initial_loss_is_near_ln3(self):
        model = init_model(ArchHyper(T=6, L=4, h1=2, h2=2, dropout_p=0.0), 1)
        losses = [model.training_loss(self.pool.datasets[label].batch(slice(0, 4)), label - 1).item()
                  for label in (1, 2, 3)]
        self.assertAlmostEqual(float(np.mean(losses)), math.log(3), delta=0.2)

    def test_training_is_deterministic(self):
        config = TrainConfig(lr=1e-3, epochs=2, N=4, seed=9)
        first = train(init_model(self.arch, 3), self.pool, config)
        again = train(init_model(self.arch, 3), self.pool, config)
        for a, b in zip(first.model.parameters(), again.model.parameters()):
            np.testing.assert_array_equal(a.data, b.data)
        self.assertEqual(first.epoch_losses, again.epoch_losses)
        self.assertTrue(all(math.isfinite(v) for v in first.epoch_losses))

    def test_remainder_is_dropped(self):
        report = train(init_model(self.arch, 3), self.pool, TrainConfig(lr=1e-3, epochs=1, N=5))
        self.assertEqual(report.steps, 6)
        self.assertEqual(report.dropped, 6)

    def test_non_finite_loss_aborts(self):
        model = init_model(self.arch, 0)
        with mock.patch.object(type(model), 'training_loss', return_value=Tensor(np.array(np.nan))):
            with self.assertRaises(TrainingError):
                train(model, self.pool, TrainConfig(epochs=1, N=4))

    def test_geometry_mismatch(self):
        with self.assertRaises(DomainError):
            train(init_model(ArchHyper(T=12, L=4, h1=2, h2=2), 0), self.pool, TrainConfig(epochs=1, N=4))

    def test_cropped_pool(self):
        pool = build_pool(*[crop_dataset(d, 2) for d in vertex_datasets()])
        arch = ArchHyper(T=6, L=2, h1=2, h2=2, channels=('x', 'zz'))
        report = train(init_model(arch, 0), pool, TrainConfig(lr=1e-3, epochs=1, N=4))
        self.assertEqual(report.steps, 9)


class ResampledTrainTests(SimpleTestCase):

    def setUp(self):
        self.pool = build_pool(*vertex_datasets())
        self.arch = ArchHyper(T=6, L=4, h1=2, h2=2)

    def test_step_count(self):
        report = train_resampled(init_model(self.arch, 0), self.pool, TrainConfig(lr=1e-3, epochs=2, N=20, n_step=3))
        self.assertEqual(report.steps, 2 * 3 * 3)

    def test_zero_epochs_leave_model_unchanged(self):
        model = init_model(self.arch, 0)
        before = [p.data.copy() for p in model.parameters()]
        train_resampled(model, self.pool, TrainConfig(epochs=0, N=4, n_step=5))
        for a, b in zip(before, model.parameters()):
            np.testing.assert_array_equal(a, b.data)

    def test_classes_cycle_in_order(self):
        labels = []

        def fake_step(model, opt, dataset, indices, label, dropout_rng, epoch, step):
            labels.append(label)
            return 1.0

        with mock.patch.object(services, '_optimizer_step', side_effect=fake_step):
            train_resampled(init_model(self.arch, 0), self.pool, TrainConfig(epochs=1, N=4, n_step=2))
        self.assertEqual(labels, [1, 2, 3, 1, 2, 3])


class EnsembleTests(SimpleTestCase):

    def test_members_do_not_depend_on_worker_count(self):
        pool = build_pool(*vertex_datasets())
        arch = ArchHyper(T=6, L=4, h1=2, h2=2)
        config = TrainConfig(lr=1e-3, epochs=1, N=4)
        seeds = member_seeds(7, 3)
        serial = train_ensemble(arch, pool, config, seeds, threads=1)
        parallel = train_ensemble(arch, pool, config, seeds, threads=3)
        self.assertEqual(len(set(seeds)), 3)
        for a, b in zip(serial, parallel):
            for p, q in zip(a.model.parameters(), b.model.parameters()):
                np.testing.assert_array_equal(p.data, q.data)

    def test_training_log(self):
        pool = build_pool(*vertex_datasets())
        report = train(init_model(ArchHyper(T=6, L=4, h1=2, h2=2), 0), pool, TrainConfig(lr=1e-3, epochs=2, N=4))
        with tempfile.TemporaryDirectory() as tmp:
            path = write_training_log(report, Path(tmp) / 'log.csv')
            frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), ['epoch', 'mean_loss', 'wall_ms'])
        self.assertEqual(frame['epoch'].tolist(), [1, 2])


class ConfigTests(SimpleTestCase):

    def test_settings_defaults(self):
        config = TrainConfig.from_settings(seed=4)
        self.assertEqual((config.lr, config.epochs, config.N, config.dropout_p), (2e-5, 30, 25, 0.2))
        self.assertEqual(config.seed, 4)

    def test_validation(self):
        with self.assertRaises(DomainError):
            TrainConfig(lr=0.0)
        with self.assertRaises(DomainError):
            TrainConfig(N=0)
