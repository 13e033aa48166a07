import math
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase, tag

from app.classifier.architectures import ArchHyper
from app.classifier.prediction import init_model, predict_dataset
from app.core.circuit_breaker import PointCircuitBreaker
from app.core.exceptions import DomainError, FormatError, RunAbortedError, StatisticsError
from app.training.services import TrainConfig, build_pool, member_seeds, train_ensemble
from app.trajectories.records import CircuitConfig, Dataset, EntropyReport
from app.trajectories.simulator import generate_dataset
from .points import label_points, load_labels, load_test_points, oracle_label
from .reports import accuracy_frame, render_phase_diagram, write_accuracy_csv
from .services import (
    FixedEnsembleProtocol, GridPoint, RepetitionResult, accuracy_P, accuracy_report, ensemble_majority,
    majority_vote, mean_and_standard_error, model_vote, reconstruct_phase_diagram, repeated_accuracy,
    sample_grid, split_into_groups, vote_of,
)

VERTICES = ((0.85, 0.075, 0.075), (0.075, 0.85, 0.075), (0.075, 0.075, 0.85))
INNER = ((0.7, 0.15, 0.15), (0.15, 0.7, 0.15), (0.15, 0.15, 0.7))


def random_dataset(M, T, L, gammas=(0.4, 0.3, 0.3), seed=0, point_id=''):
    rng = np.random.default_rng(seed)
    signs = lambda *shape: rng.choice(np.array([-1, 1], dtype=np.int8), size=shape)
    config = CircuitConfig(L, T, *gammas, point_id=point_id)
    return Dataset(config, signs(M, T, L), signs(M, T // 2, L - 1), signs(M, T // 3, L - 2),
                   np.arange(M, dtype=np.uint64))


def head(dataset, m):
    return Dataset(dataset.config, dataset.x[:m], dataset.zz[:m], dataset.zxz[:m], dataset.seeds[:m])


class VoteTests(SimpleTestCase):

    def test_argmax_vote(self):
        self.assertEqual(vote_of([0.2, 0.7, 0.1]), 2)
        self.assertEqual(vote_of(np.full(3, 1 / 3)), 1)

    def test_vote_ignores_monotone_rescaling(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            y = rng.dirichlet(np.ones(3))
            for variant in (y / np.abs(y).sum(), 3.0 * y, y ** 2, np.log(y)):
                self.assertEqual(vote_of(variant), vote_of(y))

    def test_model_vote_matches_dataset_prediction(self):
        model = init_model(ArchHyper(T=6, L=4, h1=2, h2=2), 0)
        dataset = random_dataset(8, 6, 4)
        self.assertEqual(model_vote(model, dataset, 4), predict_dataset(model, dataset, 4).label)

    def test_majority(self):
        one_hot = lambda c: np.eye(3)[c - 1]
        record = majority_vote([one_hot(1), one_hot(1), one_hot(2)])
        self.assertEqual((record.majority, record.agreement), (1, 2 / 3))
        self.assertEqual(majority_vote([one_hot(3)] * 30).agreement, 1.0)

    def test_count_tie_goes_to_larger_mass(self):
        predictions = [[0.5, 0.3, 0.2], [0.2, 0.6, 0.2], [0.2, 0.3, 0.5]]
        np.testing.assert_allclose(np.sum(predictions, axis=0), [0.9, 1.2, 0.9])
        record = majority_vote(predictions)
        self.assertEqual(record.votes, [1, 2, 3])
        self.assertEqual(record.majority, 2)

    def test_mass_tie_goes_to_lowest_class(self):
        record = majority_vote([[0.6, 0.4, 0.0], [0.4, 0.6, 0.0]])
        self.assertEqual(record.majority, 1)
        self.assertEqual(record.agreement, 0.5)

    def test_agreement_lower_bound(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            record = majority_vote(rng.dirichlet(np.ones(3), size=30))
            self.assertGreaterEqual(record.agreement, 1 / 3)
            self.assertLessEqual(record.agreement, 1.0)
            self.assertEqual(record.agreement, record.votes.count(record.majority) / 30)

    def test_ensemble_needs_models(self):
        with self.assertRaises(DomainError):
            ensemble_majority([], random_dataset(4, 6, 4), 4)


class AccuracyTests(SimpleTestCase):

    def test_accuracy(self):
        truth = {'a': 1, 'b': 2, 'c': 3}
        self.assertEqual(accuracy_P({'a': 1, 'b': 2, 'c': 3}, truth), 1.0)
        self.assertAlmostEqual(accuracy_P({'a': 1, 'b': 1, 'c': 1}, truth), 1 / 3)

    def test_accuracy_is_order_free(self):
        truth = {str(i): 1 + i % 3 for i in range(12)}
        predicted = {str(i): 1 + (i * 7) % 3 for i in range(12)}
        base = accuracy_P(predicted, truth)
        rng = np.random.default_rng(2)
        for _ in range(10):
            keys = list(rng.permutation(list(predicted)))
            self.assertEqual(accuracy_P({k: predicted[k] for k in keys}, truth), base)

    def test_unlabelled_points_are_skipped(self):
        self.assertEqual(accuracy_P({'a': 1, 'z': 2}, {'a': 1}), 1.0)
        with self.assertRaises(DomainError):
            accuracy_P({'z': 2}, {'a': 1})

    def test_standard_error(self):
        mean, se = mean_and_standard_error([0.8, 1.0])
        self.assertEqual(mean, 0.9)
        self.assertAlmostEqual(se, 0.1, places=12)
        self.assertEqual(mean_and_standard_error([0.75] * 10), (0.75, 0.0))
        with self.assertRaises(StatisticsError):
            mean_and_standard_error([0.5])

    def test_repeated_accuracy(self):
        outcomes = [[True, True, False], [True, False, False], [True, True, True]]

        def protocol(r):
            return RepetitionResult(votes={}, correct={p: hit for p, hit in zip('abc', outcomes[r])})

        report = repeated_accuracy(protocol, 3, points='inner')
        self.assertEqual(report.P_r, [2 / 3, 1 / 3, 1.0])
        P = np.array(report.P_r)
        direct = math.sqrt(np.sum((P - P.mean()) ** 2) / (3 * 2))
        self.assertAlmostEqual(report.se, direct, delta=1e-12)
        self.assertEqual(report.per_point['c'], [False, False, True])
        with self.assertRaises(StatisticsError):
            repeated_accuracy(protocol, 1)

    def test_single_repetition_has_no_error_bar(self):
        report = accuracy_report([RepetitionResult(votes={}, correct={'a': True, 'b': False})])
        self.assertEqual((report.mean, report.se, report.R), (0.5, None, 1))

    def test_accuracy_csv(self):
        results = [RepetitionResult(votes={}, correct={'a': True, 'b': r == 0}) for r in range(2)]
        frame = accuracy_frame([accuracy_report(results, 'inner')])
        self.assertEqual(list(frame.columns), ['point_id', 'role', 'P_1', 'P_2', 'P_mean', 'SE'])
        summary = frame[frame.point_id == '*'].iloc[0]
        self.assertEqual((summary.P_1, summary.P_2, summary.P_mean), (1.0, 0.5, 0.75))
        with tempfile.TemporaryDirectory() as tmp:
            path = write_accuracy_csv([accuracy_report(results, 'inner')], Path(tmp) / 'accuracy.csv')
            self.assertEqual(len(pd.read_csv(path)), 3)


class GridTests(SimpleTestCase):

    def test_sample_grid(self):
        grid = sample_grid()
        self.assertEqual(len(grid), 55)
        for point in grid:
            self.assertAlmostEqual(sum(point.gammas), 1.0, delta=1e-12)
            self.assertGreaterEqual(min(point.gammas), 0.0)
        first_row = [p for p in grid if abs(p.gamma_zxz - 0.025) < 1e-12]
        self.assertEqual(len(first_row), 10)
        self.assertAlmostEqual(max(p.gamma_x for p in first_row), 0.925, delta=1e-12)
        self.assertEqual(len([p for p in grid if abs(p.gamma_zxz - 0.925) < 1e-12]), 1)
        self.assertEqual(len({p.point_id for p in grid}), 55)

    def test_grid_point_validation(self):
        with self.assertRaises(DomainError):
            GridPoint(0.5, 0.5, 0.5)
        with self.assertRaises(DomainError):
            GridPoint(1.1, -0.1, 0.0)
        with self.assertRaises(DomainError):
            GridPoint(0.4, 0.3, 0.3, role='edge')

    def test_circuit_renormalises_rounded_points(self):
        config = GridPoint(0.3333333333, 0.3333333333, 0.3333333334).circuit(L=4, T=6)
        self.assertAlmostEqual(sum(config.gammas), 1.0, delta=1e-12)


class PhaseDiagramTests(SimpleTestCase):

    def setUp(self):
        self.models = [init_model(ArchHyper(T=6, L=4, h1=2, h2=2), seed) for seed in range(3)]
        self.grid = sample_grid()[:4]

    def datasets(self, points):
        return {p.point_id: random_dataset(8, 6, 4, p.gammas, seed=i, point_id=p.point_id)
                for i, p in enumerate(points)}

    def test_missing_dataset_is_a_hole(self):
        diagram = reconstruct_phase_diagram(self.models, self.grid, self.datasets(self.grid[:3]), N=4)
        self.assertEqual(len(diagram.entries), 4)
        self.assertEqual(diagram.holes, [self.grid[3]])
        for entry in diagram.entries[:3]:
            self.assertIn(entry.label, (1, 2, 3))
            self.assertGreaterEqual(entry.agreement, 1 / 3)
        frame = diagram.to_frame()
        self.assertEqual(list(frame.columns), ['gamma_x', 'gamma_zz', 'gamma_zxz', 'label', 'agreement'])
        self.assertTrue(pd.isna(frame['label'].iloc[3]))

    def test_thread_count_does_not_change_votes(self):
        datasets = self.datasets(self.grid)
        serial = reconstruct_phase_diagram(self.models, self.grid, datasets, N=4, threads=1)
        parallel = reconstruct_phase_diagram(self.models, self.grid, datasets, N=4, threads=2)
        self.assertEqual([(e.label, e.agreement) for e in serial.entries],
                         [(e.label, e.agreement) for e in parallel.entries])

    def test_guard_turns_failures_into_holes(self):
        datasets = self.datasets(self.grid)
        bad = self.grid[1].point_id
        datasets[bad] = random_dataset(8, 6, 5, self.grid[1].gammas, point_id=bad)
        guard = PointCircuitBreaker('diagram-test', fail_max=3)
        diagram = reconstruct_phase_diagram(self.models, self.grid, datasets, N=4, guard=guard)
        self.assertEqual(diagram.holes, [self.grid[1]])
        self.assertEqual(guard.get_status()['failed_points'], [bad])
        with self.assertRaises(DomainError):
            reconstruct_phase_diagram(self.models, self.grid, datasets, N=4)

    def test_guard_gives_up_after_consecutive_failures(self):
        datasets = {p.point_id: random_dataset(8, 6, 5, p.gammas, point_id=p.point_id) for p in self.grid}
        with self.assertRaises(RunAbortedError):
            reconstruct_phase_diagram(self.models, self.grid, datasets, N=4,
                                      guard=PointCircuitBreaker('diagram-abort', fail_max=2))

    def test_svg_is_deterministic(self):
        diagram = reconstruct_phase_diagram(self.models, self.grid, self.datasets(self.grid[:3]), N=4)
        first, again = render_phase_diagram(diagram), render_phase_diagram(diagram)
        self.assertEqual(first, again)
        self.assertIn(b'<svg', first)


class ProtocolTests(SimpleTestCase):

    def test_fixed_ensemble_groups(self):
        models = [init_model(ArchHyper(T=6, L=4, h1=2, h2=2), seed) for seed in range(4)]
        points = [GridPoint(*g, role='inner') for g in INNER]
        test_points = [(p, random_dataset(8, 6, 4, p.gammas, seed=i, point_id=p.point_id))
                       for i, p in enumerate(points)]
        truth = {points[0].point_id: 1, points[1].point_id: 2}
        protocol = FixedEnsembleProtocol(split_into_groups(models, 2), test_points, truth, N=4)
        report = repeated_accuracy(protocol, 2, points='inner')
        self.assertEqual(report.R, 2)
        self.assertEqual(sorted(report.per_point), sorted(truth))
        self.assertEqual(protocol.skipped, [points[2].point_id])
        with self.assertRaises(DomainError):
            split_into_groups(models, 3)


class PointFileTests(SimpleTestCase):

    def test_shipped_test_points(self):
        points = load_test_points()
        inner = [p for p in points if p.role == 'inner']
        self.assertEqual(sorted(p.gammas for p in inner), sorted(INNER))
        self.assertEqual(len([p for p in points if p.role == 'vertex']), 3)
        self.assertTrue(any(p.role == 'outer' for p in points))

    def test_role_filter(self):
        self.assertTrue(all(p.role == 'outer' for p in load_test_points(roles=['outer'])))

    def test_label_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'labels.csv'
            path.write_text('point_id,label\na,1\nb,3\n')
            self.assertEqual(load_labels(path), {'a': 1, 'b': 3})
            path.write_text('point_id,label\na,4\n')
            with self.assertRaises(FormatError):
                load_labels(path)
            path.write_text('point,label\na,1\n')
            with self.assertRaises(FormatError):
                load_labels(path)

    def test_oracle_rule(self):
        report = lambda mi, tee: EntropyReport([6], [0.0], [0.0], mi, 0.0, tee, 0.0, 10)
        self.assertEqual(oracle_label(report(0.1, 0.9), 0.5, 0.5), 3)
        self.assertEqual(oracle_label(report(0.9, 0.1), 0.5, 0.5), 2)
        self.assertEqual(oracle_label(report(0.1, 0.1), 0.5, 0.5), 1)
        with self.assertRaises(DomainError):
            oracle_label(report(0.9, None), 0.5, 0.5)

    @tag('slow')
    def test_oracle_labels_the_vertices(self):
        vertices = load_test_points(roles=['vertex'])
        labelled = label_points(vertices, 8, 48, 200, threads=4)
        self.assertEqual({p.point_id: label for p, label, _ in labelled},
                         {'vertex_trivial': 1, 'vertex_lr': 2, 'vertex_spt': 3})


@tag('slow')
class DeskScaleTests(SimpleTestCase):
    """Small-system end-to-end run: L=6, T=36, 1000 trajectories per class.

    The learning rate is raised to 2e-3 so that ten epochs suffice at this
    size; the full-scale default (2e-5) is tuned for thirty epochs at L=12.
    """
    L, T, M, N = 6, 36, 1000, 25
    CONFIG = dict(lr=2e-3, epochs=10, N=25)

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.vertex_data = [generate_dataset(CircuitConfig(cls.L, cls.T, *g, master_seed=11), cls.M)
                           for g in VERTICES]
        cls.arch = ArchHyper(T=cls.T, L=cls.L, h1=4, h2=4)
        cls.config = TrainConfig(seed=17, **cls.CONFIG)
        cls.ensemble = [r.model for r in train_ensemble(cls.arch, build_pool(*cls.vertex_data), cls.config,
                                                        member_seeds(17, 5))]
        cls.inner = [GridPoint(*g, role='inner') for g in INNER]
        cls.inner_data = [generate_dataset(p.circuit(cls.L, cls.T, master_seed=12), 200) for p in cls.inner]
        cls.inner_truth = {p.point_id: label for p, label in zip(cls.inner, (1, 2, 3))}

    def inner_accuracy(self, models):
        votes = {d.config.point_id: ensemble_majority(models, d, self.N) for d in self.inner_data}
        return accuracy_P(votes, self.inner_truth)

    def test_vertices_classify_themselves(self):
        fresh = [generate_dataset(CircuitConfig(self.L, self.T, *g, master_seed=13), 200) for g in VERTICES]
        self.assertEqual([ensemble_majority(self.ensemble, d, self.N).majority for d in fresh], [1, 2, 3])

    def test_inner_points(self):
        self.assertGreaterEqual(self.inner_accuracy(self.ensemble), 2 / 3)

    def test_accuracy_does_not_drop_with_more_data(self):
        small_pool = build_pool(*[head(d, 100) for d in self.vertex_data])
        small = [r.model for r in train_ensemble(self.arch, small_pool, self.config, member_seeds(17, 5))]
        self.assertGreaterEqual(self.inner_accuracy(self.ensemble), self.inner_accuracy(small))

    def test_baseline_ordering(self):
        pool = build_pool(*self.vertex_data)
        outer = load_test_points(roles=['outer'])
        labelled = label_points(outer, L=8, T=48, n_traj=100, master_seed=14)
        outer_truth = {p.point_id: label for p, label, _ in labelled}
        outer_data = [generate_dataset(p.circuit(self.L, self.T, master_seed=15), 200) for p in outer]

        def mean_accuracy(kind, datasets, truth):
            arch = ArchHyper(T=self.T, L=self.L, kind=kind, h1=4, h2=4)
            scores = []
            for seed in range(5):
                model = train_ensemble(arch, pool, TrainConfig(seed=100 + seed, **self.CONFIG), [100 + seed])[0].model
                votes = {d.config.point_id: model_vote(model, d, self.N) for d in datasets}
                scores.append(accuracy_P(votes, truth))
            return float(np.mean(scores))

        self.assertGreaterEqual(mean_accuracy('cnn_attn', self.inner_data, self.inner_truth),
                                mean_accuracy('mlp', self.inner_data, self.inner_truth))
        self.assertGreaterEqual(mean_accuracy('cnn_attn', outer_data, outer_truth),
                                mean_accuracy('cnn_mean', outer_data, outer_truth))
