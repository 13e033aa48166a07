import json
import struct
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings, tag

from app.classifier.checkpoints import load_checkpoint
from app.core.exceptions import DomainError, FormatError, ResourceError
from app.evaluation.points import load_test_points
from app.evaluation.services import GridPoint, sample_grid
from app.trajectories.records import CircuitConfig, Dataset, crop_dataset, grid_shapes
from app.trajectories.seeding import trajectory_seeds
from app.trajectories.simulator import generate_dataset
from .formats import decode_dataset, encode_dataset, load_dataset, record_bytes, save_dataset
from .models import RunManifest
from .services import ensure_labels, sidecar_path
from .sweeps import channels_for_width, parse_values

SMALL_ORACLE = {'L': 4, 'T': 8, 'n_traj': 2, 'seed': 0}


def random_signs(rng, *shape):
    return rng.choice(np.array([-1, 1], dtype=np.int8), size=shape)


def random_file_dataset(rng):
    L, T, M = int(rng.integers(3, 7)), int(rng.integers(1, 14)), int(rng.integers(0, 6))
    gx, gzxz = rng.dirichlet(np.ones(3))[:2]
    config = CircuitConfig(L, T, float(gx), float(1.0 - gx - gzxz), float(gzxz),
                           master_seed=int(rng.integers(0, 2 ** 63)), point_id=f"p{int(rng.integers(0, 10 ** 6))}")
    (x, zz, zxz) = grid_shapes(T, L)
    return Dataset(config, random_signs(rng, M, *x), random_signs(rng, M, *zz), random_signs(rng, M, *zxz),
                   trajectory_seeds(config.master_seed, config.point_id, M))


class DatasetFormatTests(SimpleTestCase):

    def test_round_trip_is_exact(self):
        rng = np.random.default_rng(31)
        for _ in range(1000):
            dataset = random_file_dataset(rng)
            blob = encode_dataset(dataset)
            restored = decode_dataset(blob)
            self.assertEqual(restored.config, dataset.config)
            for name in ('x', 'zz', 'zxz', 'seeds'):
                np.testing.assert_array_equal(getattr(restored, name), getattr(dataset, name))
            self.assertEqual(encode_dataset(restored), blob)

    def test_record_size(self):
        self.assertEqual(record_bytes(72, 12), 188)
        self.assertEqual(record_bytes(6, 3), 4)

    def test_empty_dataset_round_trip(self):
        config = CircuitConfig(4, 6, 0.4, 0.3, 0.3, point_id='empty')
        (x, zz, zxz) = grid_shapes(6, 4)
        empty = Dataset(config, np.ones((0, *x), dtype=np.int8), np.ones((0, *zz), dtype=np.int8),
                        np.ones((0, *zxz), dtype=np.int8), np.zeros(0, dtype=np.uint64))
        blob = encode_dataset(empty)
        restored = decode_dataset(blob)
        self.assertEqual(restored.M, 0)
        self.assertEqual(restored.zz.shape, (0, *zz))
        self.assertEqual(encode_dataset(restored), blob)

    def test_bit_layout(self):
        config = CircuitConfig(3, 6, 1.0, 0.0, 0.0)
        x = np.ones((1, 6, 3), dtype=np.int8)
        zz = np.ones((1, 3, 2), dtype=np.int8)
        zxz = np.ones((1, 2, 1), dtype=np.int8)
        x[0, 0, 1] = -1      # bit 1
        zz[0, 0, 0] = -1     # bit 18
        zxz[0, 1, 0] = -1    # bit 25
        blob = encode_dataset(Dataset(config, x, zz, zxz, np.zeros(1, dtype=np.uint64)))
        self.assertEqual(blob[-4:], bytes([0b00000010, 0b00000000, 0b00000100, 0b00000010]))

    def test_malformed_files(self):
        blob = encode_dataset(generate_dataset(CircuitConfig(3, 6, 0.4, 0.3, 0.3), 2))
        for broken in (b'MIPTCK01' + blob[8:], blob[:-1], blob + b'\x00', blob[:10]):
            with self.assertRaises(FormatError):
                decode_dataset(broken)
        padded = bytearray(blob)
        padded[-1] |= 0x80
        with self.assertRaises(FormatError):
            decode_dataset(bytes(padded))

    def test_crops_are_not_written(self):
        dataset = generate_dataset(CircuitConfig(4, 6, 0.4, 0.3, 0.3), 2)
        with self.assertRaises(DomainError):
            encode_dataset(crop_dataset(dataset, 2))

    def test_worker_count_does_not_change_bytes(self):
        config = CircuitConfig(4, 12, 0.5, 0.3, 0.2, master_seed=99)
        serial = encode_dataset(generate_dataset(config, 40, threads=1, block_size=8))
        parallel = encode_dataset(generate_dataset(config, 40, threads=8, block_size=8))
        self.assertEqual(serial, parallel)

    def test_file_round_trip(self):
        dataset = generate_dataset(CircuitConfig(3, 6, 0.2, 0.5, 0.3), 3)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_dataset(dataset, Path(tmp) / 'd.mipt')
            self.assertEqual(encode_dataset(load_dataset(path)), path.read_bytes())
            with self.assertRaises(FormatError):
                load_dataset(Path(tmp) / 'missing.mipt')


class SweepHelperTests(SimpleTestCase):

    def test_channels_for_width(self):
        self.assertEqual(channels_for_width(2), ('x', 'zz'))
        self.assertEqual(channels_for_width(12), ('x', 'zz', 'zxz'))
        self.assertEqual(channels_for_width(1), ('x',))
        with self.assertRaises(DomainError):
            channels_for_width(1, ('zz', 'zxz'))

    def test_parse_values(self):
        self.assertEqual(parse_values('M', ['100', '1000']), [100, 1000])
        with self.assertRaises(DomainError):
            parse_values('depth', ['1'])
        with self.assertRaises(DomainError):
            parse_values('N', ['0'])


class CommandTests(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def simulate(self, name, *args):
        path = self.dir / name
        call_command('simulate', '--L', '4', '--T', '6', '--M', '16', '--out', str(path), *args)
        return path

    def vertex_files(self):
        return [self.simulate(f'{v}.mipt', '--vertex', v, '--seed', '1') for v in ('trivial', 'lr', 'spt')]

    def test_simulate_is_reproducible_and_recorded(self):
        first = self.simulate('a.mipt', '--gx', '0.5', '--gzz', '0.3', '--gzxz', '0.2', '--threads', '1')
        again = self.simulate('b.mipt', '--gx', '0.5', '--gzz', '0.3', '--gzxz', '0.2', '--threads', '8')
        self.assertEqual(first.read_bytes(), again.read_bytes())
        self.assertEqual(load_dataset(first).M, 16)
        sidecar = json.loads(sidecar_path(first).read_text())
        self.assertEqual(sidecar['command'], 'simulate')
        self.assertEqual(RunManifest.objects.filter(command='simulate').count(), 2)
        self.assertEqual(RunManifest.objects.get(pk=sidecar['run_id']).outputs, [str(first)])

    def test_simulate_renormalises_rounded_strengths(self):
        path = self.simulate('r.mipt', '--gx', '0.3', '--gzz', '0.4', '--gzxz', '0.3000000001')
        self.assertAlmostEqual(sum(load_dataset(path).config.gammas), 1.0, delta=1e-12)
        with self.assertRaises(CommandError) as caught:
            self.simulate('s.mipt', '--gx', '0.3', '--gzz', '0.4', '--gzxz', '0.31')
        self.assertEqual(caught.exception.returncode, 2)

    def test_vertex_preset(self):
        path = self.simulate('v.mipt', '--vertex', 'spt')
        self.assertEqual(load_dataset(path).config.gammas, (0.075, 0.075, 0.85))

    def test_usage_errors_exit_with_two(self):
        for args in (('--gx', '0.5', '--gzz', '0.5', '--gzxz', '0.5'), ('--gx', '0.5'), ()):
            with self.assertRaises(CommandError) as caught:
                self.simulate('bad.mipt', *args)
            self.assertEqual(caught.exception.returncode, 2)

    def test_runtime_errors_exit_with_one(self):
        bogus = self.dir / 'bogus.mipt'
        bogus.write_bytes(b'not a dataset')
        with self.assertRaises(CommandError) as caught:
            call_command('train', '--data', str(bogus), str(bogus), str(bogus), '--out', str(self.dir / 'm.ck'))
        self.assertEqual(caught.exception.returncode, 1)

    def test_train_and_evaluate(self):
        data = self.vertex_files()
        out = self.dir / 'model.ck'
        call_command('train', '--data', *map(str, data), '--h1', '2', '--h2', '2', '--epochs', '1', '--N', '4',
                     '--lr', '1e-3', '--models', '2', '--out', str(out))
        models = sorted(self.dir.glob('model_*.ck'))
        self.assertEqual(len(models), 2)
        self.assertEqual(load_checkpoint(models[0]).arch.h1, 2)
        log = pd.read_csv(models[0].with_name(models[0].name + '.log.csv'))
        self.assertEqual(list(log.columns), ['epoch', 'mean_loss', 'wall_ms'])

        tests = [self.simulate(f'test_{v}.mipt', '--vertex', v, '--seed', '2') for v in ('trivial', 'lr', 'spt')]
        accuracy = self.dir / 'accuracy.csv'
        labels = self.dir / 'labels.csv'
        with override_settings(MIPT_TEST_LABELS_FILE=str(labels), MIPT_ORACLE=SMALL_ORACLE):
            call_command('evaluate', '--models', *map(str, models), '--data', *map(str, tests), '--N', '4',
                         '--R', '2', '--out', str(accuracy))
        self.assertEqual(len(pd.read_csv(labels)), len(load_test_points()))
        self.assertTrue(RunManifest.objects.filter(command='label_points').exists())
        frame = pd.read_csv(accuracy)
        self.assertEqual(list(frame.columns), ['point_id', 'role', 'P_1', 'P_2', 'P_mean', 'SE'])
        self.assertEqual(sorted(frame[frame.point_id != '*'].point_id),
                         ['vertex_lr', 'vertex_spt', 'vertex_trivial'])

        with self.assertRaises(CommandError) as caught:
            call_command('evaluate', '--models', *map(str, models), '--data', str(tests[0]), '--R', '3',
                         '--out', str(accuracy), '--labels', str(labels))
        self.assertEqual(caught.exception.returncode, 2)

    def test_train_rejects_mismatched_geometry(self):
        data = self.vertex_files()
        wide = self.dir / 'wide.mipt'
        call_command('simulate', '--L', '5', '--T', '6', '--M', '16', '--vertex', 'spt', '--out', str(wide))
        with self.assertRaises(CommandError) as caught:
            call_command('train', '--data', str(data[0]), str(data[1]), str(wide), '--out', str(self.dir / 'm.ck'))
        self.assertNotEqual(caught.exception.returncode, 0)

    def test_train_mlp_baseline(self):
        data = self.vertex_files()
        out = self.dir / 'mlp.ck'
        call_command('train', '--data', *map(str, data), '--arch', 'mlp', '--h', '3', '--epochs', '1', '--N', '4',
                     '--resample', '--n-step', '2', '--out', str(out))
        self.assertEqual(load_checkpoint(out).arch.kind, 'mlp')

    def test_diagnostics(self):
        out = self.dir / 'entropy.csv'
        svg = self.dir / 'entropy.svg'
        call_command('diagnostics', '--gx', '1', '--gzz', '0', '--gzxz', '0', '--L', '4', '--T', '4',
                     '--n-traj', '3', '--out', str(out), '--svg', str(svg))
        frame = pd.read_csv(out)
        self.assertEqual(frame['t'].tolist(), [0, 1, 2, 3, 4])
        self.assertTrue((frame['s_half'] == 0).all())
        self.assertTrue(svg.read_bytes().startswith(b'<?xml'))

    def train_small_model(self):
        out = self.dir / 'model.ck'
        call_command('train', '--data', *map(str, self.vertex_files()), '--h1', '2', '--h2', '2', '--epochs', '1',
                     '--N', '4', '--out', str(out))
        return out

    def test_phase_diagram_with_holes(self):
        out = self.train_small_model()
        grid_dir = self.dir / 'grid'
        for point in sample_grid()[:5]:
            save_dataset(generate_dataset(point.circuit(4, 6), 8), grid_dir / f'{point.point_id}.mipt')
        csv_path, svg_path = self.dir / 'pd.csv', self.dir / 'pd.svg'
        call_command('phase_diagram', '--models', str(out), '--data-dir', str(grid_dir), '--N', '4',
                     '--grid-out', str(csv_path), '--svg', str(svg_path))
        frame = pd.read_csv(csv_path)
        self.assertEqual(len(frame), 55)
        self.assertEqual(int(frame['label'].notna().sum()), 5)
        first = svg_path.read_bytes()
        call_command('phase_diagram', '--models', str(out), '--data-dir', str(grid_dir), '--N', '4',
                     '--grid-out', str(csv_path), '--svg', str(svg_path))
        self.assertEqual(svg_path.read_bytes(), first)

    def test_generation_failure_leaves_a_hole(self):
        out = self.train_small_model()
        failing = sample_grid()[0].point_id

        def generate(config, M, threads=1):
            if config.point_id == failing:
                raise ResourceError("simulated allocation failure")
            return generate_dataset(config, M, threads)

        csv_path = self.dir / 'pd.csv'
        with mock.patch('app.runs.management.commands.phase_diagram.generate_dataset', side_effect=generate):
            call_command('phase_diagram', '--models', str(out), '--data-dir', str(self.dir / 'grid'), '--generate',
                         '--L', '4', '--T', '6', '--M', '4', '--N', '4', '--grid-out', str(csv_path),
                         '--svg', str(self.dir / 'pd.svg'))
        frame = pd.read_csv(csv_path)
        self.assertEqual(int(frame['label'].isna().sum()), 1)
        self.assertFalse((self.dir / 'grid' / f'{failing}.mipt').exists())

    def test_label_points(self):
        points = self.dir / 'points.csv'
        points.write_text('point_id,role,gamma_x,gamma_zz,gamma_zxz\n'
                          'a,inner,0.7,0.15,0.15\nb,inner,0.15,0.7,0.15\n')
        out = self.dir / 'labels.csv'
        call_command('label_points', '--points', str(points), '--L', '4', '--T', '8', '--n-traj', '2',
                     '--out', str(out))
        frame = pd.read_csv(out)
        self.assertEqual(frame['point_id'].tolist(), ['a', 'b'])
        self.assertTrue(frame['label'].isin([1, 2, 3]).all())

    def test_label_points_needs_divisible_chain(self):
        with self.assertRaises(CommandError) as caught:
            call_command('label_points', '--L', '6', '--T', '6', '--n-traj', '1', '--out', str(self.dir / 'l.csv'))
        self.assertEqual(caught.exception.returncode, 2)

    def test_sweep(self):
        labels = self.dir / 'labels.csv'
        labels.write_text('point_id,label\ninner_trivial,1\ninner_lr,2\ninner_spt,3\n')
        out = self.dir / 'sweep.csv'
        call_command('sweep', '--param', 'LA', '--values', '2', '4', '--L', '4', '--T', '6', '--M', '8',
                     '--eval-M', '4', '--N', '4', '--h1', '2', '--h2', '2', '--epochs', '1', '--lr', '1e-3',
                     '--models', '1', '--R', '2', '--roles', 'inner', '--labels', str(labels), '--out', str(out))
        frame = pd.read_csv(out)
        self.assertEqual(frame['value'].tolist(), [2, 4])
        self.assertEqual(frame['channels'].tolist(), ['x,zz', 'x,zz,zxz'])
        self.assertTrue(frame['P_mean'].between(0, 1).all())


class LabelDefaultsTests(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / 'labels.csv'
        self.points = [GridPoint(0.7, 0.15, 0.15, role='inner', point_id='a'),
                       GridPoint(0.15, 0.7, 0.15, role='inner', point_id='b')]

    def tearDown(self):
        self.tmp.cleanup()

    @override_settings(MIPT_ORACLE=SMALL_ORACLE)
    def test_missing_file_is_labelled_by_the_oracle(self):
        labels = ensure_labels(self.points, self.path)
        self.assertEqual(sorted(labels), ['a', 'b'])
        self.assertTrue(set(labels.values()) <= {1, 2, 3})
        self.assertEqual(pd.read_csv(self.path)['point_id'].tolist(), ['a', 'b'])
        manifest = RunManifest.objects.get(command='label_points')
        self.assertEqual(manifest.config_snapshot['points'], ['a', 'b'])
        self.assertEqual(manifest.outputs, [str(self.path)])

    def test_complete_file_is_reused(self):
        self.path.write_text('point_id,label\na,1\nb,2\n')
        with mock.patch('app.runs.services.label_points') as oracle:
            self.assertEqual(ensure_labels(self.points, self.path), {'a': 1, 'b': 2})
        oracle.assert_not_called()

    @override_settings(MIPT_ORACLE=SMALL_ORACLE)
    def test_incomplete_file_is_relabelled(self):
        self.path.write_text('point_id,label\na,1\n')
        labels = ensure_labels(self.points, self.path)
        self.assertEqual(sorted(labels), ['a', 'b'])
        self.assertEqual(len(pd.read_csv(self.path)), 2)


@tag('slow')
class CliScaleTests(TestCase):

    def test_default_record_geometry(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'full.mipt'
            call_command('simulate', '--vertex', 'trivial', '--M', '20', '--out', str(path), '--threads', '4')
            dataset = load_dataset(path)
            self.assertEqual((dataset.T, dataset.L), (72, 12))
            blob = path.read_bytes()
            (length,) = struct.unpack('<I', blob[8:12])
            self.assertEqual(len(blob) - 12 - length, 20 * 188)
