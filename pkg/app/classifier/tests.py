import json
import struct
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from app.core.exceptions import DomainError, FormatError
from app.trajectories.records import CircuitConfig, Dataset, RecordBatch
from .architectures import ArchHyper, ModelFactory
from .checkpoints import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .inputs import flatten_records, reshape_records
from .prediction import SetPrediction, forward_set, init_model, mlp_forward, predict_dataset, predict_resampled


def random_batch(N, T, L, seed=0):
    rng = np.random.default_rng(seed)
    signs = lambda *shape: rng.choice(np.array([-1, 1], dtype=np.int8), size=shape)
    return RecordBatch(signs(N, T, L), signs(N, T // 2, L - 1), signs(N, T // 3, L - 2))


def random_dataset(M, T, L, seed=0):
    batch = random_batch(M, T, L, seed)
    config = CircuitConfig(L=L, T=T, gamma_x=0.4, gamma_zz=0.3, gamma_zxz=0.3)
    return Dataset(config, batch.x, batch.zz, batch.zxz, np.arange(M, dtype=np.uint64))


class ReshapeTests(SimpleTestCase):

    def test_reference_shapes(self):
        out = reshape_records(random_batch(2, 72, 12))
        self.assertEqual(out['x'].shape, (2, 6, 12, 12))
        self.assertEqual(out['zz'].shape, (2, 3, 12, 11))
        self.assertEqual(out['zxz'].shape, (2, 2, 12, 10))
        self.assertEqual(out['x'][0].size, 72 * 12)

    def test_index_maps(self):
        batch = random_batch(1, 12, 5, seed=3)
        out = reshape_records(batch)
        for t in range(12):
            np.testing.assert_array_equal(out['x'][0, t % 6, t // 6], batch.x[0, t])
        for r in range(6):
            np.testing.assert_array_equal(out['zz'][0, r % 3, r // 3], batch.zz[0, r])
        for r in range(4):
            np.testing.assert_array_equal(out['zxz'][0, r % 2, r // 2], batch.zxz[0, r])

    def test_depth_six_is_one_time_block(self):
        batch = random_batch(1, 6, 4)
        np.testing.assert_array_equal(reshape_records(batch)['x'][0, :, 0], batch.x[0])

    def test_rejects_bad_depth(self):
        batch = random_batch(1, 6, 4)
        with self.assertRaises(DomainError):
            reshape_records(RecordBatch(batch.x[:, :4], batch.zz[:, :2], batch.zxz[:, :1]))

    def test_flat_dimension(self):
        self.assertEqual(flatten_records(random_batch(3, 72, 12)).shape, (3, 1500))


class ModelTests(SimpleTestCase):

    def test_init_is_seeded(self):
        arch = ArchHyper(T=12, L=6, h1=3, h2=2)
        first, again, other = init_model(arch, 5), init_model(arch, 5), init_model(arch, 6)
        for a, b in zip(first.parameters(), again.parameters()):
            np.testing.assert_array_equal(a.data, b.data)
        self.assertFalse(np.array_equal(first.p('conv.x.weight').data, other.p('conv.x.weight').data))

    def test_init_ranges(self):
        model = init_model(ArchHyper(T=72, L=12), 0)
        self.assertEqual(model.p('conv.x.weight').size, 432)
        self.assertTrue(np.all(np.abs(model.p('conv.x.weight').data) <= 1 / np.sqrt(54)))
        self.assertTrue(np.all(np.abs(model.p('attention.O').data) <= 1 / np.sqrt(12)))
        self.assertFalse(np.any(model.p('fusion.bias').data))
        np.testing.assert_array_equal(model.p('bn.zz.scale').data, 1.0)

    def test_parameter_shapes_do_not_depend_on_set_size(self):
        model = init_model(ArchHyper(T=12, L=5, h1=2, h2=2), 1)
        for N in (1, 4, 9):
            self.assertEqual(forward_set(model, random_batch(N, 12, 5, seed=N)).y.shape, (3,))

    def test_simplex_output(self):
        for kind in ModelFactory.get_available_models():
            model = init_model(ArchHyper(T=12, L=5, kind=kind, h1=2, h2=3, hidden=4), 2)
            y = forward_set(model, random_batch(4, 12, 5)).y
            self.assertAlmostEqual(y.sum(), 1.0, delta=1e-9)
            self.assertTrue(np.all(y >= 0))

    def test_zero_head_is_uniform(self):
        model = init_model(ArchHyper(T=12, L=5, h1=2, h2=4), 3)
        model.p('output.weight').assign(np.zeros((2, 3)))
        y = forward_set(model, random_batch(3, 12, 5)).y
        np.testing.assert_array_equal(y, np.full(3, 1 / 3))

    def test_mlp_zero_weights_are_uniform(self):
        model = init_model(ArchHyper(T=6, L=4, kind='mlp', hidden=3), 0)
        for param in model.parameters():
            param.assign(np.zeros(param.shape))
        record = random_dataset(1, 6, 4)[0]
        np.testing.assert_array_equal(mlp_forward(model, record), np.full(3, 1 / 3))
        self.assertEqual(init_model(ArchHyper(T=72, L=12, kind='mlp'), 0).p('W1').shape, (1500, 128))

    def test_geometry_mismatch(self):
        model = init_model(ArchHyper(T=12, L=6, h1=2, h2=2), 0)
        with self.assertRaises(DomainError):
            forward_set(model, random_batch(2, 12, 5))

    def test_channel_subset(self):
        arch = ArchHyper(T=12, L=2, channels=('x', 'zz'), h1=2, h2=2)
        model = init_model(arch, 0)
        self.assertEqual(model.p('fusion.weight').shape, (4, 2))
        self.assertNotIn('conv.zxz.weight', [p.name for p in model.parameters()])
        batch = random_batch(3, 12, 6)
        narrow = RecordBatch(batch.x[:, :, 2:4], batch.zz[:, :, 2:3], batch.zxz[:, :, 2:2])
        self.assertEqual(forward_set(model, narrow).y.shape, (3,))
        with self.assertRaises(DomainError):
            ArchHyper(T=12, L=2)

    def test_eval_permutation_invariance(self):
        rng = np.random.default_rng(9)
        for kind in ('cnn_attn', 'cnn_mean'):
            model = init_model(ArchHyper(T=12, L=6, kind=kind, h1=3, h2=3), 4)
            batch = random_batch(8, 12, 6, seed=10)
            base = forward_set(model, batch).y
            for _ in range(20):
                shuffled = batch.take(rng.permutation(8))
                np.testing.assert_allclose(forward_set(model, shuffled).y, base, atol=1e-12)


class GradientCheckTests(SimpleTestCase):

    def _check(self, model, batch, label):
        for param in model.parameters():
            param.zero_grad()
        model.training_loss(batch, label).backward()
        for param in model.parameters():
            analytic = param.grad.copy()
            numeric = np.zeros_like(param.data)
            for idx in np.ndindex(param.shape):
                saved = param.data[idx]
                param.data[idx] = saved + 1e-6
                up = model.training_loss(batch, label).item()
                param.data[idx] = saved - 1e-6
                down = model.training_loss(batch, label).item()
                param.data[idx] = saved
                numeric[idx] = (up - down) / 2e-6
            np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8, err_msg=param.name)

    def test_full_model_gradients(self):
        model = init_model(ArchHyper(T=12, L=6, h1=2, h2=2, dropout_p=0.0), 11)
        self._check(model, random_batch(4, 12, 6, seed=12), label=1)

    def test_mlp_gradients(self):
        model = init_model(ArchHyper(T=6, L=4, kind='mlp', hidden=3), 13)
        self._check(model, random_batch(3, 6, 4, seed=14), label=2)


class DatasetPredictionTests(SimpleTestCase):

    def setUp(self):
        self.model = init_model(ArchHyper(T=12, L=5, h1=2, h2=2), 7)
        self.dataset = random_dataset(12, 12, 5, seed=8)

    def test_single_set(self):
        whole = predict_dataset(self.model, random_dataset(4, 12, 5, seed=1), 4)
        self.assertEqual(whole.sets, 1)
        np.testing.assert_allclose(whole.y, forward_set(self.model, random_dataset(4, 12, 5, seed=1).batch()).y, atol=1e-15)

    def test_remainder_is_dropped(self):
        prediction = predict_dataset(self.model, self.dataset, 5)
        self.assertEqual((prediction.sets, prediction.dropped), (2, 2))

    def test_set_permutation_invariance(self):
        base = predict_dataset(self.model, self.dataset, 4).y
        order = np.concatenate([np.arange(8, 12), np.arange(0, 4), np.arange(4, 8)])
        permuted = Dataset(self.dataset.config, self.dataset.x[order], self.dataset.zz[order],
                           self.dataset.zxz[order], self.dataset.seeds[order])
        np.testing.assert_allclose(predict_dataset(self.model, permuted, 4).y, base, atol=1e-12)

    def test_too_few_trajectories(self):
        with self.assertRaises(DomainError):
            predict_dataset(self.model, self.dataset, 13)

    def test_resampled_is_seeded(self):
        first = predict_resampled(self.model, self.dataset, 4, 5, seed=3)
        again = predict_resampled(self.model, self.dataset, 4, 5, seed=3)
        np.testing.assert_array_equal(first.y, again.y)
        self.assertEqual(first.sets, 5)

    def test_label_tie_break(self):
        self.assertEqual(SetPrediction(np.full(3, 1 / 3), n=1).label, 1)
        self.assertEqual(SetPrediction([0.2, 0.7, 0.1], n=1).label, 2)


class CheckpointTests(SimpleTestCase):

    def test_round_trip_is_bit_exact(self):
        rng = np.random.default_rng(21)
        kinds = ModelFactory.get_available_models()
        for case in range(1000):
            kind = kinds[case % len(kinds)]
            geometry = dict(T=6 * int(rng.integers(1, 3)), L=int(rng.integers(3, 6)), kind=kind)
            if kind == 'mlp':
                arch = ArchHyper(hidden=int(rng.integers(1, 4)), **geometry)
            else:
                arch = ArchHyper(h1=int(rng.integers(1, 3)), h2=int(rng.integers(1, 3)), **geometry)
            model = init_model(arch, int(rng.integers(0, 2 ** 32)))
            for param in model.parameters():
                param.assign(rng.normal(scale=10.0 ** rng.integers(-5, 5), size=param.shape))
            blob = encode_checkpoint(model)
            restored = decode_checkpoint(blob)
            self.assertEqual(restored.arch, arch)
            self.assertEqual(encode_checkpoint(restored), blob)

    def test_manifest_lists_every_tensor(self):
        model = init_model(ArchHyper(T=12, L=6, h1=2, h2=2), 0)
        blob = encode_checkpoint(model)
        (length,) = struct.unpack('<I', blob[8:12])
        header = json.loads(blob[12:12 + length])
        # conv (3), BN scale and shift (6), fusion (4), readout (2), attention (3), head (6), output (2)
        self.assertEqual(len(model.parameters()), 26)
        self.assertEqual(len(header['tensors']), 26 + 6)
        offsets = [t['offset'] for t in header['tensors']]
        self.assertEqual(offsets, sorted(offsets))
        self.assertEqual(len(blob) - 12 - length, 8 * sum(int(np.prod(t['shape'])) for t in header['tensors']))

    def test_file_round_trip(self):
        model = init_model(ArchHyper(T=6, L=4, kind='mlp', hidden=2), 3)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(model, Path(tmp) / 'model.ck')
            self.assertEqual(path.read_bytes(), encode_checkpoint(load_checkpoint(path)))

    def test_corrupt_input(self):
        blob = encode_checkpoint(init_model(ArchHyper(T=6, L=4, kind='mlp', hidden=2), 3))
        with self.assertRaises(FormatError):
            decode_checkpoint(b'MIPTDS01' + blob[8:])
        with self.assertRaises(FormatError):
            decode_checkpoint(blob[:-8])
