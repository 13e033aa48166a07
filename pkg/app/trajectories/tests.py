import math

import numpy as np
from django.test import SimpleTestCase, tag

from app.core.exceptions import DomainError, ResourceError
from .diagnostics import (
    entropy_curve, half_chain_entropy, mutual_information, topological_ee, von_neumann_entropy,
)
from .kraus import PAULI_X, kraus_pair, observable_matrix, theta_of_gamma
from .records import CircuitConfig, crop_dataset, grid_shapes, record_dimension, truncate_dataset
from .seeding import make_rng, trajectory_seed, trajectory_seeds
from .simulator import (
    brute_force_outcome_distribution, event_schedule, generate_dataset, simulate_trajectory,
)
from .statevector import apply_local, apply_weak_measurement, expectation, initial_state

PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
GAMMA_GRID = [round(0.1 * k, 1) for k in range(11)]


def ghz(L):
    state = np.zeros(1 << L, dtype=np.complex128)
    state[0] = state[-1] = 1 / math.sqrt(2)
    return state


def cluster_state(L):
    index = np.arange(1 << L)
    bits = [(index >> (L - 1 - q)) & 1 for q in range(L)]
    parity = sum(bits[q] * bits[q + 1] for q in range(L - 1))
    return ((-1.0) ** parity).astype(np.complex128) / math.sqrt(1 << L)


def fidelity(a, b):
    return abs(np.vdot(a, b)) ** 2


def projected_state(observable, L):
    """The initial state after a +1 projective measurement of ``observable`` at every site."""
    q = observable_matrix(observable)
    projector = (np.eye(q.shape[0]) + q) / 2
    span = q.shape[0].bit_length() - 1
    state = initial_state(L)
    for site in range(L - span + 1):
        state = apply_local(state, projector, site, L)
    return state / np.linalg.norm(state)


class KrausAlgebraTests(SimpleTestCase):

    def test_theta_of_gamma(self):
        self.assertAlmostEqual(theta_of_gamma(0.0), math.pi / 4, places=15)
        self.assertEqual(theta_of_gamma(1.0), 0.0)
        self.assertAlmostEqual(theta_of_gamma(0.85), 0.15 * math.pi / 4, places=15)
        with self.assertRaises(DomainError):
            theta_of_gamma(1.5)

    def test_completeness_over_gamma_grid(self):
        for observable in ('X', 'ZZ', 'ZXZ'):
            for gamma in GAMMA_GRID:
                self.assertLessEqual(kraus_pair(observable, gamma).completeness_defect(), 1e-12)

    def test_projective_and_identity_limits(self):
        for observable in ('X', 'ZZ', 'ZXZ'):
            q = observable_matrix(observable)
            identity = np.eye(q.shape[0])
            pair = kraus_pair(observable, 1.0)
            np.testing.assert_array_equal(pair.m1, (identity + q) / 2)
            np.testing.assert_array_equal(pair.m2, (identity - q) / 2)
            pair = kraus_pair(observable, 0.0)
            np.testing.assert_array_equal(pair.m1, identity / math.sqrt(2))
            np.testing.assert_array_equal(pair.m2, identity / math.sqrt(2))

    def test_matrix_sizes(self):
        self.assertEqual(kraus_pair('ZZ', 0.3).m1.shape, (4, 4))
        self.assertEqual(kraus_pair('ZXZ', 0.3).m2.shape, (8, 8))


class StatevectorTests(SimpleTestCase):

    def test_initial_state_single_qubit(self):
        np.testing.assert_allclose(initial_state(1), [1 / math.sqrt(2), 1j / math.sqrt(2)], atol=1e-15)

    def test_initial_state_expectations(self):
        state = initial_state(2)
        self.assertAlmostEqual(np.vdot(state, state).real, 1.0, places=12)
        for site in range(2):
            self.assertAlmostEqual(expectation(state, PAULI_Y, site), 1.0, places=12)
            self.assertAlmostEqual(expectation(state, PAULI_X, site), 0.0, places=12)

    def test_initial_state_resource_guard(self):
        with self.settings(MIPT_MAX_QUBITS=10):
            with self.assertRaises(ResourceError):
                initial_state(11)

    def test_initial_state_has_no_entanglement(self):
        self.assertAlmostEqual(half_chain_entropy(initial_state(12)), 0.0, places=9)

    def test_zero_mean_observable_gives_half(self):
        for gamma in GAMMA_GRID:
            _, _, p1 = apply_weak_measurement(initial_state(3), 'X', 1, gamma, make_rng(7))
            self.assertAlmostEqual(p1, 0.5, places=12)

    def test_eigenstate_fixed_point(self):
        plus = np.ones(8, dtype=np.complex128) / math.sqrt(8)
        for gamma in (0.2, 0.7, 1.0):
            theta = theta_of_gamma(gamma)
            for seed in range(5):
                post, outcome, p1 = apply_weak_measurement(plus, 'X', 0, gamma, make_rng(seed))
                self.assertAlmostEqual(p1, math.cos(theta) ** 2, places=12)
                self.assertAlmostEqual(fidelity(post, plus), 1.0, delta=1e-10)

    def test_zero_strength_is_identity(self):
        state = ghz(4)
        for observable, site in (('X', 2), ('ZZ', 1), ('ZXZ', 0)):
            post, _, p1 = apply_weak_measurement(state, observable, site, 0.0, make_rng(3))
            self.assertAlmostEqual(p1, 0.5, delta=1e-15)
            self.assertAlmostEqual(fidelity(post, state), 1.0, delta=1e-12)

    def test_projective_repeat(self):
        rng = make_rng(11)
        state = initial_state(4)
        for _ in range(20):
            once, first, _ = apply_weak_measurement(state, 'ZXZ', 1, 1.0, rng)
            _, second, p1 = apply_weak_measurement(once, 'ZXZ', 1, 1.0, rng)
            self.assertEqual(first, second)
            self.assertAlmostEqual(p1, 1.0 if first == 1 else 0.0, places=12)

    def test_support_must_fit(self):
        with self.assertRaises(DomainError):
            apply_weak_measurement(initial_state(3), 'ZXZ', 1, 0.5, make_rng(0))

    def test_apply_local_acts_on_one_qubit(self):
        state = initial_state(3)
        # each qubit is a +1 eigenstate of Y
        np.testing.assert_allclose(apply_local(state, PAULI_Y, 1, 3), state, atol=1e-15)
        flipped = apply_local(state, PAULI_X, 1, 3)
        self.assertAlmostEqual(fidelity(flipped, state), 0.0, places=12)


class SimulatorTests(SimpleTestCase):

    def setUp(self):
        self.config = CircuitConfig(L=5, T=6, gamma_x=0.5, gamma_zz=0.3, gamma_zxz=0.2, master_seed=42)

    def test_config_validation(self):
        with self.assertRaises(DomainError):
            CircuitConfig(L=6, T=6, gamma_x=0.5, gamma_zz=0.5, gamma_zxz=0.1)
        with self.assertRaises(DomainError):
            CircuitConfig(L=2, T=6, gamma_x=1.0, gamma_zz=0.0, gamma_zxz=0.0)

    def test_reference_geometry(self):
        self.assertEqual(grid_shapes(72, 12), ((72, 12), (36, 11), (24, 10)))
        self.assertEqual(record_dimension(72, 12), 1500)

    def test_record_shapes(self):
        config = CircuitConfig(L=12, T=72, gamma_x=0.3, gamma_zz=0.4, gamma_zxz=0.3)
        record = simulate_trajectory(config, 5)
        self.assertEqual(record.x_outcomes.shape, (72, 12))
        self.assertEqual(record.zz_outcomes.shape, (36, 11))
        self.assertEqual(record.zxz_outcomes.shape, (24, 10))
        for grid in (record.x_outcomes, record.zz_outcomes, record.zxz_outcomes):
            self.assertTrue(np.all(np.abs(grid) == 1))

    def test_schedule_fills_grids_once(self):
        L, T = 7, 6
        counts = {name: np.zeros(shape, dtype=int) for name, shape in zip(('x', 'zz', 'zxz'), grid_shapes(T, L))}
        for channel, site, _, row in event_schedule(T, L):
            counts[channel][row, site] += 1
        for grid in counts.values():
            self.assertTrue(np.all(grid == 1))

    def test_simulation_is_deterministic(self):
        self.assertEqual(simulate_trajectory(self.config, 99), simulate_trajectory(self.config, 99))

    def test_unmeasured_channels_read_plus_one_half_the_time(self):
        config = CircuitConfig(L=4, T=6, gamma_x=1.0, gamma_zz=0.0, gamma_zxz=0.0)
        dataset = generate_dataset(config, 400)
        self.assertAlmostEqual(float((dataset.zz == 1).mean()), 0.5, delta=0.05)

    def test_prefix_stability(self):
        small = generate_dataset(self.config, 2)
        large = generate_dataset(self.config, 4)
        np.testing.assert_array_equal(small.x, large.x[:2])
        np.testing.assert_array_equal(small.seeds, large.seeds[:2])

    def test_dataset_shapes(self):
        config = CircuitConfig(L=3, T=6, gamma_x=0.2, gamma_zz=0.5, gamma_zxz=0.3)
        dataset = generate_dataset(config, 100)
        self.assertEqual((dataset.x.shape, dataset.zz.shape, dataset.zxz.shape),
                         ((100, 6, 3), (100, 3, 2), (100, 2, 1)))

    def test_seed_derivation(self):
        seeds = trajectory_seeds(42, self.config.point_id, 3)
        self.assertEqual(int(seeds[2]), trajectory_seed(42, self.config.point_id, 2))
        self.assertEqual(len(set(int(s) for s in seeds)), 3)

    def test_dataset_identical_across_worker_counts(self):
        serial = generate_dataset(self.config, 40, threads=1, block_size=8)
        parallel = generate_dataset(self.config, 40, threads=4, block_size=8)
        for name in ('x', 'zz', 'zxz', 'seeds'):
            self.assertEqual(getattr(serial, name).tobytes(), getattr(parallel, name).tobytes())

    def test_crop_and_truncate(self):
        config = CircuitConfig(L=6, T=12, gamma_x=0.4, gamma_zz=0.3, gamma_zxz=0.3)
        dataset = generate_dataset(config, 3)
        narrow = crop_dataset(dataset, 2)
        self.assertEqual(narrow.x.shape, (3, 12, 2))
        self.assertEqual(narrow.zz.shape, (3, 6, 1))
        self.assertEqual(narrow.zxz.shape[2], 0)
        np.testing.assert_array_equal(narrow.x, dataset.x[:, :, 2:4])
        short = truncate_dataset(dataset, 6)
        self.assertEqual((short.T, short.zz.shape[1], short.zxz.shape[1]), (6, 3, 2))
        with self.assertRaises(DomainError):
            crop_dataset(dataset, 3)


class OracleTests(SimpleTestCase):

    def test_leaf_probabilities_sum_to_one(self):
        for gammas in ((0.5, 0.3, 0.2), (1 / 3, 1 / 3, 1 / 3), (0.1, 0.1, 0.8)):
            config = CircuitConfig(3, 1, *gammas)
            leaves = brute_force_outcome_distribution(config)
            self.assertEqual(len(leaves), 32)
            self.assertAlmostEqual(sum(leaves.values()), 1.0, delta=1e-9)

    def test_projective_triplet_repeats(self):
        config = CircuitConfig(3, 4, 0.0, 0.0, 1.0)
        leaves = brute_force_outcome_distribution(config)
        schedule = event_schedule(4, 3)
        positions = [k for k, event in enumerate(schedule) if event[0] == 'zxz']
        self.assertEqual(len(positions), 2)
        repeated = sum(p for seq, p in leaves.items() if seq[positions[0]] == seq[positions[1]])
        self.assertAlmostEqual(repeated, 1.0, delta=1e-12)

    def test_enumeration_guard(self):
        with self.assertRaises(ResourceError):
            brute_force_outcome_distribution(CircuitConfig(6, 6, 0.4, 0.3, 0.3))

    @tag('slow')
    def test_sampler_matches_oracle(self):
        config = CircuitConfig(3, 1, 0.5, 0.3, 0.2, master_seed=2024)
        leaves = brute_force_outcome_distribution(config)
        n = 100_000
        dataset = generate_dataset(config, n, threads=4, block_size=5000)
        grids = {'x': dataset.x, 'zz': dataset.zz, 'zxz': dataset.zxz}
        columns = [grids[channel][:, row, site] for channel, site, _, row in event_schedule(1, 3)]
        sequences, counts = np.unique(np.stack(columns, axis=1), axis=0, return_counts=True)
        observed = {tuple(int(v) for v in seq): int(c) for seq, c in zip(sequences, counts)}
        for sequence, p in leaves.items():
            frequency = observed.get(sequence, 0) / n
            sigma = math.sqrt(p * (1 - p) / n)
            self.assertLessEqual(abs(frequency - p), 4 * sigma + 1e-12, msg=f"leaf {sequence}")


class EntropyTests(SimpleTestCase):

    def test_product_state(self):
        state = initial_state(6)
        self.assertAlmostEqual(von_neumann_entropy(state, [0, 1, 2]), 0.0, places=9)
        self.assertAlmostEqual(mutual_information(state, [0], [5]), 0.0, places=9)
        self.assertAlmostEqual(topological_ee(initial_state(8)), 0.0, places=9)

    def test_bell_pair(self):
        bell = ghz(2)
        self.assertAlmostEqual(von_neumann_entropy(bell, [0]), 1.0, places=12)
        self.assertAlmostEqual(mutual_information(bell, [0], [1]), 2.0, places=12)

    def test_ghz(self):
        self.assertAlmostEqual(von_neumann_entropy(ghz(4), [0, 1]), 1.0, places=12)
        self.assertAlmostEqual(mutual_information(ghz(4), [0], [3]), 1.0, places=12)
        self.assertAlmostEqual(topological_ee(ghz(8)), 0.0, places=12)

    def test_cluster_state(self):
        state = cluster_state(8)
        self.assertAlmostEqual(von_neumann_entropy(state, [2, 3]), 2.0, places=9)
        # both edges are fixed locally
        self.assertAlmostEqual(topological_ee(state), 0.0, places=9)

    def test_measured_cluster_state_pairs_its_edges(self):
        for L in (8, 12):
            state = projected_state('ZXZ', L)
            self.assertAlmostEqual(topological_ee(state), 2.0, places=9)
            self.assertAlmostEqual(half_chain_entropy(state), 2.0, places=9)

    def test_measured_ghz_state_has_no_topological_entropy(self):
        state = projected_state('ZZ', 8)
        self.assertAlmostEqual(topological_ee(state), 0.0, places=9)
        self.assertAlmostEqual(mutual_information(state, [0], [7]), 1.0, places=9)
        self.assertAlmostEqual(topological_ee(projected_state('X', 8)), 0.0, places=9)

    def test_complement_symmetry(self):
        rng = np.random.default_rng(5)
        state = rng.normal(size=64) + 1j * rng.normal(size=64)
        state /= np.linalg.norm(state)
        self.assertAlmostEqual(von_neumann_entropy(state, [0, 3]), von_neumann_entropy(state, [1, 2, 4, 5]), delta=1e-9)

    def test_domain_errors(self):
        with self.assertRaises(DomainError):
            mutual_information(ghz(4), [0, 1], [1, 2])
        with self.assertRaises(DomainError):
            topological_ee(ghz(6))
        with self.assertRaises(DomainError):
            von_neumann_entropy(ghz(3), [0, 1, 2])

    def test_curve_starts_at_zero(self):
        config = CircuitConfig(6, 12, 0.3, 0.4, 0.3, master_seed=1)
        report = entropy_curve(config, [0, 6, 12], n_traj=4)
        self.assertEqual(report.s_half[0], 0.0)
        self.assertIsNone(report.s_topo)
        for value in report.s_half:
            self.assertGreaterEqual(value, -1e-9)
            self.assertLessEqual(value, 3.0)

    def test_projective_x_collapses_entanglement(self):
        config = CircuitConfig(4, 6, 1.0, 0.0, 0.0)
        report = entropy_curve(config, range(7), n_traj=3)
        for value in report.s_half[1:]:
            self.assertAlmostEqual(value, 0.0, places=9)

    @tag('slow')
    def test_entropy_saturates(self):
        config = CircuitConfig(8, 32, 0.3, 0.4, 0.3, master_seed=17)
        report = entropy_curve(config, [0, 16, 32], n_traj=200, threads=4)
        self.assertEqual(report.s_half[0], 0.0)
        self.assertLessEqual(abs(report.s_half[1] - report.s_half[2]), 0.1 * report.s_half[2])

    @tag('slow')
    def test_phase_signatures_at_vertices(self):
        def averaged(gammas):
            return entropy_curve(CircuitConfig(8, 48, *gammas, master_seed=3), [48], n_traj=200, threads=4)

        trivial = averaged((0.85, 0.075, 0.075))
        lr = averaged((0.075, 0.85, 0.075))
        spt = averaged((0.075, 0.075, 0.85))
        self.assertGreaterEqual(lr.mi, 5 * max(trivial.mi, 1e-3))
        self.assertGreaterEqual(spt.s_topo - trivial.s_topo, 0.5)
