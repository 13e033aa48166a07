import os
import tempfile
from pathlib import Path
from unittest import mock

from django.core.cache import cache
from django.test import SimpleTestCase

from .circuit_breaker import PointCircuitBreaker, capture, raise_or_return, status_key
from .exceptions import DomainError, FormatError, RunAbortedError
from .storage import atomic_write_bytes, atomic_write_text


class AtomicWriteTests(SimpleTestCase):

    def test_write_and_replace(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'nested' / 'out.bin'
            atomic_write_bytes(path, b'first')
            atomic_write_bytes(path, b'second')
            self.assertEqual(path.read_bytes(), b'second')
            self.assertEqual(os.listdir(path.parent), ['out.bin'])

    def test_failed_write_leaves_target_alone(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'out.txt'
            atomic_write_text(path, 'kept')
            with mock.patch('app.core.storage.os.replace', side_effect=OSError('disk full')):
                with self.assertRaises(OSError):
                    atomic_write_text(path, 'lost')
            self.assertEqual(path.read_text(), 'kept')
            self.assertEqual(os.listdir(tmp), ['out.txt'])


class CircuitBreakerTests(SimpleTestCase):

    def failing(self):
        raise FormatError('broken point')

    def test_failure_becomes_hole(self):
        guard = PointCircuitBreaker('unit-hole', fail_max=3)
        self.assertIsNone(guard.call('p1', self.failing))
        self.assertEqual(guard.call('p2', lambda: 7), 7)
        self.assertEqual(guard.get_status()['failed_points'], ['p1'])
        self.assertEqual(guard.get_status()['failure_count'], 0)

    def test_consecutive_failures_abort(self):
        guard = PointCircuitBreaker('unit-abort', fail_max=2)
        guard.call('p1', self.failing)
        with self.assertRaises(RunAbortedError):
            guard.call('p2', self.failing)
        self.assertEqual(cache.get(status_key('unit-abort')), 'OPEN')

    def test_other_errors_propagate(self):
        guard = PointCircuitBreaker('unit-bug', fail_max=5)
        with self.assertRaises(ZeroDivisionError):
            guard.call('p1', lambda: 1 / 0)

    def test_captured_outcomes_replay(self):
        self.assertEqual(raise_or_return(capture(lambda: 3)), 3)
        outcome = capture(self.failing)
        self.assertIsInstance(outcome[1], FormatError)
        with self.assertRaises(FormatError):
            raise_or_return(outcome)
        with self.assertRaises(ZeroDivisionError):
            capture(lambda: 1 / 0)

    def test_domain_errors_are_value_errors(self):
        self.assertTrue(issubclass(DomainError, ValueError))
