import logging
from typing import Any, Callable

from django.conf import settings
from django.core.cache import cache
from pybreaker import CircuitBreaker, CircuitBreakerError, CircuitBreakerListener

from .exceptions import MiptError, RunAbortedError

logger = logging.getLogger(__name__)

STATUS_TTL = 300


class _StatusListener(CircuitBreakerListener):
    """Publishes state transitions to the cache"""

    def __init__(self, run_name: str):
        self.run_name = run_name

    def state_change(self, cb, old_state, new_state):
        state = new_state.name.upper()
        if state == 'OPEN':
            logger.warning(f"Circuit breaker OPENED for {self.run_name}")
        else:
            logger.info(f"Circuit breaker {state} for {self.run_name}")
        cache.set(status_key(self.run_name), state, STATUS_TTL)


def status_key(run_name: str) -> str:
    return f"circuit_breaker:{run_name}:status"


class PointCircuitBreaker:
    """Guards a multi-point run.

    A point whose work raises ``MiptError`` is logged and reported as a hole;
    ``fail_max`` consecutive failures open the breaker and abort the run.
    """

    def __init__(self, run_name: str, fail_max: int = 5, reset_timeout: int = 60):
        self.run_name = run_name
        self.failures = []
        self.breaker = CircuitBreaker(
            fail_max=fail_max,
            reset_timeout=reset_timeout,
            exclude=[KeyboardInterrupt],
            listeners=[_StatusListener(run_name)],
            name=run_name,
        )

    @classmethod
    def from_settings(cls, run_name: str) -> 'PointCircuitBreaker':
        options = getattr(settings, 'MIPT_SWEEP_BREAKER', {})
        return cls(run_name, fail_max=options.get('fail_max', 5), reset_timeout=options.get('reset_timeout', 60))

    def call(self, point: str, func: Callable, *args, **kwargs) -> Any:
        """Result of ``func``, or ``None`` when the point failed."""
        try:
            return self.breaker.call(func, *args, **kwargs)
        except CircuitBreakerError as e:
            raise RunAbortedError(
                f"{self.run_name}: aborting after {self.breaker.fail_counter} consecutive failures "
                f"(last at point {point}): {e}"
            ) from e
        except MiptError as e:
            logger.error(f"{self.run_name}: point {point} failed: {e}")
            self.failures.append((point, str(e)))
            return None

    def get_status(self) -> dict:
        return {
            'run': self.run_name,
            'state': self.breaker.current_state,
            'failure_count': self.breaker.fail_counter,
            'failed_points': [point for point, _ in self.failures],
        }


def raise_or_return(outcome):
    """Replays a worker outcome captured as ``(value, error)`` inside the caller."""
    value, error = outcome
    if error is not None:
        raise error
    return value


def capture(func: Callable, *args, **kwargs):
    """Runs ``func`` in a worker and captures a ``MiptError`` instead of raising it."""
    try:
        return func(*args, **kwargs), None
    except MiptError as e:
        return None, e
