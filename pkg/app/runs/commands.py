"""Shared plumbing for the management commands."""
import logging
import time
from abc import ABC, abstractmethod
from typing import List, Sequence

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from app.core.exceptions import DomainError, MiptError, UsageError
from app.trajectories.records import CHANNELS, normalized_gammas
from .services import record_run

logger = logging.getLogger(__name__)


class RunResult:
    def __init__(self, outputs: Sequence = (), seeds: Sequence[int] = (), config: dict = None):
        self.outputs = list(outputs)
        self.seeds = list(seeds)
        self.config = config or {}


class MiptCommand(BaseCommand, ABC):
    """Runs ``execute_run`` and records its provenance.

    Usage and domain errors exit with status 2, every other decoder error
    with status 1.
    """
    run_name = ''

    def add_arguments(self, parser):
        parser.add_argument('--threads', type=int, default=None,
                            help='Worker count (default: MIPT_THREADS)')
        self.add_run_arguments(parser)

    def add_run_arguments(self, parser):
        pass

    @abstractmethod
    def execute_run(self, options: dict, threads: int) -> RunResult:
        pass

    def handle(self, *args, **options):
        threads = options.get('threads') or getattr(settings, 'MIPT_THREADS', 1)
        if threads < 1:
            raise CommandError(f"--threads must be at least 1, got {threads}", returncode=2)
        started = time.perf_counter()
        try:
            result = self.execute_run(options, threads)
        except (UsageError, DomainError) as e:
            logger.error(f"{self.run_name} rejected its arguments: {e}")
            raise CommandError(str(e), returncode=2) from e
        except MiptError as e:
            logger.error(f"{self.run_name} failed: {e}")
            raise CommandError(str(e), returncode=1) from e
        wall_time = time.perf_counter() - started

        config = {k: v for k, v in options.items()
                  if k not in ('stdout', 'stderr', 'skip_checks', 'no_color', 'force_color', 'traceback',
                               'pythonpath', 'settings', 'verbosity')}
        config.update(result.config)
        config['threads'] = threads
        record_run(self.run_name, config, result.seeds, wall_time, result.outputs)
        self.stdout.write(self.style.SUCCESS(f"{self.run_name} finished in {wall_time:.1f}s"))


def parse_channels(value: str) -> tuple:
    channels = tuple(c.strip() for c in value.split(',') if c.strip())
    unknown = [c for c in channels if c not in CHANNELS]
    if not channels or unknown or len(set(channels)) != len(channels):
        raise UsageError(f"--channels must be a comma-separated subset of {','.join(CHANNELS)}, got {value!r}")
    return tuple(c for c in CHANNELS if c in channels)


def parse_times(value: str, T: int) -> List[int]:
    try:
        times = sorted({int(t) for t in value.split(',') if t.strip()})
    except ValueError as e:
        raise UsageError(f"--times must be comma-separated integers, got {value!r}") from e
    if not times or times[0] < 0 or times[-1] > T:
        raise UsageError(f"--times must lie in [0, {T}], got {value!r}")
    return times


def add_gamma_arguments(parser, default_vertex: str = None):
    parser.add_argument('--gx', type=float, help='X measurement strength')
    parser.add_argument('--gzz', type=float, help='ZZ measurement strength')
    parser.add_argument('--gzxz', type=float, help='ZXZ measurement strength')
    parser.add_argument('--vertex', choices=['trivial', 'lr', 'spt'], default=default_vertex,
                        help='Use the training coordinates of a phase')


def resolve_gammas(options: dict):
    explicit = [options.get(k) for k in ('gx', 'gzz', 'gzxz')]
    if any(v is not None for v in explicit):
        if any(v is None for v in explicit):
            raise UsageError("--gx, --gzz and --gzxz must be given together")
        return normalized_gammas(*explicit)
    if options.get('vertex'):
        return tuple(settings.MIPT_VERTICES[options['vertex']])
    raise UsageError("give --gx/--gzz/--gzxz or --vertex")
