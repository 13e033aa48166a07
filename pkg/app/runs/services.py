"""Run provenance.

Every command stores a ``RunManifest`` row and writes ``<output>.manifest.json``
next to each file it produced. The sidecar is written even when the database
is unavailable.
"""
import json
import logging
import subprocess
import time
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from django.conf import settings
from django.db import DatabaseError

from app.core.storage import PathLike, atomic_write_text
from app.evaluation.points import label_points, load_labels, write_labels
from app.evaluation.services import GridPoint
from app.trajectories.records import CircuitConfig
from .models import RunManifest

logger = logging.getLogger(__name__)

SIDECAR_SUFFIX = '.manifest.json'


def git_describe() -> str:
    try:
        result = subprocess.run(
            ['git', 'describe', '--always', '--dirty', '--tags'],
            cwd=settings.BASE_DIR, capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return 'unknown'
    return result.stdout.strip() if result.returncode == 0 else 'unknown'


def sidecar_path(output: PathLike) -> Path:
    output = Path(output)
    return output.with_name(output.name + SIDECAR_SUFFIX)


def _jsonable(value):
    return json.loads(json.dumps(value, default=str))


def record_run(command: str, config: dict, seeds: Iterable[int], wall_time: float,
               outputs: Iterable[PathLike]) -> dict:
    outputs = [str(Path(p)) for p in outputs]
    record = {
        'command': command,
        'config_snapshot': _jsonable(config),
        'seeds': [int(s) for s in seeds],
        'git_describe': git_describe(),
        'wall_time': round(float(wall_time), 6),
        'outputs': outputs,
    }
    run_id: Optional[int] = None
    try:
        run_id = RunManifest.objects.create(**record).pk
    except DatabaseError as e:
        logger.warning(f"Could not store the {command} run manifest in the database: {e}")
    record['run_id'] = run_id

    for output in outputs:
        atomic_write_text(sidecar_path(output), json.dumps(record, sort_keys=True, indent=2))
    logger.info(f"Recorded {command} run {run_id} with {len(outputs)} output(s)")
    return record


def vertex_gammas(name: str):
    return tuple(settings.MIPT_VERTICES[name])


def vertex_configs(L: int, T: int, master_seed: int) -> List[CircuitConfig]:
    """Training configurations in class order: trivial, long-range, SPT."""
    return [CircuitConfig(L, T, *vertex_gammas(name), master_seed=master_seed, point_id=f'vertex_{name}')
            for name in ('trivial', 'lr', 'spt')]


def ensure_labels(points: Sequence[GridPoint], path: Optional[PathLike] = None, threads: int = 1) -> Dict[str, int]:
    """Ground-truth labels for ``points`` from the default labels file.

    When the file is missing or lacks one of the points, every point is
    relabelled by the diagnostics oracle (``MIPT_ORACLE``), the file is
    rewritten and the labelling run is recorded.
    """
    path = Path(path or settings.MIPT_TEST_LABELS_FILE)
    if path.exists():
        labels = load_labels(path)
        missing = [p.point_id for p in points if p.point_id not in labels]
        if not missing:
            return labels
        logger.warning(f"{path} has no label for {missing}; relabelling every test point")

    oracle = settings.MIPT_ORACLE
    started = time.perf_counter()
    labelled = label_points(points, oracle['L'], oracle['T'], oracle['n_traj'],
                            master_seed=oracle['seed'], threads=threads)
    write_labels(labelled, path)
    record_run('label_points',
               {**oracle, 'thresholds': settings.MIPT_LABEL_THRESHOLDS,
                'points': [p.point_id for p in points], 'out': str(path)},
               [oracle['seed']], time.perf_counter() - started, [path])
    return {p.point_id: label for p, label, _ in labelled}
