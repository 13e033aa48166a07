"""Test-point sets and ground-truth labels.

Test points are configuration data (``MIPT_TEST_POINTS_FILE``): a CSV with
columns ``point_id, role, gamma_x, gamma_zz, gamma_zxz``. Ground-truth labels
come from a CSV with columns ``point_id, label`` produced by ``label_points``.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from django.conf import settings
from joblib import Parallel, delayed

from app.core.circuit_breaker import PointCircuitBreaker, capture, raise_or_return
from app.core.exceptions import DomainError, FormatError
from app.core.storage import PathLike, atomic_write_text
from app.trajectories.diagnostics import entropy_curve
from app.trajectories.records import EntropyReport
from .services import GridPoint

logger = logging.getLogger(__name__)

POINT_COLUMNS = ['point_id', 'role', 'gamma_x', 'gamma_zz', 'gamma_zxz']
LABEL_COLUMNS = ['point_id', 'label']


def _read_csv(path: PathLike, columns: Sequence[str], what: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, comment='#', dtype={'point_id': str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError(f"cannot read {what} file {path}: {e}") from e
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise FormatError(f"{what} file {path} lacks column(s) {missing}")
    return frame


def load_test_points(path: Optional[PathLike] = None, roles: Optional[Sequence[str]] = None) -> List[GridPoint]:
    path = path or settings.MIPT_TEST_POINTS_FILE
    frame = _read_csv(path, POINT_COLUMNS, 'test-point')
    points = []
    for row in frame.itertuples(index=False):
        try:
            point = GridPoint(float(row.gamma_x), float(row.gamma_zz), float(row.gamma_zxz),
                              role=str(row.role), point_id=str(row.point_id))
        except DomainError as e:
            raise FormatError(f"invalid test point {row.point_id} in {path}: {e}") from e
        if roles is None or point.role in roles:
            points.append(point)
    logger.info(f"Loaded {len(points)} test point(s) from {path}")
    return points


def load_labels(path: PathLike) -> Dict[str, int]:
    frame = _read_csv(path, LABEL_COLUMNS, 'label')
    labels = {}
    for row in frame.itertuples(index=False):
        label = int(row.label)
        if label not in (1, 2, 3):
            raise FormatError(f"label {label} for {row.point_id} is not a class in 1..3")
        labels[str(row.point_id)] = label
    return labels


def oracle_label(report: EntropyReport, tee_threshold: float, mi_threshold: float) -> int:
    """SPT if the TEE reaches its threshold, else long-range if the end-to-end
    mutual information does, else trivial."""
    if report.s_topo is None:
        raise DomainError("labelling needs the topological entanglement entropy, which requires L divisible by 4")
    if report.s_topo >= tee_threshold:
        return 3
    if report.mi >= mi_threshold:
        return 2
    return 1


def _label_point(point: GridPoint, L: int, T: int, n_traj: int, master_seed: int,
                 thresholds: Dict[str, float]) -> Tuple[int, EntropyReport]:
    report = entropy_curve(point.circuit(L, T, master_seed), [T], n_traj)
    return oracle_label(report, thresholds['tee'], thresholds['mi']), report


def label_points(points: Sequence[GridPoint], L: int, T: int, n_traj: int, master_seed: int = 0,
                 threads: int = 1, thresholds: Optional[Dict[str, float]] = None,
                 guard: Optional[PointCircuitBreaker] = None) -> List[Tuple[GridPoint, int, EntropyReport]]:
    """Ground-truth labels from trajectory-averaged diagnostics of the final state.

    With a ``guard`` a failing point is left out instead of ending the run.
    """
    if L % 4:
        raise DomainError(f"labelling needs L divisible by 4, got L={L}")
    thresholds = thresholds or getattr(settings, 'MIPT_LABEL_THRESHOLDS', {'tee': 1.0, 'mi': 0.5})
    rows = Parallel(n_jobs=max(1, threads))(
        delayed(capture)(_label_point, p, L, T, n_traj, master_seed, thresholds) for p in points
    )
    labelled = []
    for point, outcome in zip(points, rows):
        if guard is None:
            result = raise_or_return(outcome)
        else:
            result = guard.call(point.point_id, raise_or_return, outcome)
        if result is None:
            continue
        label, report = result
        logger.info(f"{point.point_id}: TEE={report.s_topo:.3f}, MI={report.mi:.3f} -> class {label}")
        labelled.append((point, label, report))
    return labelled


def write_labels(labelled: Sequence[Tuple[GridPoint, int, EntropyReport]], path: PathLike):
    frame = pd.DataFrame({
        'point_id': [p.point_id for p, _, _ in labelled],
        'role': [p.role for p, _, _ in labelled],
        'gamma_x': [p.gamma_x for p, _, _ in labelled],
        'gamma_zz': [p.gamma_zz for p, _, _ in labelled],
        'gamma_zxz': [p.gamma_zxz for p, _, _ in labelled],
        'label': [label for _, label, _ in labelled],
        'mi': [r.mi for _, _, r in labelled],
        'mi_se': [r.mi_se for _, _, r in labelled],
        's_topo': [r.s_topo for _, _, r in labelled],
        's_topo_se': [r.s_topo_se for _, _, r in labelled],
    })
    return atomic_write_text(path, frame.to_csv(index=False))
