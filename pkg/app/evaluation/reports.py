"""CSV and SVG outputs of the evaluation commands.

SVGs are rendered with a fixed hash salt and without a date stamp, so the
same inputs give byte-identical files.
"""
import io
import logging
from typing import Sequence

import matplotlib
matplotlib.use('Agg')
import numpy as np
import pandas as pd
from matplotlib import rc_context
from matplotlib.colors import to_rgba
from matplotlib.figure import Figure

from app.core.storage import PathLike, atomic_write_bytes, atomic_write_text
from app.trajectories.records import EntropyReport
from .services import AccuracyReport, PhaseDiagram

logger = logging.getLogger(__name__)

CLASS_COLORS = {1: 'purple', 2: 'blue', 3: 'green'}
HOLE_COLOR = 'lightgray'
SVG_PARAMS = {'svg.hashsalt': 'mipt-decoder', 'svg.fonttype': 'none'}
SQRT3_2 = np.sqrt(3) / 2


def ternary_to_cartesian(gamma_zz, gamma_zxz):
    """X-dominated corner at the origin, ZZ to the right, ZXZ on top."""
    gamma_zz = np.asarray(gamma_zz, dtype=np.float64)
    gamma_zxz = np.asarray(gamma_zxz, dtype=np.float64)
    return gamma_zz + 0.5 * gamma_zxz, SQRT3_2 * gamma_zxz


def _svg_bytes(fig: Figure) -> bytes:
    buffer = io.BytesIO()
    with rc_context(SVG_PARAMS):
        fig.savefig(buffer, format='svg', metadata={'Date': None})
    return buffer.getvalue()


def write_phase_diagram_csv(diagram: PhaseDiagram, path: PathLike):
    return atomic_write_text(path, diagram.to_frame().to_csv(index=False))


def accuracy_frame(reports: Sequence[AccuracyReport], roles=None) -> pd.DataFrame:
    """One row per test point, then one summary row (point_id ``*``) per report."""
    roles = roles or {}
    R = max(r.R for r in reports)
    rows = []
    for report in reports:
        for point_id, hits in report.per_point.items():
            row = {'point_id': point_id, 'role': roles.get(point_id, report.points)}
            row.update({f'P_{i + 1}': float(h) for i, h in enumerate(hits)})
            row['P_mean'] = float(np.mean(hits))
            row['SE'] = (float(np.std(hits, ddof=1) / np.sqrt(len(hits))) if len(hits) >= 2 else None)
            rows.append(row)
    for report in reports:
        row = {'point_id': '*', 'role': report.points}
        row.update({f'P_{i + 1}': p for i, p in enumerate(report.P_r)})
        row['P_mean'] = report.mean
        row['SE'] = report.se
        rows.append(row)
    columns = ['point_id', 'role'] + [f'P_{i + 1}' for i in range(R)] + ['P_mean', 'SE']
    return pd.DataFrame(rows, columns=columns)


def write_accuracy_csv(reports: Sequence[AccuracyReport], path: PathLike, roles=None):
    return atomic_write_text(path, accuracy_frame(reports, roles).to_csv(index=False))


def write_entropy_csv(report: EntropyReport, path: PathLike):
    frame = pd.DataFrame({'t': report.times, 's_half': report.s_half, 's_half_se': report.s_half_se})
    frame['mi'] = report.mi
    frame['mi_se'] = report.mi_se
    frame['s_topo'] = report.s_topo
    frame['s_topo_se'] = report.s_topo_se
    frame['n_traj'] = report.n_traj
    return atomic_write_text(path, frame.to_csv(index=False))


def render_phase_diagram(diagram: PhaseDiagram, title: str = '') -> bytes:
    fig = Figure(figsize=(6, 5.4))
    ax = fig.add_subplot(1, 1, 1)
    corners_x, corners_y = ternary_to_cartesian([0, 1, 0, 0], [0, 0, 1, 0])
    ax.plot(corners_x, corners_y, color='black', linewidth=1.0)

    filled = [e for e in diagram.entries if not e.is_hole]
    if filled:
        x, y = ternary_to_cartesian([e.point.gamma_zz for e in filled], [e.point.gamma_zxz for e in filled])
        colors = [to_rgba(CLASS_COLORS[e.label], e.agreement) for e in filled]
        ax.scatter(x, y, c=colors, s=180, marker='h', linewidths=0)
    holes = diagram.holes
    if holes:
        x, y = ternary_to_cartesian([p.gamma_zz for p in holes], [p.gamma_zxz for p in holes])
        ax.scatter(x, y, facecolors='none', edgecolors=HOLE_COLOR, s=180, marker='h')

    ax.text(-0.04, -0.05, 'X (trivial)', ha='center', va='top')
    ax.text(1.04, -0.05, 'ZZ (LR)', ha='center', va='top')
    ax.text(0.5, SQRT3_2 + 0.04, 'ZXZ (SPT)', ha='center', va='bottom')
    for label, color in CLASS_COLORS.items():
        ax.scatter([], [], color=color, label={1: 'trivial', 2: 'LR', 3: 'SPT'}[label])
    ax.legend(loc='upper right', frameon=False)
    if title:
        ax.set_title(title)
    ax.set_aspect('equal')
    ax.set_axis_off()
    return _svg_bytes(fig)


def write_phase_diagram_svg(diagram: PhaseDiagram, path: PathLike, title: str = ''):
    logger.info(f"Rendering phase diagram of {len(diagram.entries)} points to {path}")
    return atomic_write_bytes(path, render_phase_diagram(diagram, title))


def render_entropy_curve(report: EntropyReport) -> bytes:
    fig = Figure(figsize=(5, 3.6))
    ax = fig.add_subplot(1, 1, 1)
    ax.errorbar(report.times, report.s_half, yerr=report.s_half_se, marker='o', markersize=3, capsize=2)
    ax.set_xlabel('t')
    ax.set_ylabel('S(L/2) [bits]')
    if report.config is not None:
        ax.set_title(f"L={report.config.L}, gammas={report.config.gammas}, {report.n_traj} trajectories")
    fig.tight_layout()
    return _svg_bytes(fig)


def write_entropy_svg(report: EntropyReport, path: PathLike):
    return atomic_write_bytes(path, render_entropy_curve(report))
