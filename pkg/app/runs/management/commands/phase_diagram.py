import logging
from pathlib import Path

from django.conf import settings

from app.classifier.checkpoints import load_checkpoint
from app.core.circuit_breaker import PointCircuitBreaker
from app.evaluation.reports import write_phase_diagram_csv, write_phase_diagram_svg
from app.evaluation.services import reconstruct_phase_diagram, sample_grid
from app.runs.commands import MiptCommand, RunResult
from app.runs.formats import load_dataset, save_dataset
from app.trajectories.simulator import generate_dataset

logger = logging.getLogger(__name__)

DATASET_SUFFIX = '.mipt'


class Command(MiptCommand):
    help = 'Reconstruct the phase diagram on the sampled grid with one ensemble'
    run_name = 'phase_diagram'

    def add_run_arguments(self, parser):
        parser.add_argument('--models', nargs='+', required=True, help='Checkpoint files')
        parser.add_argument('--data-dir', required=True, help='Directory of <point_id>.mipt grid datasets')
        parser.add_argument('--generate', action='store_true', help='Simulate grid datasets that are missing')
        parser.add_argument('--L', type=int, default=12)
        parser.add_argument('--T', type=int, default=72)
        parser.add_argument('--M', type=int, default=1000)
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--N', type=int, default=settings.MIPT_TRAINING['set_size'])
        parser.add_argument('--grid-out', default='phase_diagram.csv')
        parser.add_argument('--svg', default='phase_diagram.svg')

    @staticmethod
    def _generate(config, M, threads, path):
        dataset = generate_dataset(config, M, threads)
        save_dataset(dataset, path)
        return dataset

    def execute_run(self, options, threads):
        models = [load_checkpoint(path) for path in options['models']]
        expected = settings.MIPT_ENSEMBLE['diagram_models']
        if len(models) != expected:
            logger.warning(f"Phase diagram uses {len(models)} model(s); the reference protocol uses {expected}")

        grid = sample_grid()
        data_dir = Path(options['data_dir'])
        guard = PointCircuitBreaker.from_settings('phase_diagram')
        datasets = {}
        for point in grid:
            path = data_dir / f"{point.point_id}{DATASET_SUFFIX}"
            if path.exists():
                dataset = guard.call(point.point_id, load_dataset, path)
            elif options['generate']:
                config = point.circuit(options['L'], options['T'], options['seed'])
                dataset = guard.call(point.point_id, self._generate, config, options['M'], threads, path)
            else:
                continue
            if dataset is not None:
                datasets[point.point_id] = dataset

        diagram = reconstruct_phase_diagram(models, grid, datasets, options['N'], threads, guard=guard)
        csv_path = write_phase_diagram_csv(diagram, options['grid_out'])
        svg_path = write_phase_diagram_svg(diagram, options['svg'], title=f"{len(models)}-model ensemble")
        self.stdout.write(f"{len(diagram.entries)} grid points, {len(diagram.holes)} hole(s)")
        for point_id, reason in guard.failures:
            self.stderr.write(f"{point_id}: {reason}")
        return RunResult(outputs=[csv_path, svg_path], seeds=[options['seed']],
                         config={'holes': [p.point_id for p in diagram.holes]})
