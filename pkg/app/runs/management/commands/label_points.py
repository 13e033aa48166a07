from django.conf import settings

from app.core.circuit_breaker import PointCircuitBreaker
from app.evaluation.points import label_points, load_test_points, write_labels
from app.runs.commands import MiptCommand, RunResult


class Command(MiptCommand):
    help = 'Label test points from entanglement diagnostics (TEE, then mutual information)'
    run_name = 'label_points'

    def add_run_arguments(self, parser):
        parser.add_argument('--points', default=settings.MIPT_TEST_POINTS_FILE)
        parser.add_argument('--roles', default=None, help='Comma-separated roles to label (default: all)')
        oracle = settings.MIPT_ORACLE
        parser.add_argument('--L', type=int, default=oracle['L'])
        parser.add_argument('--T', type=int, default=oracle['T'])
        parser.add_argument('--n-traj', type=int, default=oracle['n_traj'])
        parser.add_argument('--seed', type=int, default=oracle['seed'])
        parser.add_argument('--out', default=settings.MIPT_TEST_LABELS_FILE)

    def execute_run(self, options, threads):
        roles = options['roles'].split(',') if options['roles'] else None
        points = load_test_points(options['points'], roles)
        guard = PointCircuitBreaker.from_settings('label_points')
        labelled = label_points(points, options['L'], options['T'], options['n_traj'],
                                master_seed=options['seed'], threads=threads, guard=guard)
        for point, label, report in labelled:
            self.stdout.write(f"{point.point_id}: class {label} (MI {report.mi:.3f}, TEE {report.s_topo:.3f})")
        path = write_labels(labelled, options['out'])
        return RunResult(outputs=[path], seeds=[options['seed']],
                         config={'thresholds': settings.MIPT_LABEL_THRESHOLDS,
                                 'failed': [p for p, _ in guard.failures]})
