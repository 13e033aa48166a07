from dataclasses import replace

from django.conf import settings

from app.classifier.checkpoints import load_checkpoint
from app.evaluation.points import load_labels, load_test_points
from app.evaluation.reports import write_accuracy_csv
from app.evaluation.services import FixedEnsembleProtocol, GridPoint, accuracy_report, split_into_groups
from app.runs.commands import MiptCommand, RunResult
from app.runs.formats import load_dataset
from app.runs.services import ensure_labels
from app.trajectories.records import crop_dataset


class Command(MiptCommand):
    help = 'Score ensemble majority votes against ground-truth labels'
    run_name = 'evaluate'

    def add_run_arguments(self, parser):
        parser.add_argument('--models', nargs='+', required=True, help='Checkpoint files')
        parser.add_argument('--data', nargs='+', required=True, help='Test-point dataset files')
        parser.add_argument('--N', type=int, default=settings.MIPT_TRAINING['set_size'])
        parser.add_argument('--labels', default=None,
                            help='Labels CSV (default: MIPT_TEST_LABELS_FILE, filled in by the oracle when incomplete)')
        parser.add_argument('--points', default=settings.MIPT_TEST_POINTS_FILE, help='Test-point roles')
        parser.add_argument('--R', type=int, default=1, help='Repetitions; the models are split into R groups')
        parser.add_argument('--crop', type=int, default=None, help='Evaluate on a central window of this width')
        parser.add_argument('--out', default='accuracy.csv')

    def execute_run(self, options, threads):
        models = [load_checkpoint(path) for path in options['models']]
        points = load_test_points(options['points'])
        roles = {p.point_id: p.role for p in points}
        truth = load_labels(options['labels']) if options['labels'] else ensure_labels(points, threads=threads)

        test_points = []
        for path in options['data']:
            dataset = load_dataset(path)
            if options['crop'] is not None:
                dataset = crop_dataset(dataset, options['crop'])
            config = dataset.config
            point = GridPoint(*config.gammas, role=roles.get(config.point_id, 'grid'), point_id=config.point_id)
            test_points.append((point, dataset))

        R = options['R']
        protocol = FixedEnsembleProtocol(split_into_groups(models, R), test_points, truth, options['N'], threads)
        for point_id in protocol.skipped:
            self.stderr.write(f"{point_id}: no ground-truth label, left out of the accuracy")
        results = []
        for repetition in range(R):
            result = protocol(repetition)
            results.append(result)
            for point, _ in protocol.test_points:
                record = result.votes[point.point_id]
                self.stdout.write(
                    f"[{repetition + 1}/{R}] {point.point_id} ({point.role}): votes {record.votes} -> "
                    f"{record.majority} (agreement {record.agreement:.2f}, truth {truth[point.point_id]})"
                )

        labelled = [p for p, _ in protocol.test_points]
        reports = [accuracy_report(results, role, [p.point_id for p in labelled if p.role == role])
                   for role in sorted({p.role for p in labelled})]
        if len(reports) > 1:
            reports.append(replace(accuracy_report(results, 'all'), per_point={}))
        for report in reports:
            se = f" +/- {report.se:.4f}" if report.se is not None else ''
            self.stdout.write(f"{report.points}: P = {report.mean:.4f}{se} over R={report.R}")
        path = write_accuracy_csv(reports, options['out'], roles)
        return RunResult(outputs=[path], config={'N': options['N'], 'R': R})
