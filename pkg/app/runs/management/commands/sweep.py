from django.conf import settings

from app.classifier.architectures import ModelFactory
from app.core.circuit_breaker import PointCircuitBreaker
from app.core.storage import atomic_write_text
from app.evaluation.points import load_labels, load_test_points
from app.runs.commands import MiptCommand, RunResult, parse_channels
from app.runs.services import ensure_labels
from app.runs.sweeps import SWEEP_PARAMS, Sweep, SweepBase, parse_values


class Command(MiptCommand):
    help = 'Train and evaluate once per value of one parameter'
    run_name = 'sweep'

    def add_run_arguments(self, parser):
        training = settings.MIPT_TRAINING
        ensemble = settings.MIPT_ENSEMBLE
        parser.add_argument('--param', choices=SWEEP_PARAMS, required=True)
        parser.add_argument('--values', nargs='+', required=True)
        parser.add_argument('--L', type=int, default=12)
        parser.add_argument('--T', type=int, default=72)
        parser.add_argument('--M', type=int, default=10000, help='Trajectories simulated per vertex')
        parser.add_argument('--eval-M', type=int, default=1000, help='Trajectories per test point')
        parser.add_argument('--N', type=int, default=training['set_size'])
        parser.add_argument('--arch', choices=ModelFactory.get_available_models(), default='cnn_attn')
        parser.add_argument('--channels', default='x,zz,zxz')
        parser.add_argument('--h1', type=int, default=training['h1'])
        parser.add_argument('--h2', type=int, default=training['h2'])
        parser.add_argument('--lr', type=float, default=training['lr'])
        parser.add_argument('--epochs', type=int, default=training['epochs'])
        parser.add_argument('--dropout', type=float, default=training['dropout_p'])
        parser.add_argument('--models', type=int, default=ensemble['vote_models'])
        parser.add_argument('--R', type=int, default=ensemble['repetitions'])
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--points', default=settings.MIPT_TEST_POINTS_FILE)
        parser.add_argument('--roles', default='inner,outer')
        parser.add_argument('--labels', default=None,
                            help='Labels CSV (default: MIPT_TEST_LABELS_FILE, filled in by the oracle when incomplete)')
        parser.add_argument('--out', default='sweep.csv')

    def execute_run(self, options, threads):
        base = SweepBase(
            L=options['L'], T=options['T'], M=options['M'], N=options['N'], h1=options['h1'], h2=options['h2'],
            lr=options['lr'], epochs=options['epochs'], seed=options['seed'], n_models=options['models'],
            R=options['R'], eval_M=options['eval_M'], kind=options['arch'],
            channels=parse_channels(options['channels']), dropout_p=options['dropout'],
        )
        param = options['param']
        points = load_test_points(options['points'], options['roles'].split(','))
        if options['labels']:
            truth = load_labels(options['labels'])
        else:
            truth = ensure_labels(load_test_points(options['points']), threads=threads)
        sweep = Sweep(param, parse_values(param, options['values']), base, points, truth, threads)
        frame = sweep.run(guard=PointCircuitBreaker.from_settings('sweep'))
        self.stdout.write(frame.to_string(index=False))
        path = atomic_write_text(options['out'], frame.to_csv(index=False))
        return RunResult(outputs=[path], seeds=[base.seed], config=sweep.snapshot())
