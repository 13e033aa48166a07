from app.core.exceptions import UsageError
from app.evaluation.reports import write_entropy_csv, write_entropy_svg
from app.runs.commands import MiptCommand, RunResult, add_gamma_arguments, parse_times, resolve_gammas
from app.trajectories.diagnostics import entropy_curve
from app.trajectories.records import CircuitConfig


class Command(MiptCommand):
    help = 'Trajectory-averaged half-chain entropy, end-to-end mutual information and TEE'
    run_name = 'diagnostics'

    def add_run_arguments(self, parser):
        add_gamma_arguments(parser)
        parser.add_argument('--L', type=int, default=8)
        parser.add_argument('--T', type=int, default=None, help='Depth (default: 4L)')
        parser.add_argument('--times', default=None, help='Comma-separated sample times (default: every step)')
        parser.add_argument('--n-traj', type=int, default=200)
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--out', default='entropy.csv')
        parser.add_argument('--svg', default=None)

    def execute_run(self, options, threads):
        gammas = resolve_gammas(options)
        L = options['L']
        T = options['T'] if options['T'] is not None else 4 * L
        if T < 1:
            raise UsageError(f"--T must be at least 1, got {T}")
        times = parse_times(options['times'], T) if options['times'] else list(range(T + 1))
        config = CircuitConfig(L, T, *gammas, master_seed=options['seed'])
        report = entropy_curve(config, times, options['n_traj'], threads)

        self.stdout.write(f"S(L/2) at t={report.times[-1]}: {report.s_half[-1]:.4f} +/- {report.s_half_se[-1]:.4f} bits")
        self.stdout.write(f"end-to-end I: {report.mi:.4f} +/- {report.mi_se:.4f} bits")
        if report.s_topo is not None:
            self.stdout.write(f"S_topo: {report.s_topo:.4f} +/- {report.s_topo_se:.4f} bits")
        outputs = [write_entropy_csv(report, options['out'])]
        if options['svg']:
            outputs.append(write_entropy_svg(report, options['svg']))
        return RunResult(outputs=outputs, seeds=[options['seed']], config={'gammas': list(gammas), 'T': T})
