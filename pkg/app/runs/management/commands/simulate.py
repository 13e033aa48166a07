from app.trajectories.records import CircuitConfig, grid_shapes
from app.trajectories.simulator import generate_dataset
from app.runs.commands import MiptCommand, RunResult, add_gamma_arguments, resolve_gammas
from app.runs.formats import record_bytes, save_dataset


class Command(MiptCommand):
    help = 'Simulate monitored trajectories and write a dataset file'
    run_name = 'simulate'

    def add_run_arguments(self, parser):
        parser.add_argument('--L', type=int, default=12)
        parser.add_argument('--T', type=int, default=72)
        add_gamma_arguments(parser)
        parser.add_argument('--M', type=int, default=10000)
        parser.add_argument('--seed', type=int, default=0, help='Master seed')
        parser.add_argument('--point-id', default='', help='Point identifier (default: from the coordinates)')
        parser.add_argument('--out', required=True)

    def execute_run(self, options, threads):
        gammas = resolve_gammas(options)
        point_id = options['point_id']
        if not point_id and options.get('gx') is None:
            point_id = f"vertex_{options['vertex']}"
        config = CircuitConfig(options['L'], options['T'], *gammas, master_seed=options['seed'], point_id=point_id)
        dataset = generate_dataset(config, options['M'], threads)
        path = save_dataset(dataset, options['out'])

        (x_shape, zz_shape, zxz_shape) = grid_shapes(config.T, config.L)
        width = record_bytes(config.T, config.L)
        self.stdout.write(f"X {x_shape}, ZZ {zz_shape}, ZXZ {zxz_shape}")
        self.stdout.write(f"{dataset.M} records of {width} bytes ({path.stat().st_size} bytes on disk) -> {path}")
        return RunResult(outputs=[path], seeds=[config.master_seed],
                         config={'gammas': list(gammas), 'point_id': config.point_id})
