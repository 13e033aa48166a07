from pathlib import Path

from django.conf import settings

from app.classifier.architectures import ArchHyper, ModelFactory
from app.classifier.checkpoints import save_checkpoint
from app.core.exceptions import UsageError
from app.runs.commands import MiptCommand, RunResult, parse_channels
from app.runs.formats import load_dataset
from app.training.services import TrainConfig, build_pool, member_seeds, train_ensemble, write_training_log


def member_path(out: Path, index: int, count: int) -> Path:
    if count == 1:
        return out
    return out.with_name(f"{out.stem}_{index:02d}{out.suffix}")


class Command(MiptCommand):
    help = 'Train phase classifiers on the three vertex datasets'
    run_name = 'train'

    def add_run_arguments(self, parser):
        training = settings.MIPT_TRAINING
        parser.add_argument('--data', nargs=3, required=True, help='Three vertex dataset files')
        parser.add_argument('--arch', choices=ModelFactory.get_available_models(), default='cnn_attn')
        parser.add_argument('--channels', default='x,zz,zxz')
        parser.add_argument('--h1', type=int, default=training['h1'])
        parser.add_argument('--h2', type=int, default=training['h2'])
        parser.add_argument('--h', type=int, default=training['mlp_hidden'], help='MLP hidden width')
        parser.add_argument('--lr', type=float, default=training['lr'])
        parser.add_argument('--epochs', type=int, default=training['epochs'])
        parser.add_argument('--N', type=int, default=training['set_size'])
        parser.add_argument('--dropout', type=float, default=training['dropout_p'])
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--models', type=int, default=1, help='Independent ensemble members')
        parser.add_argument('--resample', action='store_true', help='Draw every set with replacement')
        parser.add_argument('--n-step', type=int, default=150)
        parser.add_argument('--out', required=True, help='Checkpoint path')

    def execute_run(self, options, threads):
        pool = build_pool(*[load_dataset(path) for path in options['data']])
        arch = ArchHyper(
            T=pool.T, L=pool.L, kind=options['arch'], h1=options['h1'], h2=options['h2'], hidden=options['h'],
            channels=parse_channels(options['channels']), dropout_p=options['dropout'],
        )
        config = TrainConfig(
            lr=options['lr'], epochs=options['epochs'], N=options['N'], seed=options['seed'],
            dropout_p=options['dropout'], resample=options['resample'], n_step=options['n_step'],
        )
        count = options['models']
        if count < 1:
            raise UsageError(f"--models must be at least 1, got {count}")
        seeds = [config.seed] if count == 1 else member_seeds(config.seed, count)
        reports = train_ensemble(arch, pool, config, seeds, threads)

        out = Path(options['out'])
        outputs = []
        for index, report in enumerate(reports):
            path = member_path(out, index, count)
            outputs.append(save_checkpoint(report.model, path))
            outputs.append(write_training_log(report, path.with_name(path.name + '.log.csv')))
            final = report.epoch_losses[-1] if report.epoch_losses else float('nan')
            self.stdout.write(f"{path}: {report.model.parameter_count()} parameters, {report.steps} steps, "
                              f"final loss {final:.5f}")
        return RunResult(outputs=outputs, seeds=seeds, config={'arch': arch.to_dict()})
