from grounding.management.base import GroundingCommand
from grounding.pipeline import CHECKPOINT_NAME, LOG_NAME, load_splits, train_run
from grounding.runconfig import load_run_config
from grounding.utils import output_dir


class Command(GroundingCommand):
    help = 'Train a grounding model; writes model.ckpt, model.cfg, vocab.txt and train_log.csv'

    def add_arguments(self, parser):
        self.add_config_arguments(parser)
        parser.add_argument('--dataset', help='Directory holding train/ and val/ (overrides train_dir/val_dir)')
        parser.add_argument('--resume', help='Checkpoint to continue from')

    def run(self, **options):
        config = load_run_config(options['config'], options['seed'])
        out = output_dir(options['out'])
        train, val = load_splits(config, options['dataset'])
        self.stdout.write(f"Training on {len(train)} samples, validating on {len(val)}")
        log, _, _ = train_run(config, train, val, out, resume=options['resume'])
        for record in log:
            self.stdout.write(
                f"epoch {record.epoch}: loss={record.loss:.4f} val_acc={record.val_acc:.4f}"
            )
        self.stdout.write(self.style.SUCCESS(f"Saved {out / CHECKPOINT_NAME} and {out / LOG_NAME}"))
