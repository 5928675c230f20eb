from django.core.management.base import CommandError

from grounding.management.base import GroundingCommand
from grounding.pipeline import ablation_variants, load_splits, run_ablation, write_ablation
from grounding.runconfig import load_run_config, read_key_values
from grounding.utils import output_dir


class Command(GroundingCommand):
    help = 'Train and evaluate configuration variants over several seeds; writes ablation.csv'

    def add_arguments(self, parser):
        self.add_config_arguments(parser)
        parser.add_argument('--dataset', help='Directory holding train/ and val/ (overrides train_dir/val_dir)')
        parser.add_argument('--seeds', type=int, default=3, help='Seeds per variant, counting up from --seed')
        parser.add_argument('--variants', help='Comma-separated subset of variants (default: all)')

    def run(self, **options):
        base_values = read_key_values(options['config']) if options['config'] else {}
        config = load_run_config(options['config'], options['seed'])
        available = ablation_variants()
        if options['variants']:
            names = [name.strip() for name in options['variants'].split(',') if name.strip()]
            unknown = [name for name in names if name not in available]
            if unknown:
                raise CommandError(
                    f"unknown variant '{unknown[0]}'; choose from {', '.join(available)}", returncode=1
                )
            variants = {name: available[name] for name in names}
        else:
            variants = available

        train, val = load_splits(config, options['dataset'])
        seeds = list(range(config.seed, config.seed + options['seeds']))
        rows = run_ablation(base_values, variants, seeds, train, val, options['config'] or 'defaults')

        out = output_dir(options['out'])
        write_ablation(out / 'ablation.csv', rows)
        for row in rows:
            if row.seed == 'mean':
                self.stdout.write(
                    f"{row.variant:<28} acc={row.accuracy * 100:6.2f}% relational={row.relational_accuracy * 100:6.2f}%"
                )
        self.stdout.write(self.style.SUCCESS(f"Wrote {out / 'ablation.csv'}"))
