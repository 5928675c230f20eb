import argparse
import contextlib

from django.core.management.base import CommandError

from grounding.gradcheck import corrupted, run_suite
from grounding.management.base import GroundingCommand
from grounding.runconfig import load_run_config


class Command(GroundingCommand):
    help = 'Compare every backward rule and the end-to-end loss gradient against finite differences'

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Run configuration; its reg_init and branch toggles shape the model check')
        parser.add_argument('--seed', type=int, default=0, help='First seed')
        parser.add_argument('--seeds', type=int, default=5, help='Number of consecutive seeds per check')
        parser.add_argument('--max-coords', type=int, default=3, help='Coordinates checked per parameter in the model check')
        parser.add_argument('--corrupt', help=argparse.SUPPRESS)

    def run(self, **options):
        seeds = range(options['seed'], options['seed'] + options['seeds'])
        model_checks = None
        if options['config']:
            config = load_run_config(options['config']).model
            model_checks = [(config.reg_init, {
                'visual_transformer': config.visual_transformer,
                'linguistic_transformer': config.linguistic_transformer,
                'vl_per_layer_positions': config.vl_per_layer_positions,
            })]

        hook = corrupted(options['corrupt']) if options['corrupt'] else contextlib.nullcontext()
        with hook:
            results = run_suite(seeds, model_checks, options['max_coords'])

        for result in results:
            status = 'PASS' if result.passed else 'FAIL'
            self.stdout.write(
                f"{result.name:<32} max_rel_error={result.max_rel_error:.3e} "
                f"tolerance={result.tolerance:.0e} {status}"
            )
        failed = [result.name for result in results if not result.passed]
        if failed:
            raise CommandError(f"gradient check failed for: {', '.join(failed)}", returncode=2)
        self.stdout.write(self.style.SUCCESS(f"All {len(results)} gradient checks passed"))
