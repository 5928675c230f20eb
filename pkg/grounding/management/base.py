import logging
import sys

from django.core.management.base import BaseCommand, CommandError

from grounding.exceptions import ConfigError, GroundingError

logger = logging.getLogger(__name__)


class GroundingCommand(BaseCommand):
    """
    Base for the grounding commands. Subclasses implement `run(**options)`.

    Exit codes: 1 for usage and configuration errors, 2 for every other
    failure raised by the grounding package or by file I/O.
    """

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)

        def usage_error(message):
            if parser.called_from_command_line:
                parser.print_usage(sys.stderr)
                sys.stderr.write(f"{parser.prog}: error: {message}\n")
                sys.exit(1)
            raise CommandError(f"Error: {message}", returncode=1)

        parser.error = usage_error
        return parser

    def add_config_arguments(self, parser):
        parser.add_argument('--config', help='key=value configuration file')
        parser.add_argument('--seed', type=int, help='Overrides the seed from the configuration')
        parser.add_argument('--out', help='Output directory (default: GROUNDING_OUTPUT_DIR)')

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except ConfigError as e:
            logger.error(f"{self.__module__.rsplit('.', 1)[-1]}: {e}")
            raise CommandError(str(e), returncode=1) from e
        except (GroundingError, OSError) as e:
            logger.error(f"{self.__module__.rsplit('.', 1)[-1]}: {e}")
            raise CommandError(str(e), returncode=2) from e

    def run(self, **options):
        raise NotImplementedError
