from grounding.management.base import GroundingCommand
from grounding.runconfig import load_generator_config
from grounding.synthetic import generate_split, write_dataset
from grounding.utils import output_dir


class Command(GroundingCommand):
    help = 'Generate the synthetic grounding dataset into <out>/train and <out>/val'

    def add_arguments(self, parser):
        self.add_config_arguments(parser)

    def run(self, **options):
        config = load_generator_config(options['config'], options['seed'])
        out = output_dir(options['out'])
        for split, size in config.split_sizes.items():
            if not size:
                continue
            samples = generate_split(config, split)
            write_dataset(samples, out / split)
            self.stdout.write(f"{split}: {len(samples)} samples")
        self.stdout.write(self.style.SUCCESS(f"Wrote {config.count} samples to {out}"))
