import csv

from django.core.management.base import CommandError

from grounding.evaluation import evaluate, read_predictions, write_predictions
from grounding.management.base import GroundingCommand
from grounding.pipeline import load_trained
from grounding.synthetic import ATTRIBUTE, RELATIONAL, read_dataset
from grounding.utils import output_dir


class Command(GroundingCommand):
    help = 'Report accuracy@0.5 of a checkpoint on a dataset, or of a predictions file'

    def add_arguments(self, parser):
        self.add_config_arguments(parser)
        parser.add_argument('--checkpoint', help='Trained model checkpoint')
        parser.add_argument('--dataset', help='Dataset directory with samples.jsonl (default: val_dir of the run)')
        parser.add_argument('--predictions', help='Evaluate an existing predictions JSONL instead of a model')

    def run(self, **options):
        out = output_dir(options['out'])
        if options['predictions']:
            result = read_predictions(options['predictions'])
        else:
            if not options['checkpoint']:
                raise CommandError('one of --checkpoint or --predictions is required', returncode=1)
            trained = load_trained(options['checkpoint'])
            samples = read_dataset(options['dataset'] or trained.config.val_dir)
            result = evaluate(trained.model, samples, trained.vocab, trained.config.batch_size)
            write_predictions(out / 'predictions.jsonl', result)

        rows = [('all', len(result.sample_ids), result.accuracy)]
        for template in (ATTRIBUTE, RELATIONAL):
            accuracy = result.subset_accuracy(template)
            if accuracy is not None:
                rows.append((template, result.templates.count(template), accuracy))
        with open(out / 'eval.csv', 'w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle)
            writer.writerow(['subset', 'count', 'accuracy'])
            for subset, count, accuracy in rows:
                writer.writerow([subset, count, f"{accuracy:.6f}"])
        for subset, count, accuracy in rows:
            self.stdout.write(f"{subset}: {accuracy * 100:.2f}% of {count}")
        self.stdout.write(self.style.SUCCESS(f"accuracy@0.5 = {result.accuracy * 100:.2f}%"))
