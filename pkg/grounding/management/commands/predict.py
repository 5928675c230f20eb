import numpy as np
from django.core.management.base import CommandError
from PIL import Image

from grounding.data import Batch, collate
from grounding.linguistic import tokenize
from grounding.losses import Box
from grounding.management.base import GroundingCommand
from grounding.pipeline import load_trained
from grounding.synthetic import find_sample, read_dataset
from grounding.utils import format_box
from grounding.visual import prepare_image


class Command(GroundingCommand):
    help = 'Predict the box for one dataset sample or for an image and expression'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True, help='Trained model checkpoint')
        parser.add_argument('--dataset', help='Dataset directory with samples.jsonl')
        parser.add_argument('--sample-id', help='Sample to predict from --dataset')
        parser.add_argument('--image', help='Any RGB image file')
        parser.add_argument('--expression', help='Referring expression for --image')

    def run(self, **options):
        by_sample = options['dataset'] and options['sample_id']
        by_image = options['image'] and options['expression'] is not None
        if not (by_sample or by_image):
            raise CommandError('give --dataset with --sample-id, or --image with --expression', returncode=1)
        trained = load_trained(options['checkpoint'])
        config = trained.config.model

        if by_sample:
            sample = find_sample(read_dataset(options['dataset']), options['sample_id'])
            batch = collate([sample], trained.vocab, config)
            height, width = sample.pixels.shape[:2]
            factor = min(config.image_size / width, config.image_size / height)
        else:
            with Image.open(options['image']) as image:
                width, height = image.size
                images, factor = prepare_image(image, config.image_size)
            text = tokenize(options['expression'], trained.vocab, config.max_text_len)
            batch = Batch(['image'], images, text.ids[None], text.mask[None], np.zeros((1, 4)), [''])

        cx, cy, w, h = (float(v) for v in trained.model(batch).boxes.data[0])
        # Model coordinates are relative to the letterboxed square; undo the padding.
        sx, sy = config.image_size / (width * factor), config.image_size / (height * factor)
        box = Box(cx * sx, cy * sy, w * sx, h * sy)
        self.stdout.write(f"box (cx cy w h, normalized): {format_box(box.as_list())}")
        self.stdout.write(f"box (x y w h, pixels): {format_box(box.to_pixels(width, height))}")
        if by_sample:
            self.stdout.write(f"ground truth (normalized): {format_box(sample.box.as_list())}")
        self.stdout.write(self.style.SUCCESS('Done'))
