"""Batch assembly from grounding samples."""
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .linguistic import tokenize
from .visual import ImageInput, prepare_image


@dataclass
class Batch:
    sample_ids: list
    images: ImageInput
    text_ids: np.ndarray
    text_mask: np.ndarray
    boxes: np.ndarray
    templates: list

    def __len__(self):
        return len(self.sample_ids)


def sample_input(sample, image_size):
    """
    The model input for one sample and its box in model coordinates.

    Images already at image_size×image_size pass through; others are
    letterboxed and the box is rescaled to the letterboxed frame.
    """
    height, width = sample.pixels.shape[:2]
    if (height, width) == (image_size, image_size):
        return ImageInput.from_rgb(sample.pixels), np.array(sample.box.as_list())
    image, factor = prepare_image(Image.fromarray(sample.pixels), image_size)
    sx, sy = width * factor / image_size, height * factor / image_size
    box = sample.box
    return image, np.array([box.cx * sx, box.cy * sy, box.w * sx, box.h * sy])


def collate(samples, vocab, config):
    images, boxes, ids, masks = [], [], [], []
    for sample in samples:
        image, box = sample_input(sample, config.image_size)
        text = tokenize(sample.expression, vocab, config.max_text_len)
        images.append(image)
        boxes.append(box)
        ids.append(text.ids)
        masks.append(text.mask)
    return Batch(
        sample_ids=[sample.sample_id for sample in samples],
        images=ImageInput.stack(images),
        text_ids=np.stack(ids),
        text_mask=np.stack(masks),
        boxes=np.stack(boxes),
        templates=[sample.template for sample in samples],
    )


def iterate_batches(samples, batch_size, rng=None):
    """Yield lists of samples; shuffled when a generator is given."""
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    for start in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]
