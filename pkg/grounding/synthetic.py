"""
Synthetic grounding data: scenes of coloured shapes, referring expressions
that single out one shape, rendering and the on-disk dataset format.

A dataset directory holds `samples.jsonl` (one record per line:
id, image, expression, box, template, referent) and `imgs/<id>.ppm`.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .exceptions import ConfigError, ContractError, DatasetError, GenerationError
from .losses import Box, iou

logger = logging.getLogger(__name__)

KINDS = ('circle', 'square', 'triangle')
COLORS = {
    'red': (220, 30, 30),
    'green': (30, 160, 50),
    'blue': (30, 60, 220),
    'yellow': (235, 200, 20),
    'purple': (140, 40, 170),
}
# Side length ranges in pixels for a 64-pixel image; scaled with the image.
SIZES = {'small': (7, 10), 'large': (14, 19)}
RELATIONS = ('left of', 'right of', 'above', 'below')
ATTRIBUTE, RELATIONAL = 'attribute', 'relational'

MAX_PLACEMENT_ATTEMPTS = 1000
MAX_SCENE_RESAMPLES = 100
MAX_OVERLAP = 0.1
SPLIT_SEED_STRIDE = 1_000_000
BACKGROUND = (255, 255, 255)


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    num_shapes_min: int = 2
    num_shapes_max: int = 5
    relational_prob: float = 0.5
    count: int = 2000
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ConfigError(f"image_size must be at least 32, got {self.image_size}")
        if not 1 <= self.num_shapes_min <= self.num_shapes_max:
            raise ConfigError(
                f"shape count range [{self.num_shapes_min}, {self.num_shapes_max}] is empty or starts below 1"
            )
        if self.num_shapes_max > len(KINDS) * len(COLORS) * len(SIZES):
            raise ConfigError("num_shapes_max exceeds the number of distinct shape descriptions")
        if not 0.0 <= self.relational_prob <= 1.0:
            raise ConfigError(f"relational_prob must lie in [0, 1], got {self.relational_prob}")
        if self.count < 1:
            raise ConfigError("count must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.seed < 0:
            raise ConfigError("seed cannot be negative")

    @property
    def split_sizes(self):
        val = int(round(self.count * self.val_fraction))
        return {'train': self.count - val, 'val': val}


@dataclass(frozen=True)
class ShapeInstance:
    """A shape occupying the pixel square [x0, x0 + extent) × [y0, y0 + extent)."""
    kind: str
    color: str
    size: str
    x0: int
    y0: int
    extent: int

    @property
    def center(self):
        return (self.x0 + self.extent / 2, self.y0 + self.extent / 2)

    @property
    def corners(self):
        return (self.x0, self.y0, self.x0 + self.extent, self.y0 + self.extent)

    @property
    def description(self):
        return (self.size, self.color, self.kind)

    def inside(self, image_size):
        x1, y1 = self.x0 + self.extent, self.y0 + self.extent
        return self.x0 >= 0 and self.y0 >= 0 and x1 <= image_size and y1 <= image_size


@dataclass(frozen=True)
class SceneSpec:
    image_size: int
    shapes: tuple
    seed: int = 0


@dataclass(frozen=True)
class Expression:
    template: str
    kind: str
    size: str = ''
    color: str = ''
    relation: str = ''
    anchor_color: str = ''
    anchor_kind: str = ''

    @property
    def text(self):
        if self.template == ATTRIBUTE:
            return f"the {self.size} {self.color} {self.kind}"
        return f"the {self.kind} {self.relation} the {self.anchor_color} {self.anchor_kind}"


@dataclass
class GroundingSample:
    sample_id: str
    pixels: np.ndarray
    expression: str
    box: Box
    referent: int
    template: str
    scene: SceneSpec = field(default=None, compare=False, repr=False)


def size_range(size, image_size):
    low, high = SIZES[size]
    scale = image_size / 64
    return max(2, round(low * scale)), max(2, round(high * scale))


def generate_scene(config, rng, seed=0):
    """Place 2-5 shapes with distinct descriptions and pairwise box IoU below 0.1."""
    count = int(rng.integers(config.num_shapes_min, config.num_shapes_max + 1))
    shapes, used = [], set()
    for attempt in range(MAX_PLACEMENT_ATTEMPTS):
        if len(shapes) == count:
            break
        size = str(rng.choice(list(SIZES)))
        color = str(rng.choice(list(COLORS)))
        kind = str(rng.choice(KINDS))
        if (size, color, kind) in used:
            continue
        low, high = size_range(size, config.image_size)
        extent = int(rng.integers(low, high + 1))
        x0 = int(rng.integers(0, config.image_size - extent + 1))
        y0 = int(rng.integers(0, config.image_size - extent + 1))
        candidate = ShapeInstance(kind, color, size, x0, y0, extent)
        if any(iou(candidate.corners, other.corners) >= MAX_OVERLAP for other in shapes):
            logger.debug(f"Rejected placement {candidate} on attempt {attempt}")
            continue
        shapes.append(candidate)
        used.add(candidate.description)
    if len(shapes) < count:
        raise GenerationError(f"could not place {count} shapes in {MAX_PLACEMENT_ATTEMPTS} attempts")
    return SceneSpec(config.image_size, tuple(shapes), seed)


def relation_holds(relation, target, anchor):
    """Relations require the two boxes to be separated along the relation's axis."""
    tx0, ty0, tx1, ty1 = target.corners
    ax0, ay0, ax1, ay1 = anchor.corners
    if relation == 'left of':
        return tx1 <= ax0
    if relation == 'right of':
        return tx0 >= ax1
    if relation == 'above':
        return ty1 <= ay0
    if relation == 'below':
        return ty0 >= ay1
    raise ContractError(f"unknown relation '{relation}'")


def matches(expression, scene, index):
    shape = scene.shapes[index]
    if shape.kind != expression.kind:
        return False
    if expression.template == ATTRIBUTE:
        return shape.size == expression.size and shape.color == expression.color
    return any(
        other is not shape
        and other.color == expression.anchor_color
        and other.kind == expression.anchor_kind
        and relation_holds(expression.relation, shape, other)
        for other in scene.shapes
    )


def referents(expression, scene):
    """Indices of every shape the expression describes."""
    return [i for i in range(len(scene.shapes)) if matches(expression, scene, i)]


def parse_expression(text):
    words = text.split()
    if len(words) == 4 and words[0] == 'the':
        return Expression(ATTRIBUTE, kind=words[3], size=words[1], color=words[2])
    for relation in RELATIONS:
        prefix_len = 2 + len(relation.split())
        if len(words) == prefix_len + 3 and ' '.join(words[2:prefix_len]) == relation:
            return Expression(RELATIONAL, kind=words[1], relation=relation,
                              anchor_color=words[prefix_len + 1], anchor_kind=words[prefix_len + 2])
    raise ContractError(f"'{text}' does not follow an expression template")


def _relational_expression(scene, index, rng):
    target = scene.shapes[index]
    tx, ty = target.center
    anchors = sorted(
        (other for other in scene.shapes if other is not target),
        key=lambda other: math.hypot(other.center[0] - tx, other.center[1] - ty),
    )
    for anchor in anchors:
        # The anchor description must itself be unambiguous.
        if sum(1 for s in scene.shapes if (s.color, s.kind) == (anchor.color, anchor.kind)) != 1:
            continue
        for relation in rng.permutation(RELATIONS):
            if not relation_holds(str(relation), target, anchor):
                continue
            expression = Expression(RELATIONAL, kind=target.kind, relation=str(relation),
                                    anchor_color=anchor.color, anchor_kind=anchor.kind)
            if referents(expression, scene) == [index]:
                return expression
    return None


def generate_expression(scene, rng, relational_prob=0.5):
    """Return (expression, referent index); the expression matches exactly one shape."""
    if not scene.shapes:
        raise GenerationError("an empty scene has nothing to refer to")
    if rng.random() < relational_prob:
        for index in rng.permutation(len(scene.shapes)):
            expression = _relational_expression(scene, int(index), rng)
            if expression is not None:
                return expression, int(index)
        raise GenerationError("no relational expression identifies a single shape in this scene")

    index = int(rng.integers(len(scene.shapes)))
    shape = scene.shapes[index]
    expression = Expression(ATTRIBUTE, kind=shape.kind, size=shape.size, color=shape.color)
    if referents(expression, scene) != [index]:
        raise GenerationError(f"'{expression.text}' does not identify a single shape")
    return expression, index


def _draw(draw, shape, fill):
    x0, y0 = shape.x0, shape.y0
    x1, y1 = x0 + shape.extent - 1, y0 + shape.extent - 1
    if shape.kind == 'circle':
        draw.ellipse([x0, y0, x1, y1], fill=fill)
    elif shape.kind == 'square':
        draw.rectangle([x0, y0, x1, y1], fill=fill)
    else:
        draw.polygon([(x0, y1), (x1, y1), ((x0 + x1) / 2, y0)], fill=fill)


def render(scene):
    """
    Rasterize on a white background. Returns the (H, W, 3) uint8 pixels and,
    per shape, the tight pixel box (x, y, w, h) of its visible pixels.
    """
    size = scene.image_size
    image = Image.new('RGB', (size, size), BACKGROUND)
    index_map = Image.new('L', (size, size), 0)
    draw, draw_index = ImageDraw.Draw(image), ImageDraw.Draw(index_map)
    for number, shape in enumerate(scene.shapes, start=1):
        _draw(draw, shape, COLORS[shape.color])
        _draw(draw_index, shape, number)

    labels = np.asarray(index_map)
    boxes = []
    for number, shape in enumerate(scene.shapes, start=1):
        ys, xs = np.nonzero(labels == number)
        if not len(xs):
            raise GenerationError(f"{shape.kind} at ({shape.x0}, {shape.y0}) is fully covered")
        boxes.append((int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)))
    return np.asarray(image, dtype=np.uint8).copy(), boxes


def split_seed(config, split, index):
    """Train and val draw from disjoint seed ranges."""
    sizes = config.split_sizes
    offset = 0 if split == 'train' else sizes['train']
    if not 0 <= index < sizes[split]:
        raise ContractError(f"sample {index} is outside the {split} split of {sizes[split]}")
    return config.seed * SPLIT_SEED_STRIDE + offset + index


def generate_sample(config, split, index):
    seed = split_seed(config, split, index)
    rng = np.random.default_rng(seed)
    for attempt in range(MAX_SCENE_RESAMPLES):
        try:
            scene = generate_scene(config, rng, seed)
            expression, referent = generate_expression(scene, rng, config.relational_prob)
            pixels, boxes = render(scene)
        except GenerationError as e:
            logger.debug(f"Resampling scene for {split} sample {index}: {e}")
            continue
        x, y, w, h = boxes[referent]
        return GroundingSample(
            sample_id=f"{split}-{index:05d}",
            pixels=pixels,
            expression=expression.text,
            box=Box.from_pixels(x, y, w, h, config.image_size, config.image_size),
            referent=referent,
            template=expression.template,
            scene=scene,
        )
    raise GenerationError(f"{split} sample {index}: no valid scene after {MAX_SCENE_RESAMPLES} resamples")


def generate_split(config, split):
    samples = [generate_sample(config, split, index) for index in range(config.split_sizes[split])]
    relational = sum(1 for sample in samples if sample.template == RELATIONAL)
    logger.info(f"Generated {len(samples)} {split} samples ({relational} relational)")
    return samples


def write_dataset(samples, directory):
    directory = Path(directory)
    (directory / 'imgs').mkdir(parents=True, exist_ok=True)
    with open(directory / 'samples.jsonl', 'w', encoding='utf-8') as handle:
        for sample in samples:
            image = f"imgs/{sample.sample_id}.ppm"
            Image.fromarray(sample.pixels, 'RGB').save(directory / image, format='PPM')
            record = {
                'id': sample.sample_id,
                'image': image,
                'expression': sample.expression,
                'box': sample.box.as_list(),
                'template': sample.template,
                'referent': sample.referent,
            }
            handle.write(json.dumps(record) + '\n')
    logger.info(f"Wrote {len(samples)} samples to {directory}")


def read_dataset(directory):
    from .serializers import SampleRecordSerializer

    directory = Path(directory)
    path = directory / 'samples.jsonl'
    if not path.is_file():
        raise DatasetError(f"{path} does not exist")
    samples = []
    with open(path, encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{number}: invalid JSON ({e.msg})") from e
            serializer = SampleRecordSerializer(data=payload)
            if not serializer.is_valid():
                raise DatasetError(f"{path}:{number}: {serializer.errors}")
            record = serializer.validated_data
            image_path = directory / record['image']
            try:
                with Image.open(image_path) as image:
                    pixels = np.asarray(image.convert('RGB'), dtype=np.uint8).copy()
            except OSError as e:
                raise DatasetError(f"sample '{record['id']}': cannot read image {image_path}") from e
            samples.append(GroundingSample(
                sample_id=record['id'],
                pixels=pixels,
                expression=record['expression'],
                box=Box(*record['box']),
                referent=record.get('referent', -1),
                template=record['template'],
            ))
    logger.info(f"Read {len(samples)} samples from {directory}")
    return samples


def find_sample(samples, sample_id):
    for sample in samples:
        if sample.sample_id == sample_id:
            return sample
    raise DatasetError(f"no sample with id '{sample_id}'")
