import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, tag
from numpy.testing import assert_allclose, assert_array_equal

from grounding.exceptions import ConfigError, ContractError, DatasetError, GenerationError
from grounding.losses import Box, iou
from grounding.synthetic import (
    ATTRIBUTE, COLORS, MAX_OVERLAP, RELATIONAL, Expression, GeneratorConfig, SceneSpec, ShapeInstance,
    find_sample, generate_expression, generate_sample, generate_scene, generate_split, parse_expression,
    read_dataset, referents, relation_holds, render, split_seed, write_dataset,
)


class GeneratorConfigTests(SimpleTestCase):
    def test_default_split_sizes(self):
        self.assertEqual(GeneratorConfig().split_sizes, {'train': 1800, 'val': 200})

    def test_invalid_values(self):
        for changes in ({'image_size': 16}, {'num_shapes_min': 0}, {'num_shapes_min': 4, 'num_shapes_max': 3},
                        {'relational_prob': 1.5}, {'val_fraction': 1.0}, {'count': 0}, {'seed': -1}):
            with self.subTest(**changes):
                with self.assertRaises(ConfigError):
                    GeneratorConfig(**changes)

    def test_split_seeds_are_disjoint(self):
        config = GeneratorConfig(count=50)
        train = {split_seed(config, 'train', i) for i in range(config.split_sizes['train'])}
        val = {split_seed(config, 'val', i) for i in range(config.split_sizes['val'])}
        self.assertFalse(train & val)
        other = {split_seed(GeneratorConfig(count=50, seed=1), 'train', i) for i in range(45)}
        self.assertFalse(train & other)

    def test_index_outside_split(self):
        config = GeneratorConfig(count=10)
        with self.assertRaises(ContractError):
            split_seed(config, 'val', 1)


class SceneTests(SimpleTestCase):
    def test_shapes_barely_overlap_and_are_distinct(self):
        config = GeneratorConfig()
        for seed in range(200):
            scene = generate_scene(config, np.random.default_rng(seed), seed)
            with self.subTest(seed=seed):
                self.assertTrue(2 <= len(scene.shapes) <= 5)
                descriptions = [shape.description for shape in scene.shapes]
                self.assertEqual(len(descriptions), len(set(descriptions)))
                for i, a in enumerate(scene.shapes):
                    self.assertTrue(a.inside(config.image_size))
                    for b in scene.shapes[i + 1:]:
                        self.assertLess(iou(a.corners, b.corners), MAX_OVERLAP)

    @tag('slow')
    def test_ten_thousand_scenes_have_no_overlapping_pair(self):
        config = GeneratorConfig()
        overlapping = scenes = 0
        for seed in range(10_000):
            try:
                shapes = generate_scene(config, np.random.default_rng([config.seed, seed]), seed).shapes
            except GenerationError:
                continue
            scenes += 1
            overlapping += sum(
                iou(a.corners, b.corners) >= MAX_OVERLAP for i, a in enumerate(shapes) for b in shapes[i + 1:]
            )
        self.assertEqual(overlapping, 0)
        self.assertGreater(scenes, 9_900)

    def test_same_seed_same_scene(self):
        config = GeneratorConfig()
        first = generate_scene(config, np.random.default_rng(11))
        second = generate_scene(config, np.random.default_rng(11))
        self.assertEqual(first, second)


class ExpressionTests(SimpleTestCase):
    def setUp(self):
        self.scene = SceneSpec(64, (
            ShapeInstance('circle', 'red', 'small', 2, 30, 8),
            ShapeInstance('square', 'blue', 'large', 30, 28, 16),
            ShapeInstance('circle', 'green', 'large', 50, 2, 14),
        ))

    def test_attribute_text(self):
        expression = Expression(ATTRIBUTE, kind='circle', size='small', color='red')
        self.assertEqual(expression.text, 'the small red circle')
        self.assertEqual(referents(expression, self.scene), [0])

    def test_relational_text(self):
        expression = Expression(RELATIONAL, kind='circle', relation='left of', anchor_color='blue',
                                anchor_kind='square')
        self.assertEqual(expression.text, 'the circle left of the blue square')
        self.assertEqual(referents(expression, self.scene), [0])

    def test_parse_round_trip(self):
        for text in ('the large green circle', 'the circle above the blue square',
                     'the square right of the red circle'):
            with self.subTest(text=text):
                self.assertEqual(parse_expression(text).text, text)

    def test_parse_rejects_free_text(self):
        with self.assertRaises(ContractError):
            parse_expression('a red thing somewhere')

    def test_relations_need_separation(self):
        circle, square, far_circle = self.scene.shapes
        self.assertTrue(relation_holds('left of', circle, square))
        self.assertTrue(relation_holds('right of', square, circle))
        self.assertTrue(relation_holds('above', far_circle, square))
        self.assertFalse(relation_holds('below', far_circle, square))
        with self.assertRaises(ContractError):
            relation_holds('near', circle, square)

    def test_generated_expressions_pick_out_one_shape(self):
        config = GeneratorConfig()
        for seed in range(100):
            rng = np.random.default_rng(seed)
            scene = generate_scene(config, rng, seed)
            for relational_prob in (0.0, 1.0):
                try:
                    expression, index = generate_expression(scene, rng, relational_prob)
                except GenerationError:
                    continue
                with self.subTest(seed=seed, relational_prob=relational_prob):
                    self.assertEqual(referents(parse_expression(expression.text), scene), [index])

    def test_empty_scene(self):
        with self.assertRaises(GenerationError):
            generate_expression(SceneSpec(64, ()), np.random.default_rng(0))


class RenderTests(SimpleTestCase):
    def test_empty_scene_is_white(self):
        pixels, boxes = render(SceneSpec(32, ()))
        self.assertEqual(pixels.shape, (32, 32, 3))
        self.assertTrue((pixels == 255).all())
        self.assertEqual(boxes, [])

    def test_square_box_is_exact(self):
        pixels, boxes = render(SceneSpec(64, (ShapeInstance('square', 'red', 'large', 10, 12, 16),)))
        self.assertEqual(boxes, [(10, 12, 16, 16)])
        assert_array_equal(pixels[12, 10], COLORS['red'])
        assert_array_equal(pixels[12, 26], [255, 255, 255])

    def test_circle_box_matches_extent(self):
        _, boxes = render(SceneSpec(64, (ShapeInstance('circle', 'blue', 'large', 20, 20, 15),)))
        x, y, w, h = boxes[0]
        self.assertLessEqual(abs(w - 15), 1)
        self.assertLessEqual(abs(h - 15), 1)
        self.assertTrue(20 <= x <= 21 and 20 <= y <= 21)

    def test_covered_shape(self):
        scene = SceneSpec(64, (ShapeInstance('square', 'red', 'small', 10, 10, 8),
                               ShapeInstance('square', 'blue', 'large', 8, 8, 16)))
        with self.assertRaises(GenerationError):
            render(scene)


class SampleTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.config = GeneratorConfig(count=40, relational_prob=0.5, seed=3)
        cls.samples = generate_split(cls.config, 'train')

    def test_ids_and_count(self):
        self.assertEqual(len(self.samples), 36)
        self.assertEqual(self.samples[0].sample_id, 'train-00000')

    def test_deterministic(self):
        again = generate_sample(self.config, 'train', 5)
        assert_array_equal(again.pixels, self.samples[5].pixels)
        self.assertEqual(again.expression, self.samples[5].expression)
        self.assertEqual(again.box, self.samples[5].box)

    def test_labels_match_the_rendered_referent(self):
        size = self.config.image_size
        for sample in self.samples:
            with self.subTest(sample=sample.sample_id):
                self.assertEqual(referents(parse_expression(sample.expression), sample.scene), [sample.referent])
                _, boxes = render(sample.scene)
                self.assertEqual(sample.box, Box.from_pixels(*boxes[sample.referent], size, size))
                x, y, w, h = boxes[sample.referent]
                region = sample.pixels[y:y + h, x:x + w].reshape(-1, 3)
                color = COLORS[sample.scene.shapes[sample.referent].color]
                self.assertTrue((region == color).all(axis=1).any())

    def test_templates_are_mixed(self):
        templates = {sample.template for sample in self.samples}
        self.assertEqual(templates, {ATTRIBUTE, RELATIONAL})

    def test_find_sample(self):
        self.assertIs(find_sample(self.samples, 'train-00002'), self.samples[2])
        with self.assertRaises(DatasetError):
            find_sample(self.samples, 'val-00002')


class DatasetFileTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.directory = Path(self.tmp.name)
        self.samples = generate_split(GeneratorConfig(count=5, val_fraction=0.2, seed=1), 'train')
        write_dataset(self.samples, self.directory)

    def test_round_trip(self):
        loaded = read_dataset(self.directory)
        self.assertEqual([s.sample_id for s in loaded], [s.sample_id for s in self.samples])
        for original, restored in zip(self.samples, loaded):
            assert_array_equal(restored.pixels, original.pixels)
            self.assertEqual(restored.expression, original.expression)
            self.assertEqual(restored.template, original.template)
            self.assertEqual(restored.referent, original.referent)
            assert_allclose(restored.box.as_list(), original.box.as_list())

    def test_images_are_binary_ppm(self):
        self.assertTrue((self.directory / 'imgs' / 'train-00000.ppm').read_bytes().startswith(b'P6'))

    def test_missing_image_names_the_sample(self):
        (self.directory / 'imgs' / 'train-00001.ppm').unlink()
        with self.assertRaisesMessage(DatasetError, 'train-00001'):
            read_dataset(self.directory)

    def test_malformed_line_is_located(self):
        path = self.directory / 'samples.jsonl'
        lines = path.read_text().splitlines()
        lines[2] = '{"id": "broken"'
        path.write_text('\n'.join(lines) + '\n')
        with self.assertRaisesMessage(DatasetError, 'samples.jsonl:3:'):
            read_dataset(self.directory)

    def test_invalid_record_is_located(self):
        path = self.directory / 'samples.jsonl'
        lines = path.read_text().splitlines()
        record = json.loads(lines[0])
        record['box'] = [0.5, 0.5, -0.1, 0.2]
        lines[0] = json.dumps(record)
        path.write_text('\n'.join(lines) + '\n')
        with self.assertRaisesMessage(DatasetError, 'samples.jsonl:1:'):
            read_dataset(self.directory)

    def test_image_path_must_stay_inside(self):
        path = self.directory / 'samples.jsonl'
        record = json.loads(path.read_text().splitlines()[0])
        record['image'] = '../outside.ppm'
        path.write_text(json.dumps(record) + '\n')
        with self.assertRaises(DatasetError):
            read_dataset(self.directory)

    def test_missing_directory(self):
        with self.assertRaises(DatasetError):
            read_dataset(self.directory / 'absent')
