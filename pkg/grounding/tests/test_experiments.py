"""
Single-batch overfit runs at the desk configuration.

Each run trains a full desk-size model for 500 optimizer steps, so the class
is tagged `slow`; skip it with `manage.py test grounding --exclude-tag slow`.
"""
import math

from django.test import SimpleTestCase, tag

from grounding.evaluation import evaluate
from grounding.fusion import RegInitMode
from grounding.linguistic import build_vocab
from grounding.model import GroundingModel, ModelConfig
from grounding.synthetic import GeneratorConfig, generate_sample
from grounding.training import Schedule, fit

SAMPLES = 16
STEPS = 500


def overfit(samples, vocab, **changes):
    """Full-batch training for STEPS steps with dropout off; rates drop after three quarters."""
    model = GroundingModel(ModelConfig(dropout=0.0, **changes), len(vocab), seed=0)
    schedule = Schedule(total_epochs=STEPS, drop_epoch=STEPS * 3 // 4)
    result = fit(model, samples, vocab, schedule, batch_size=len(samples), seed=0)
    return result, evaluate(model, samples, vocab)


@tag('slow')
class OverfitTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        config = GeneratorConfig()
        cls.samples = [generate_sample(config, 'train', index) for index in range(SAMPLES)]
        cls.vocab = build_vocab(sample.expression for sample in cls.samples)

    def test_desk_model_memorises_sixteen_samples(self):
        result, evaluation = overfit(self.samples, self.vocab)
        self.assertEqual(result.steps, STEPS)
        self.assertLess(min(record.loss for record in result.log), 0.02)
        self.assertEqual(evaluation.accuracy, 1.0)

    def test_every_reg_mode_overfits(self):
        for mode in RegInitMode:
            with self.subTest(mode=mode.value):
                result, evaluation = overfit(self.samples, self.vocab, reg_init=mode.value)
                self.assertTrue(all(math.isfinite(record.loss) for record in result.log))
                self.assertGreaterEqual(evaluation.accuracy, 0.8)
