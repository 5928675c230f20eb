"""
Flat key=value configuration files.

One `key=value` per line; blank lines and lines starting with `#` are
ignored. Keys are validated against RunConfigForm or GeneratorConfigForm,
so unknown keys and bad values surface as ConfigError.
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from django.conf import settings

from .exceptions import ConfigError
from .forms import GeneratorConfigForm, RunConfigForm, loss_config, model_config, schedule
from .losses import LossConfig
from .model import ModelConfig
from .synthetic import GeneratorConfig
from .training import Schedule

logger = logging.getLogger(__name__)


def parse_key_values(text, source='configuration'):
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        key, sep, value = line.partition('=')
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{number}: expected key=value, got '{line}'")
        if key in values:
            raise ConfigError(f"{source}:{number}: key '{key}' given twice")
        values[key] = value.strip()
    return values


def read_key_values(path):
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f"cannot read configuration {path}: {e.strerror}") from e
    return parse_key_values(text, str(path))


def _format(value):
    if isinstance(value, bool):
        return 'on' if value else 'off'
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    loss: LossConfig
    schedule: Schedule
    weight_decay: float = 1e-4
    batch_size: int = 32
    grad_clip: float = 0.0
    train_dir: str = 'data/train'
    val_dir: str = 'data/val'
    seed: int = 0

    @classmethod
    def from_values(cls, values, source='configuration'):
        data = RunConfigForm.bind(values, source).cleaned_or_raise(source)
        return cls(
            model=model_config(data),
            loss=loss_config(data),
            schedule=schedule(data),
            weight_decay=data['weight_decay'],
            batch_size=data['batch_size'],
            grad_clip=data['grad_clip'],
            train_dir=data['train_dir'],
            val_dir=data['val_dir'],
            seed=data['seed'],
        )

    def with_seed(self, seed):
        if seed is None:
            return self
        if seed < 0:
            raise ConfigError(f"seed cannot be negative, got {seed}")
        return replace(self, seed=seed)

    def as_values(self):
        values = dict(self.model.as_dict())
        values.update(giou_weight=self.loss.giou_weight, smooth_l1_beta=self.loss.smooth_l1_beta)
        values.update(
            epochs=self.schedule.total_epochs, drop_epoch=self.schedule.drop_epoch,
            drop_factor=self.schedule.drop_factor, lr_fusion=self.schedule.lr_fusion,
            lr_branch=self.schedule.lr_branch,
        )
        values.update(
            weight_decay=self.weight_decay, batch_size=self.batch_size, grad_clip=self.grad_clip,
            train_dir=self.train_dir, val_dir=self.val_dir, seed=self.seed,
        )
        return {key: values[key] for key in RunConfigForm.base_fields}

    def to_lines(self):
        return [f"{key}={_format(value)}" for key, value in self.as_values().items()]

    def save(self, path):
        Path(path).write_text('\n'.join(self.to_lines()) + '\n', encoding='utf-8')


def load_run_config(path=None, seed=None, overrides=None):
    values = read_key_values(path) if path else {}
    values.update(overrides or {})
    values.setdefault('seed', settings.GROUNDING_DEFAULT_SEED)
    config = RunConfig.from_values(values, str(path) if path else 'defaults')
    return config.with_seed(seed)


def load_generator_config(path=None, seed=None):
    values = read_key_values(path) if path else {}
    values.setdefault('seed', settings.GROUNDING_DEFAULT_SEED)
    source = str(path) if path else 'defaults'
    data = GeneratorConfigForm.bind(values, source).cleaned_or_raise(source)
    if seed is not None:
        data['seed'] = seed
    return GeneratorConfig(**data)
