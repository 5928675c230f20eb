"""
Run orchestration shared by the management commands: training runs with
their artifacts, restoring a trained model and ablation sweeps.

A run directory holds model.ckpt, model.cfg (resolved key=value config),
vocab.txt and train_log.csv.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import checkpoint_load, checkpoint_save
from .evaluation import evaluate
from .exceptions import ContractError, FormatError
from .fusion import RegInitMode
from .linguistic import Vocabulary, build_vocab
from .model import GroundingModel
from .runconfig import RunConfig, read_key_values
from .synthetic import RELATIONAL, read_dataset
from .training import AdamW, fit, write_training_log

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = 'model.ckpt'
CONFIG_NAME = 'model.cfg'
VOCAB_NAME = 'vocab.txt'
LOG_NAME = 'train_log.csv'


def dataset_dirs(config, dataset=None):
    """Train and val directories: `<dataset>/train` and `<dataset>/val`, else the configured ones."""
    if dataset:
        root = Path(dataset)
        return root / 'train', root / 'val'
    return Path(config.train_dir), Path(config.val_dir)


def load_splits(config, dataset=None):
    train_dir, val_dir = dataset_dirs(config, dataset)
    train = read_dataset(train_dir)
    val = read_dataset(val_dir) if (val_dir / 'samples.jsonl').is_file() else []
    if not val:
        logger.warning(f"No validation samples under {val_dir}; val_acc will be NaN")
    return train, val


def build_optimizer(model, config):
    return AdamW(
        model.param_groups(),
        {'fusion': config.schedule.lr_fusion, 'branch': config.schedule.lr_branch},
        weight_decay=config.weight_decay,
    )


def train_run(config, train, val, out_dir, resume=None):
    """
    Train and leave checkpoint, config, vocabulary and CSV log in out_dir.
    With `resume`, weights, moments and the epoch counter come from that
    checkpoint and the vocabulary from its directory.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        vocab = Vocabulary.load(Path(resume).parent / VOCAB_NAME)
    else:
        vocab = build_vocab(sample.expression for sample in train)

    model = GroundingModel(config.model, len(vocab), seed=config.seed)
    optimizer = build_optimizer(model, config)
    start_epoch = 0
    if resume:
        start_epoch = checkpoint_load(resume, model, optimizer).epoch
        logger.info(f"Resuming from epoch {start_epoch}")

    config.save(out_dir / CONFIG_NAME)
    vocab.save(out_dir / VOCAB_NAME)
    log_path = out_dir / LOG_NAME
    if not resume:
        write_training_log(log_path, [])

    def on_epoch(record, optim):
        checkpoint_save(out_dir / CHECKPOINT_NAME, model, optim, epoch=record.epoch + 1)
        write_training_log(log_path, [record], append=True)

    if start_epoch >= config.schedule.total_epochs:
        logger.info(f"Checkpoint already covers all {config.schedule.total_epochs} epochs")
        return [], model, vocab
    result = fit(
        model, train, vocab, config.schedule, config.batch_size, config.seed,
        loss_cfg=config.loss, val_samples=val, optimizer=optimizer, start_epoch=start_epoch,
        grad_clip=config.grad_clip, on_epoch=on_epoch,
    )
    return result.log, model, vocab


@dataclass
class TrainedModel:
    config: RunConfig
    vocab: Vocabulary
    model: GroundingModel
    epoch: int


def load_trained(checkpoint):
    """Restore a model from a checkpoint and the model.cfg/vocab.txt beside it."""
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise FormatError(f"checkpoint {checkpoint} does not exist")
    config_path = checkpoint.parent / CONFIG_NAME
    config = RunConfig.from_values(read_key_values(config_path), str(config_path))
    vocab = Vocabulary.load(checkpoint.parent / VOCAB_NAME)
    model = GroundingModel(config.model, len(vocab), seed=config.seed)
    meta = checkpoint_load(checkpoint, model)
    model.eval()
    return TrainedModel(config, vocab, model, meta.epoch)


def ablation_variants():
    """Named override sets: the full model, branch-transformer toggles, no V-L layers and every [REG] mode."""
    variants = {
        'full': {},
        'no-visual-transformer': {'visual_transformer': 'off'},
        'no-linguistic-transformer': {'linguistic_transformer': 'off'},
        'no-branch-transformers': {'visual_transformer': 'off', 'linguistic_transformer': 'off'},
        'no-vl-layers': {'vl_layers': 0},
    }
    for mode in RegInitMode:
        if mode is not RegInitMode.LEARNABLE:
            variants[f"reg-{mode.value}"] = {'reg_init': mode.value}
    return variants


@dataclass
class AblationRow:
    variant: str
    seed: str
    accuracy: float
    relational_accuracy: float


def run_ablation(base_values, variants, seeds, train, val, source='ablation'):
    if not val:
        raise ContractError("ablation needs validation samples")
    vocab = build_vocab(sample.expression for sample in train)
    rows = []
    for name, overrides in variants.items():
        per_seed = []
        for seed in seeds:
            config = RunConfig.from_values({**base_values, **overrides, 'seed': seed}, source)
            model = GroundingModel(config.model, len(vocab), seed=seed)
            fit(model, train, vocab, config.schedule, config.batch_size, seed, loss_cfg=config.loss,
                optimizer=build_optimizer(model, config), grad_clip=config.grad_clip)
            result = evaluate(model, val, vocab, config.batch_size)
            relational = result.subset_accuracy(RELATIONAL)
            row = AblationRow(name, str(seed), result.accuracy, float('nan') if relational is None else relational)
            logger.info(f"{name} seed {seed}: acc={row.accuracy:.4f} relational={row.relational_accuracy:.4f}")
            per_seed.append(row)
        rows.extend(per_seed)
        rows.append(AblationRow(
            name, 'mean',
            float(np.mean([r.accuracy for r in per_seed])),
            float(np.mean([r.relational_accuracy for r in per_seed])),
        ))
    return rows


def write_ablation(path, rows):
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['variant', 'seed', 'accuracy', 'relational_accuracy'])
        for row in rows:
            writer.writerow([row.variant, row.seed, f"{row.accuracy:.6f}", f"{row.relational_accuracy:.6f}"])
