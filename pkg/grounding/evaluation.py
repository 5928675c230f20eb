"""
Batched inference and the accuracy@0.5 protocol, plus the predictions JSONL
format used for offline evaluation.
"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import collate, iterate_batches
from .exceptions import ContractError, DatasetError
from .losses import accuracy_at_iou, iou_scores

logger = logging.getLogger(__name__)

ACCURACY_THRESHOLD = 0.5


@dataclass
class EvalResult:
    sample_ids: list
    predictions: np.ndarray
    ground_truths: np.ndarray
    templates: list
    ious: np.ndarray = field(init=False)

    def __post_init__(self):
        self.ious = iou_scores(self.predictions, self.ground_truths)

    @property
    def accuracy(self):
        return float((self.ious > ACCURACY_THRESHOLD).mean())

    def subset_accuracy(self, template):
        """Accuracy over samples of one template kind, or None if there are none."""
        chosen = [i for i, name in enumerate(self.templates) if name == template]
        if not chosen:
            return None
        return accuracy_at_iou(self.predictions[chosen], self.ground_truths[chosen], ACCURACY_THRESHOLD)

    def records(self):
        return [
            {'id': sample_id, 'pred': pred.tolist(), 'gt': gt.tolist(), 'template': template}
            for sample_id, pred, gt, template in zip(self.sample_ids, self.predictions, self.ground_truths, self.templates)
        ]


def predict_samples(model, samples, vocab, batch_size=32):
    """Eval-mode boxes for every sample, shape (N, 4), in dataset order. The model's mode is restored."""
    if not samples:
        raise ContractError("nothing to predict: the sample list is empty")
    was_training = model.training
    model.eval()
    boxes, gts, ids, templates = [], [], [], []
    try:
        for chunk in iterate_batches(samples, batch_size):
            batch = collate(chunk, vocab, model.config)
            boxes.append(model(batch).boxes.data.astype(np.float64))
            gts.append(batch.boxes)
            ids.extend(batch.sample_ids)
            templates.extend(batch.templates)
    finally:
        model.train(was_training)
    return ids, np.concatenate(boxes), np.concatenate(gts), templates


def evaluate(model, samples, vocab, batch_size=32):
    ids, predictions, gts, templates = predict_samples(model, samples, vocab, batch_size)
    return EvalResult(ids, predictions, gts, templates)


def write_predictions(path, result):
    with open(path, 'w', encoding='utf-8') as handle:
        for record in result.records():
            handle.write(json.dumps(record) + '\n')


def read_predictions(path):
    """Load a predictions JSONL file into an EvalResult."""
    from .serializers import PredictionRecordSerializer

    ids, preds, gts, templates = [], [], [], []
    with open(path, encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{number}: invalid JSON ({e.msg})") from e
            serializer = PredictionRecordSerializer(data=payload)
            if not serializer.is_valid():
                raise DatasetError(f"{path}:{number}: {serializer.errors}")
            record = serializer.validated_data
            ids.append(record['id'])
            preds.append(record['pred'])
            gts.append(record['gt'])
            templates.append(record.get('template', ''))
    if not ids:
        raise DatasetError(f"{path}: no prediction records")
    return EvalResult(ids, np.array(preds, dtype=np.float64), np.array(gts, dtype=np.float64), templates)
