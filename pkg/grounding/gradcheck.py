"""
Finite-difference verification of every registered backward rule and of the
end-to-end grounding loss.

All checks run in 64-bit mode. The relative error of one coordinate is
|analytic - numeric| / max(|analytic| + |numeric|, REL_FLOOR).
"""
import contextlib
import logging
from dataclasses import dataclass

import numpy as np

from .data import Batch
from .exceptions import ContractError
from .fusion import RegInitMode
from .losses import grounding_loss
from .model import GroundingModel, ModelConfig
from .tensor import (
    KERNELS, Tape, Tensor, add, concat, div, dropout, embedding_lookup, float64_mode, layer_norm, masked_max,
    matmul, maximum, minimum, mul, reduce_mean, reduce_sum, relu, reshape, scale, sigmoid,
    slice_tensor, smooth_l1, softmax, sub, transpose,
)
from .visual import ImageInput, conv2d

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
REL_FLOOR = 1e-8
DEFAULT_EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    coordinates: int

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), REL_FLOOR)


def check_gradients(loss_fn, tensors, eps=DEFAULT_EPS, max_coords=None, rng=None,
                    tolerance=OP_TOLERANCE, name='loss'):
    """
    Compare tape gradients of `loss_fn()` with central differences.

    `tensors` are the 64-bit leaves `loss_fn` reads; their `.data` is perturbed
    in place and restored. With `max_coords`, each tensor is checked at that
    many coordinates drawn from `rng`; otherwise at every coordinate.
    """
    for tensor in tensors:
        if tensor.data.dtype != np.float64:
            raise ContractError(f"gradient checks need float64 inputs, got {tensor.data.dtype}")
    if max_coords is not None and rng is None:
        raise ContractError("coordinate sampling needs a random generator")

    with float64_mode():
        with Tape() as tape:
            loss = loss_fn()
        grads = tape.backward(loss)

        worst, checked = 0.0, 0
        for tensor in tensors:
            analytic = grads.get(tensor, np.zeros_like(tensor.data))
            tensor.data = np.ascontiguousarray(tensor.data)
            flat = tensor.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for coord in coords:
                original = flat[coord]
                flat[coord] = original + eps
                upper = loss_fn().item()
                flat[coord] = original - eps
                lower = loss_fn().item()
                flat[coord] = original
                numeric = (upper - lower) / (2 * eps)
                worst = max(worst, relative_error(float(analytic.reshape(-1)[coord]), numeric))
                checked += 1
    return CheckResult(name, worst, tolerance, checked)


def grad_check(fn, inputs, eps=DEFAULT_EPS, max_coords=None, rng=None, tolerance=OP_TOLERANCE, name='fn'):
    """Check `fn(*tensors) -> scalar` at the given float64 arrays."""
    for array in inputs:
        if np.asarray(array).dtype != np.float64:
            raise ContractError(f"gradient checks need float64 inputs, got {np.asarray(array).dtype}")
    tensors = [Tensor(np.array(array, dtype=np.float64), requires_grad=True, dtype=np.float64) for array in inputs]
    return check_gradients(lambda: fn(*tensors), tensors, eps, max_coords, rng, tolerance, name)


def _weighted(out, weights):
    """Reduce to a scalar with fixed random weights so every output coordinate matters."""
    return reduce_sum(mul(out, Tensor(weights)))


def _case(rng, shapes, body):
    inputs = [rng.normal(size=shape) for shape in shapes]
    with float64_mode():
        sample = body(*[Tensor(x) for x in inputs])
    weights = rng.normal(size=sample.shape)
    return (lambda *tensors: _weighted(body(*tensors), weights)), inputs


def _maximum_inputs(rng):
    a = rng.normal(size=(3, 4))
    gap = rng.uniform(0.1, 1.0, size=a.shape) * rng.choice([-1.0, 1.0], size=a.shape)
    return [a, a + gap]


def _case_pair_select(rng, op):
    inputs = _maximum_inputs(rng)
    weights = rng.normal(size=(3, 4))
    return (lambda a, b: _weighted(op(a, b), weights)), inputs


def _case_softmax(rng):
    mask = rng.random((2, 3, 5)) > 0.3
    mask[..., 0] = True
    return _case(rng, [(2, 3, 5)], lambda x: softmax(x, axis=-1, mask=mask))


def _case_embedding(rng):
    ids = rng.integers(0, 6, size=(2, 4))
    ids[0, :2] = 3  # repeated ids accumulate
    return _case(rng, [(6, 3)], lambda table: embedding_lookup(table, ids))


def _case_dropout(rng):
    seed = int(rng.integers(1 << 30))
    return _case(rng, [(4, 5)], lambda x: dropout(x, 0.4, True, np.random.default_rng(seed)))


def _case_masked_max(rng):
    mask = rng.random((2, 5, 1)) > 0.4
    mask[:, 0] = True
    return _case(rng, [(2, 5, 3)], lambda x: masked_max(x, mask, axis=1))


def _case_smooth_l1(rng):
    # Keep every entry away from the |d| = beta transition.
    magnitude = np.concatenate([rng.uniform(0.05, 0.9, 6), rng.uniform(1.1, 3.0, 6)])
    inputs = [magnitude * rng.choice([-1.0, 1.0], size=12)]
    weights = rng.normal(size=12)
    return (lambda d: _weighted(smooth_l1(d, 1.0), weights)), inputs


def _case_relu(rng):
    x = rng.normal(size=(3, 4))
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    weights = rng.normal(size=(3, 4))
    return (lambda t: _weighted(relu(t), weights)), [x]


def _case_div(rng):
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(4,)) * rng.choice([-1.0, 1.0], size=4)
    weights = rng.normal(size=(3, 4))
    return (lambda x, y: _weighted(div(x, y), weights)), [a, b]


def _case_layer_norm(rng):
    return _case(rng, [(2, 3, 6), (6,), (6,)], lambda x, g, b: layer_norm(x, g, b))


OP_CASES = {
    'add': lambda rng: _case(rng, [(2, 3, 4), (4,)], add),
    'sub': lambda rng: _case(rng, [(3, 4), (3, 1)], sub),
    'mul': lambda rng: _case(rng, [(2, 3, 4), (3, 4)], mul),
    'div': _case_div,
    'scale': lambda rng: _case(rng, [(3, 4)], lambda x: scale(x, -1.7)),
    'matmul': lambda rng: _case(rng, [(2, 3, 4), (4, 5)], matmul),
    'relu': _case_relu,
    'sigmoid': lambda rng: _case(rng, [(3, 4)], sigmoid),
    'softmax': _case_softmax,
    'layer_norm': _case_layer_norm,
    'concat': lambda rng: _case(rng, [(2, 3, 4), (2, 2, 4)], lambda a, b: concat([a, b], axis=1)),
    'slice': lambda rng: _case(rng, [(2, 5, 3)], lambda x: slice_tensor(x, (slice(None), 3, slice(0, 2)))),
    'sum': lambda rng: _case(rng, [(2, 3, 4)], lambda x: reduce_sum(x, axis=1)),
    'mean': lambda rng: _case(rng, [(2, 3, 4)], lambda x: reduce_mean(x, axis=(0, 2), keepdims=True)),
    'reshape': lambda rng: _case(rng, [(2, 3, 4)], lambda x: reshape(x, (6, 4))),
    'transpose': lambda rng: _case(rng, [(2, 3, 4)], lambda x: transpose(x, (2, 0, 1))),
    'embedding_lookup': _case_embedding,
    'dropout': _case_dropout,
    'maximum': lambda rng: _case_pair_select(rng, maximum),
    'minimum': lambda rng: _case_pair_select(rng, minimum),
    'masked_max': _case_masked_max,
    'smooth_l1': _case_smooth_l1,
    'conv2d': lambda rng: _case(rng, [(2, 3, 6, 6), (4, 3, 3, 3), (4,)],
                                 lambda x, w, b: conv2d(x, w, b, stride=2, padding=1)),
}


def check_op(name, seed=0, eps=DEFAULT_EPS):
    if name not in OP_CASES:
        raise ContractError(f"no gradient case for kernel '{name}'")
    rng = np.random.default_rng(seed)
    fn, inputs = OP_CASES[name](rng)
    return grad_check(fn, inputs, eps=eps, name=name)


def tiny_model_config(reg_init=RegInitMode.LEARNABLE.value, **overrides):
    values = dict(
        image_size=16, stem_layers=2, stem_width=2, visual_dim=8, visual_layers=1, visual_heads=2,
        text_dim=8, text_layers=1, text_heads=2, max_text_len=6, fusion_dim=8, vl_layers=1, vl_heads=2,
        ffn_ratio=2, dropout=0.0, reg_init=reg_init,
    )
    values.update(overrides)
    return ModelConfig(**values)


def tiny_batch(config, vocab_size, rng):
    """Two samples; the second has padded pixels and a shorter expression."""
    size = config.image_size
    pixels = rng.random((2, 3, size, size))
    valid = np.ones((2, size, size), dtype=bool)
    valid[1, :, size // 2:] = False
    ids = rng.integers(4, vocab_size, size=(2, config.max_text_len))
    mask = np.ones(ids.shape, dtype=bool)
    mask[1, 3:] = False
    ids[1, 3:] = 0
    return Batch(
        sample_ids=['a', 'b'],
        images=ImageInput(pixels, valid),
        text_ids=ids,
        text_mask=mask,
        boxes=np.array([[0.7, 0.3, 0.3, 0.3], [0.5, 0.5, 0.2, 0.2]]),
        templates=['attribute', 'relational'],
    )


def check_model_loss(reg_init=RegInitMode.LEARNABLE.value, seed=0, max_coords=3, eps=DEFAULT_EPS, **overrides):
    """End-to-end check of the grounding loss with respect to sampled model parameters."""
    rng = np.random.default_rng(seed)
    config = tiny_model_config(reg_init, **overrides)
    vocab_size = 10
    with float64_mode():
        model = GroundingModel(config, vocab_size, seed=seed)
    batch = tiny_batch(config, vocab_size, rng)
    params = model.parameters()
    return check_gradients(
        lambda: grounding_loss(model(batch).boxes, batch.boxes).total,
        params, eps=eps, max_coords=max_coords, rng=rng, tolerance=MODEL_TOLERANCE,
        name=f"model loss ({reg_init})",
    )


def run_suite(seeds=(0, 1, 2, 3, 4), model_checks=None, max_coords=3):
    """
    Worst result over seeds for every kernel, then for every model check.

    `model_checks` lists (reg_init, config overrides) pairs; by default every
    [REG] mode with the tiny configuration.
    """
    if model_checks is None:
        model_checks = [(mode.value, {}) for mode in RegInitMode]
    results = []
    for name in OP_CASES:
        runs = [check_op(name, seed) for seed in seeds]
        results.append(max(runs, key=lambda r: r.max_rel_error))
        logger.debug(f"{name}: max relative error {results[-1].max_rel_error:.2e}")
    for mode, overrides in model_checks:
        runs = [check_model_loss(mode, seed, max_coords, **overrides) for seed in seeds]
        results.append(max(runs, key=lambda r: r.max_rel_error))
    return results


@contextlib.contextmanager
def corrupted(op, factor=1.5):
    """Scale one kernel's backward rule for the duration of the block."""
    if op not in KERNELS:
        raise ContractError(f"unknown kernel '{op}'")
    function = KERNELS[op]
    original = function.__dict__['backward']

    def wrong_backward(ctx, grad):
        return tuple(None if g is None else g * factor for g in original.__func__(ctx, grad))

    function.backward = staticmethod(wrong_backward)
    try:
        yield
    finally:
        function.backward = original
