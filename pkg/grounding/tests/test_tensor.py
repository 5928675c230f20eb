import math

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from grounding.exceptions import ContractError, DimensionError, InvalidMaskError
from grounding.tensor import (
    KERNELS, Tape, Tensor, backward, dropout, float64_mode, layer_norm, matmul, relu, softmax,
)


class MatmulTests(SimpleTestCase):
    def test_identity(self):
        b = Tensor([[1, 2], [3, 4]])
        assert_array_equal(matmul(Tensor(np.eye(2)), b).data, [[1, 2], [3, 4]])

    def test_hand_multiplication(self):
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        assert_array_equal(out.data, [[3], [7]])

    def test_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(DimensionError) as caught:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        self.assertIn('(2, 3) and (2, 3)', str(caught.exception))

    def test_batched_times_shared_weight(self):
        out = matmul(Tensor(np.ones((4, 2, 3))), Tensor(np.ones((3, 5))))
        self.assertEqual(out.shape, (4, 2, 5))


class SoftmaxTests(SimpleTestCase):
    def test_uniform(self):
        assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_log_two(self):
        with float64_mode():
            out = softmax(Tensor([math.log(2.0), 0.0]))
        assert_allclose(out.data, [2 / 3, 1 / 3], atol=1e-12)

    def test_masked_entry_gets_exactly_zero(self):
        out = softmax(Tensor([5.0, 9.0]), mask=np.array([True, False]))
        assert_array_equal(out.data, [1.0, 0.0])

    def test_fully_masked_row(self):
        with self.assertRaises(InvalidMaskError):
            softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), mask=np.array([[True, False], [False, False]]))


class LayerNormTests(SimpleTestCase):
    def test_constant_row(self):
        out = layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert_allclose(out.data, [[0, 0, 0, 0]], atol=1e-6)

    def test_constant_row_passes_beta_through(self):
        out = layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), Tensor(np.ones(4)), Tensor([1.0, 2.0, 3.0, 4.0]))
        assert_allclose(out.data, [[1, 2, 3, 4]], atol=1e-6)

    def test_random_row_is_centered(self):
        rng = np.random.default_rng(3)
        with float64_mode():
            out = layer_norm(Tensor(rng.normal(size=(1, 16))), Tensor(np.ones(16)), Tensor(np.zeros(16)))
        self.assertLess(abs(out.data.mean()), 1e-6)

    def test_gamma_width_mismatch(self):
        with self.assertRaises(DimensionError):
            layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


class KernelTests(SimpleTestCase):
    def test_relu(self):
        assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_dropout_eval_is_identity(self):
        x = Tensor(np.arange(5.0))
        self.assertIs(dropout(x, 0.1, train=False), x)

    def test_dropout_keeps_expectation(self):
        out = dropout(Tensor(np.ones(10_000)), 0.1, train=True, rng=np.random.default_rng(0))
        self.assertAlmostEqual(float(out.data.mean()), 1.0, delta=0.02)

    def test_dropout_needs_generator_in_train_mode(self):
        with self.assertRaises(ContractError):
            dropout(Tensor(np.ones(3)), 0.5, train=True)

    def test_dropout_probability_range(self):
        with self.assertRaises(ContractError):
            dropout(Tensor(np.ones(3)), 1.0, train=False)

    def test_incompatible_broadcast(self):
        with self.assertRaises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))

    def test_every_kernel_is_registered(self):
        for name in ('add', 'mul', 'scale', 'matmul', 'relu', 'softmax', 'layer_norm', 'concat', 'slice',
                     'mean', 'sum', 'embedding_lookup', 'dropout', 'conv2d'):
            self.assertIn(name, KERNELS)

    def test_item_needs_single_element(self):
        with self.assertRaises(ContractError):
            Tensor([1.0, 2.0]).item()


class BackwardTests(SimpleTestCase):
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        assert_array_equal(tape.backward(loss)[x], np.ones((2, 3)))

    def test_sum_of_squares_gives_twice_x(self):
        with float64_mode():
            x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
            with Tape():
                loss = (x * x).sum()
            grads = backward(loss)
        assert_allclose(grads[x], [2.0, -4.0, 6.0])

    def test_broadcast_gradient_is_reduced(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            loss = (a + b).sum()
        assert_array_equal(tape.backward(loss)[b], [2, 2, 2])

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = x * 2.0
        with self.assertRaises(ContractError):
            tape.backward(out)

    def test_unreached_leaf_gets_zeros(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = (x * 2.0).sum()
            unused * 3.0
        assert_array_equal(tape.backward(loss)[unused], np.zeros(2))

    def test_nothing_recorded_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        out = (x * 2.0).sum()
        self.assertIsNone(out.node)

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(0)
        a_data, b_data = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

        def run():
            a = Tensor(a_data, requires_grad=True)
            b = Tensor(b_data, requires_grad=True)
            with Tape() as tape:
                loss = softmax(matmul(a, b)).mean()
            grads = tape.backward(loss)
            return loss.item(), grads[a], grads[b]

        first, second = run(), run()
        self.assertEqual(first[0], second[0])
        assert_array_equal(first[1], second[1])
        assert_array_equal(first[2], second[2])
