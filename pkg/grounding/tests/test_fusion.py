import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from grounding.exceptions import ConfigError, ContractError, InvalidMaskError
from grounding.fusion import FusionModule, PredictionHead, RegInitMode, masked_average
from grounding.gradcheck import tiny_batch, tiny_model_config
from grounding.losses import Box, grounding_loss
from grounding.model import BRANCH_GROUP, FUSION_GROUP, GroundingModel, ModelConfig
from grounding.tensor import Tape, Tensor


class ConfigContractTests(SimpleTestCase):
    def test_desk_joint_length(self):
        self.assertEqual(ModelConfig().joint_length, 105)

    def test_full_scale_joint_length(self):
        self.assertEqual(ModelConfig.full_scale().joint_length, 441)

    def test_share_cls_has_no_extra_slot(self):
        self.assertEqual(ModelConfig(reg_init='share-cls').joint_length, 104)

    def test_invalid_values(self):
        for changes in ({'fusion_dim': 30, 'vl_heads': 4}, {'visual_dim': 30, 'visual_heads': 3},
                        {'image_size': 60}, {'reg_init': 'random'}, {'dropout': 1.0}):
            with self.subTest(**changes):
                with self.assertRaises(ConfigError):
                    ModelConfig(**changes)


class AssemblyTests(SimpleTestCase):
    def setUp(self):
        self.config = tiny_model_config()
        self.rng = np.random.default_rng(0)

    def _tokens(self, batch=2, n_v=16, n_l=6):
        p_v = Tensor(self.rng.normal(size=(batch, n_v, 8)))
        p_l = Tensor(self.rng.normal(size=(batch, n_l, 8)))
        return p_v, p_l, np.ones((batch, n_v), dtype=bool), np.ones((batch, n_l), dtype=bool)

    def test_reg_is_last_and_always_valid(self):
        fusion = FusionModule(self.config, self.rng)
        p_v, p_l, v_mask, l_mask = self._tokens()
        l_mask[:, 3:] = False
        joint = fusion.assemble(p_v, p_l, v_mask, l_mask)
        self.assertEqual(joint.length, 23)
        self.assertEqual(joint.reg_index, 22)
        self.assertTrue(joint.mask[:, 22].all())
        assert_allclose(joint.embeddings.data[0, 22], fusion.reg_token.data)

    def test_share_cls_points_at_cls(self):
        fusion = FusionModule(tiny_model_config('share-cls'), self.rng)
        joint = fusion.assemble(*self._tokens())
        self.assertEqual(joint.length, 22)
        self.assertEqual(joint.reg_index, 16)

    def test_pooled_modes(self):
        p_v, p_l, v_mask, l_mask = self._tokens()
        v_mask[:, 8:] = False
        for mode, expected in (
            ('avg-pool-visual', p_v.data[:, :8].mean(axis=1)),
            ('max-pool-visual', p_v.data[:, :8].max(axis=1)),
            ('avg-pool-linguistic', p_l.data.mean(axis=1)),
            ('max-pool-linguistic', p_l.data.max(axis=1)),
        ):
            with self.subTest(mode=mode):
                fusion = FusionModule(tiny_model_config(mode), self.rng)
                joint = fusion.assemble(p_v, p_l, v_mask, l_mask)
                assert_allclose(joint.embeddings.data[:, joint.reg_index], expected, rtol=1e-5, atol=1e-6)

    def test_mask_shape_mismatch(self):
        fusion = FusionModule(self.config, self.rng)
        p_v, p_l, v_mask, l_mask = self._tokens()
        with self.assertRaises(ContractError):
            fusion.assemble(p_v, p_l, v_mask[:, :4], l_mask)

    def test_projection_width_mismatch(self):
        fusion = FusionModule(self.config, self.rng)
        with self.assertRaises(ContractError):
            fusion.project(Tensor(np.ones((1, 4, 5))), Tensor(np.ones((1, 3, 8))))

    def test_masked_average_needs_a_valid_token(self):
        with self.assertRaises(InvalidMaskError):
            masked_average(Tensor(np.ones((1, 3, 2))), np.zeros((1, 3), dtype=bool))

    def test_zeroed_positions_make_visual_order_irrelevant(self):
        fusion = FusionModule(self.config, self.rng).eval()
        head = PredictionHead(8, self.rng)
        table = fusion.positions[0].table
        table.data[:] = 0.0
        table.requires_grad = False
        p_v, p_l, v_mask, l_mask = self._tokens(batch=1)
        swapped = p_v.data.copy()
        swapped[:, [2, 9]] = swapped[:, [9, 2]]

        def box(visual):
            joint = fusion.assemble(visual, p_l, v_mask, l_mask)
            return head(fusion.readout(joint, fusion(joint, (4, 4)).states)).data

        assert_allclose(box(Tensor(swapped)), box(p_v), atol=1e-5)


class HeadTests(SimpleTestCase):
    def test_boxes_lie_in_unit_interval(self):
        head = PredictionHead(8, np.random.default_rng(0))
        boxes = head(Tensor(np.random.default_rng(1).normal(size=(5, 8)) * 50))
        self.assertEqual(boxes.shape, (5, 4))
        self.assertTrue(((boxes.data >= 0) & (boxes.data <= 1)).all())

    def test_zero_raw_output_is_the_centred_half_box(self):
        head = PredictionHead(8, np.random.default_rng(0))
        head.output.weight.data[:] = 0.0
        boxes = head(Tensor(np.random.default_rng(1).normal(size=(3, 8))))
        assert_allclose(head.raw(Tensor(np.ones((1, 8)))).data, 0.0)
        for row in boxes.data:
            self.assertEqual(Box(*(float(v) for v in row)), Box(0.5, 0.5, 0.5, 0.5))


class ModelTests(SimpleTestCase):
    def test_heatmaps_cover_the_visual_grid_per_layer(self):
        config = tiny_model_config(vl_layers=3)
        model = GroundingModel(config, 10, seed=0).eval()
        prediction = model(tiny_batch(config, 10, np.random.default_rng(0)))
        self.assertEqual(prediction.boxes.shape, (2, 4))
        self.assertEqual(prediction.heatmaps.shape, (2, 3, 4, 4))
        self.assertTrue((prediction.heatmaps >= 0).all())
        self.assertEqual(prediction.joint_length, config.joint_length)

    def test_every_reg_mode_runs(self):
        for mode in RegInitMode:
            with self.subTest(mode=mode.value):
                config = tiny_model_config(mode.value)
                model = GroundingModel(config, 10, seed=0).eval()
                boxes = model(tiny_batch(config, 10, np.random.default_rng(0))).boxes
                self.assertTrue(np.isfinite(boxes.data).all())

    def test_without_vl_layers(self):
        config = tiny_model_config(vl_layers=0)
        model = GroundingModel(config, 10, seed=0).eval()
        prediction = model(tiny_batch(config, 10, np.random.default_rng(0)))
        self.assertEqual(prediction.heatmaps.shape, (2, 0, 4, 4))
        self.assertEqual(prediction.boxes.shape, (2, 4))

    def test_padding_does_not_change_boxes(self):
        config = tiny_model_config()
        model = GroundingModel(config, 10, seed=0).eval()
        batch = tiny_batch(config, 10, np.random.default_rng(0))
        clean = model(batch).boxes.data
        batch.images.pixels[1, :, :, 8:] = 0.9
        batch.text_ids[1, 3:] = 7
        assert_allclose(model(batch).boxes.data, clean, atol=1e-5)

    def test_param_groups_are_disjoint(self):
        model = GroundingModel(tiny_model_config(), 10, seed=0)
        groups = model.param_groups()
        branch = {name for name, _ in groups[BRANCH_GROUP]}
        fusion = {name for name, _ in groups[FUSION_GROUP]}
        self.assertFalse(branch & fusion)
        self.assertEqual(len(branch) + len(fusion), len(model.parameters()))
        self.assertTrue(all(name.startswith(('visual.', 'linguistic.')) for name in branch))
        self.assertIn('fusion.reg_token', fusion)

    def test_same_seed_same_parameters(self):
        a = GroundingModel(tiny_model_config(), 10, seed=3)
        b = GroundingModel(tiny_model_config(), 10, seed=3)
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)

    def test_reg_token_receives_a_gradient(self):
        config = tiny_model_config()
        model = GroundingModel(config, 10, seed=0)
        batch = tiny_batch(config, 10, np.random.default_rng(0))
        with Tape() as tape:
            loss = grounding_loss(model(batch).boxes, batch.boxes).total
        grads = tape.backward(loss)
        self.assertGreater(np.abs(grads[model.fusion.reg_token]).max(), 0.0)
