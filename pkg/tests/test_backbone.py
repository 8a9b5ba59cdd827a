"""FiLM backbone, task encoder, adaptation networks, and checkpoints."""

import numpy as np
import pytest

from fewshot.autodiff import Tape, Tensor, finite_difference_check, tsum, mul
from fewshot.backbone import (AdaptationNetwork, BackboneConfig, FilmBackbone,
                              FilmParams)
from fewshot.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from fewshot.datasets import ConfigurationError
from fewshot.model import FewShotClassifier, HeadConfig
from fewshot.verify import random_episode, tiny_model


def small_config(**kw):
    defaults = dict(input_dim=5, blocks=2, width=6, embed_dim=4,
                    encoder_hidden=6, task_repr_dim=5, adapter_hidden=6,
                    ar_dim=3)
    defaults.update(kw)
    return BackboneConfig(**defaults)


class TestTaskEncoder:
    def test_single_example_equals_its_encoding(self):
        cfg = small_config()
        rng = np.random.default_rng(0)
        adaptation = AdaptationNetwork(cfg, rng)
        x = np.random.default_rng(1).standard_normal((1, 5))
        pooled = adaptation.encode_task(Tensor(x)).data
        direct = adaptation.encoder.net(Tensor(x)).data[0]
        np.testing.assert_array_equal(pooled, direct)

    def test_permutation_bit_identical(self):
        cfg = small_config()
        adaptation = AdaptationNetwork(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(2)
        x = rng.standard_normal((9, 5))
        base = adaptation.encode_task(Tensor(x)).data
        for _ in range(20):
            perm = rng.permutation(9)
            got = adaptation.encode_task(Tensor(x[perm])).data
            assert np.array_equal(got, base)

    def test_duplicating_support_preserves_representation(self):
        cfg = small_config()
        adaptation = AdaptationNetwork(cfg, np.random.default_rng(0))
        x = np.random.default_rng(3).standard_normal((6, 5))
        base = adaptation.encode_task(Tensor(x)).data
        doubled = adaptation.encode_task(Tensor(np.vstack([x, x]))).data
        np.testing.assert_allclose(doubled, base, atol=1e-12, rtol=0)

    def test_empty_support_rejected(self):
        cfg = small_config()
        adaptation = AdaptationNetwork(cfg, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            adaptation.encode_task(Tensor(np.zeros((0, 5))))


class TestFilmBackbone:
    def test_identity_film_equals_unmodulated_network(self):
        cfg = small_config()
        backbone = FilmBackbone(cfg, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).standard_normal((7, 5)))
        out = backbone.extract_features(x, FilmParams.identity(2, 6)).data
        # Hand-computed unmodulated forward: identical blocks without scaling.
        h = x
        from fewshot.autodiff import elu, add
        h = elu(backbone.stem(h))
        for block in backbone.blocks:
            h = add(h, block.fc_out(elu(block.fc_in(h))))
        expected = backbone.head(h).data
        np.testing.assert_array_equal(out, expected)

    def test_adaptation_off_reproduces_identity_film(self):
        cfg = small_config(adapt=False)
        model = FewShotClassifier(cfg, HeadConfig(variant="l2"), seed=0)
        ep = random_episode(np.random.default_rng(2), 5, 2)
        sup, qry = model.embed_episode(ep)
        film = FilmParams.identity(cfg.blocks, cfg.width)
        np.testing.assert_array_equal(
            sup.data, model.backbone.extract_features(Tensor(ep.support_x), film).data)
        np.testing.assert_array_equal(
            qry.data, model.backbone.extract_features(Tensor(ep.query_x), film).data)

    def test_zero_gamma_makes_transform_path_constant(self):
        # With gamma = 0 at a block, the block's transform path no longer
        # depends on the input; only the residual stream differs.
        cfg = small_config(blocks=1)
        backbone = FilmBackbone(cfg, np.random.default_rng(0))
        gamma = Tensor(np.zeros(6))
        beta = Tensor(np.random.default_rng(1).standard_normal(6))
        x1 = Tensor(np.random.default_rng(2).standard_normal((3, 5)))
        x2 = Tensor(np.random.default_rng(3).standard_normal((3, 5)))
        h1 = backbone.stem_forward(x1)
        h2 = backbone.stem_forward(x2)
        out1 = backbone.blocks[0](h1, gamma, beta).data - h1.data
        out2 = backbone.blocks[0](h2, gamma, beta).data - h2.data
        np.testing.assert_allclose(out1[0], out2[0], atol=1e-12, rtol=0)

    def test_dimension_mismatch_rejected(self):
        cfg = small_config()
        backbone = FilmBackbone(cfg, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            backbone.extract_features(Tensor(np.zeros((2, 9))),
                                      FilmParams.identity(2, 6))

    def test_film_gradients_pass_finite_differences(self):
        cfg = small_config(blocks=1)
        backbone = FilmBackbone(cfg, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(4).standard_normal((4, 5)))
        gamma = Tensor(np.ones(6), requires_grad=True)
        beta = Tensor(np.zeros(6), requires_grad=True)

        def loss():
            feats = backbone.extract_features(x, FilmParams([gamma], [beta]))
            return tsum(mul(feats, feats))

        assert finite_difference_check(loss, [gamma, beta]) <= 1e-4


class TestAdaptation:
    def test_ar_with_one_block_equals_plain(self):
        # No previous blocks exist, so the autoregressive path is vacuous:
        # same seed gives identical parameters and identical outputs.
        ep = random_episode(np.random.default_rng(5), 4, 2)
        plain_1 = FewShotClassifier(small_config(input_dim=4, blocks=1),
                                    HeadConfig(), seed=9)
        ar_1 = FewShotClassifier(small_config(input_dim=4, blocks=1,
                                              autoregressive=True),
                                 HeadConfig(), seed=9)
        np.testing.assert_array_equal(plain_1.episode_logits(ep).data,
                                      ar_1.episode_logits(ep).data)

    def test_ar_summaries_rejected_in_plain_mode(self):
        cfg = small_config()
        adaptation = AdaptationNetwork(cfg, np.random.default_rng(0))
        repr_ = adaptation.encode_task(Tensor(np.random.default_rng(1)
                                              .standard_normal((3, 5))))
        with pytest.raises(ConfigurationError):
            adaptation.generate_film(repr_, ar_summaries=[Tensor(np.zeros(3))])

    def test_ar_mode_requires_adaptation(self):
        with pytest.raises(ConfigurationError):
            small_config(adapt=False, autoregressive=True).validate()

    def test_every_parameter_gets_gradient(self):
        # No dead components on a generic episode, in both modes.
        for autoregressive in (False, True):
            model = tiny_model(5, seed=21, autoregressive=autoregressive)
            ep = random_episode(np.random.default_rng(6), 5, 3)
            with Tape() as tape:
                loss, _ = model.episode_loss(ep)
                tape.backward(loss)
            for name, p in model.named_parameters().items():
                assert p.grad is not None, f"{name} got no gradient"
                assert np.abs(p.grad).max() > 0, f"{name} gradient is all zero"

    def test_adaptation_gradient_check(self):
        model = tiny_model(4, seed=23)
        ep = random_episode(np.random.default_rng(7), 4, 2)
        adapt_params = [p for n, p in model.named_parameters().items()
                        if n.startswith("adapt/")]

        def loss():
            value, n_q = model.episode_loss(ep)
            return value * (1.0 / n_q)

        assert finite_difference_check(loss, adapt_params) <= 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = tiny_model(5, seed=31, autoregressive=True)
        path = tmp_path / "ckpt.bin"
        model.save(path, meta={"episode": 42, "val_accuracy": 0.875,
                               "config_fingerprint": "abc"})
        arrays, meta = load_checkpoint(path)
        assert meta == {"episode": 42, "val_accuracy": 0.875,
                        "config_fingerprint": "abc"}
        for name, tensor in model.named_parameters().items():
            assert np.array_equal(arrays[name], tensor.data)

    def test_save_is_byte_deterministic(self, tmp_path):
        model = tiny_model(4, seed=33)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        model.save(p1, meta={"episode": 1})
        model.save(p2, meta={"episode": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_into_model_restores_outputs(self, tmp_path):
        model = tiny_model(4, seed=35)
        ep = random_episode(np.random.default_rng(8), 4, 2)
        expected = model.episode_logits(ep).data
        path = tmp_path / "ckpt.bin"
        model.save(path)
        fresh, _ = FewShotClassifier.load(path, model.backbone_cfg,
                                          model.head_cfg, seed=999)
        np.testing.assert_array_equal(fresh.episode_logits(ep).data, expected)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_mismatched_shapes_rejected(self, tmp_path):
        model = tiny_model(4, seed=37)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, {"backbone/stem/w": np.zeros((2, 2))}, {})
        with pytest.raises(ConfigurationError):
            FewShotClassifier.load(path, model.backbone_cfg, model.head_cfg)
