from pathlib import Path

import numpy as np
import pytest

import crowdmotion as cm
from crowdmotion.autodiff import mean_scalars, scale
from crowdmotion.errors import ConfigError, DataError
from crowdmotion.model import (
    EncodedContext,
    discriminate_batch,
    global_encode_batch,
    local_encode_batch,
)
from crowdmotion.optim import grad_check
from crowdmotion.training import loss_adv, loss_rec

GOLDEN = Path(__file__).parent / "golden"


def walk_scene(n_persons, n_steps, joints=3, seed=0):
    return cm.generate_synthetic(n_persons, n_steps, joints=joints, seed=seed)


@pytest.fixture
def micro_predictor(micro_config):
    return cm.PredictorParams.init(micro_config, np.random.default_rng(10))


@pytest.fixture
def micro_discriminator(micro_config):
    return cm.DiscriminatorParams.init(micro_config, np.random.default_rng(11))


class TestModelConfig:
    def test_defaults_are_valid(self):
        config = cm.ModelConfig()
        assert config.pose_dim == 45
        assert config.d_model % config.heads == 0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"joints": 0},
            {"out_steps": 1},
            {"layers": 0},
            {"d_model": 10, "heads": 4},
            {"frame_rate": 0},
            {"root_joint": 15},
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            cm.ModelConfig(**kwargs)


class TestLocalEncode:
    def test_static_person_ignores_location(self, micro_config, micro_predictor):
        pose = np.arange(9.0)
        near = np.tile(pose, (5, 1))
        far = near + 1000.0
        out_near = cm.local_encode(near, micro_predictor, micro_config).data
        out_far = cm.local_encode(far, micro_predictor, micro_config).data
        assert np.array_equal(out_near, out_far)

    @pytest.mark.parametrize("steps", [4, 15, 30, 45])
    def test_variable_length_contract(self, steps, micro_config, micro_predictor, rng):
        history = rng.standard_normal((steps, 9))
        out = cm.local_encode(history, micro_predictor, micro_config)
        assert out.shape == (steps, micro_config.d_model)

    def test_golden_regression(self):
        frozen = np.load(GOLDEN / "local_encode.npz")
        config = cm.ModelConfig(joints=3, out_steps=4, layers=1, heads=2, d_model=8, d_ff=16)
        params = cm.PredictorParams.init(config, np.random.default_rng(42))
        out = cm.local_encode(frozen["history"], params, config)
        assert np.allclose(out.data, frozen["output"], atol=1e-10)

    def test_translation_invariance(self, micro_config, micro_predictor):
        history = walk_scene(1, 8, seed=3).flat_stacked()[0]
        shift = np.tile([5.0, -2.0, 1.0], 3)
        base = cm.local_encode(history, micro_predictor, micro_config).data
        moved = cm.local_encode(history + shift, micro_predictor, micro_config).data
        assert np.max(np.abs(base - moved)) < 1e-9

    def test_needs_two_steps(self, micro_config, micro_predictor):
        with pytest.raises(DataError):
            cm.local_encode(np.ones((1, 9)), micro_predictor, micro_config)

    def test_batch_matches_single(self, micro_config, micro_predictor, rng):
        histories = rng.standard_normal((3, 6, 9))
        batch = local_encode_batch(histories, micro_predictor, micro_config).data
        for i in range(3):
            single = cm.local_encode(histories[i], micro_predictor, micro_config).data
            assert np.allclose(batch[i], single, atol=1e-12)


class TestGlobalEncode:
    def test_single_person_scene(self, micro_config, micro_predictor):
        scene = walk_scene(1, 6)
        ctx = cm.global_encode(scene, micro_predictor, micro_config)
        assert ctx.tokens.shape == (6, micro_config.d_model)
        assert ctx.n_persons == 1

    def test_person_permutation_equivariance(self, micro_config, micro_predictor):
        arr = walk_scene(3, 5, seed=2).flat_stacked()
        base = cm.global_encode(arr, micro_predictor, micro_config).tokens.data
        perm = [2, 0, 1]
        permuted = cm.global_encode(arr[perm], micro_predictor, micro_config).tokens.data
        k = arr.shape[1]
        blocks = base.reshape(3, k, -1)
        blocks_perm = permuted.reshape(3, k, -1)
        assert np.allclose(blocks[perm], blocks_perm, atol=1e-9)

    def test_token_labels(self, micro_config, micro_predictor):
        arr = walk_scene(3, 15, seed=4).flat_stacked()
        ctx = cm.global_encode(arr, micro_predictor, micro_config)
        assert ctx.tokens.shape[0] == 45
        assert len(ctx.labels) == 45
        assert ctx.labels == [(n, t) for n in range(3) for t in range(15)]

    def test_absolute_position_matters(self, micro_config, micro_predictor):
        # change-detection counterpart of the local path's invariance
        arr = walk_scene(2, 5, seed=6).flat_stacked()
        moved = arr.copy()
        moved[0] += np.tile([2.0, 0.0, 0.0], 3)
        base = cm.global_encode(arr, micro_predictor, micro_config).tokens.data
        shifted = cm.global_encode(moved, micro_predictor, micro_config).tokens.data
        assert np.max(np.abs(base[:5] - shifted[:5])) > 1e-6

    def test_length_mismatch_rejected(self, micro_config, micro_predictor):
        with pytest.raises(DataError):
            cm.global_encode(np.ones((2, 4, 7)), micro_predictor, micro_config)

    def test_batch_matches_single(self, micro_config, micro_predictor, rng):
        arrs = rng.standard_normal((2, 3, 4, 9))
        batch = global_encode_batch(arrs, micro_predictor, micro_config).data
        for i in range(2):
            single = cm.global_encode(arrs[i], micro_predictor, micro_config).tokens.data
            assert np.allclose(batch[i], single, atol=1e-12)


class TestDecodePerson:
    def scene_context(self, config, params, n_persons=2, steps=4, seed=0):
        arr = walk_scene(n_persons, steps, seed=seed).flat_stacked()
        gctx = cm.global_encode(arr, params, config)
        local = cm.local_encode(arr[0], params, config)
        return arr, EncodedContext(local=local, global_ctx=gctx)

    def test_zero_output_head_freezes_query(self, micro_config, micro_predictor):
        arr, context = self.scene_context(micro_config, micro_predictor)
        micro_predictor.head2.w.data[...] = 0.0
        micro_predictor.head2.b.data[...] = 0.0
        chunk = cm.decode_person(context, arr[0, -1], arr, micro_predictor, micro_config)
        assert np.array_equal(chunk.offsets.data, np.zeros_like(chunk.offsets.data))
        assert np.array_equal(chunk.poses.data, np.tile(arr[0, -1], (micro_config.out_steps, 1)))

    def test_integration_identity_exact(self, micro_config, micro_predictor):
        arr, context = self.scene_context(micro_config, micro_predictor, seed=5)
        chunk = cm.decode_person(context, arr[0, -1], arr, micro_predictor, micro_config)
        rebuilt = arr[0, -1] + np.cumsum(chunk.offsets.data, axis=0)
        assert np.array_equal(chunk.poses.data, rebuilt)
        assert np.array_equal(chunk.poses.data[0], arr[0, -1] + chunk.offsets.data[0])

    def test_attention_records_carried(self, micro_config, micro_predictor):
        arr, context = self.scene_context(micro_config, micro_predictor)
        chunk = cm.decode_person(context, arr[0, -1], arr, micro_predictor, micro_config, person_index=0)
        assert len(chunk.attention) == micro_config.layers
        record = chunk.attention[0]
        steps, n = arr.shape[1], arr.shape[0]
        assert record.scores.shape == (micro_config.heads, 1, steps + n * steps)
        assert record.key_labels[0] == "local:p0:t0"
        assert record.key_labels[steps] == "global:p0:t0"

    def test_scene_mismatch_rejected(self, micro_config, micro_predictor):
        arr, context = self.scene_context(micro_config, micro_predictor)
        bigger = np.concatenate([arr, arr[:1]], axis=0)
        with pytest.raises(DataError):
            cm.decode_person(context, arr[0, -1], bigger, micro_predictor, micro_config)

    def test_other_person_permutation_leaves_query_output(self, micro_config, micro_predictor):
        arr = walk_scene(4, 5, seed=9).flat_stacked()
        perm = np.array([0, 3, 1, 2])  # person 0 queried; others permuted

        def run(a):
            gctx = cm.global_encode(a, micro_predictor, micro_config)
            ctx = EncodedContext(local=cm.local_encode(a[0], micro_predictor, micro_config), global_ctx=gctx)
            return cm.decode_person(ctx, a[0, -1], a, micro_predictor, micro_config)

        base = run(arr)
        permuted = run(arr[perm])
        assert np.max(np.abs(base.poses.data - permuted.poses.data)) < 1e-9


class TestPredictScene:
    def test_single_person_end_to_end(self, micro_config, micro_predictor):
        chunks = cm.predict_scene(walk_scene(1, 6), micro_predictor, micro_config)
        assert len(chunks) == 1
        assert chunks[0].poses.shape == (micro_config.out_steps, 9)
        assert np.all(np.isfinite(chunks[0].poses.data))

    def test_one_chunk_per_person(self, micro_config, micro_predictor):
        chunks = cm.predict_scene(walk_scene(3, 5), micro_predictor, micro_config)
        assert len(chunks) == 3

    def test_compositionality(self, micro_config, micro_predictor):
        scene = walk_scene(2, 5, seed=12)
        arr = scene.flat_stacked()
        chunks = cm.predict_scene(scene, micro_predictor, micro_config)
        gctx = cm.global_encode(arr, micro_predictor, micro_config)
        for n in range(2):
            ctx = EncodedContext(local=cm.local_encode(arr[n], micro_predictor, micro_config), global_ctx=gctx)
            isolated = cm.decode_person(ctx, arr[n, -1], arr, micro_predictor, micro_config, person_index=n)
            assert np.array_equal(chunks[n].poses.data, isolated.poses.data)


class TestDiscriminate:
    def test_score_per_step(self, micro_config, micro_discriminator, rng):
        for steps in (3, 7):
            scores = cm.discriminate(rng.standard_normal((steps, 9)), micro_discriminator, micro_config)
            assert scores.shape == (steps,)

    def test_finite_at_init(self, micro_config, micro_discriminator, rng):
        scores = cm.discriminate(rng.standard_normal((5, 9)) * 10.0, micro_discriminator, micro_config)
        assert np.all(np.isfinite(scores.data))

    def test_batch_matches_single(self, micro_config, micro_discriminator, rng):
        windows = rng.standard_normal((4, 5, 9))
        batch = discriminate_batch(windows, micro_discriminator, micro_config).data
        for i in range(4):
            single = cm.discriminate(windows[i], micro_discriminator, micro_config).data
            assert np.allclose(batch[i], single, atol=1e-12)


class TestFullModelGradients:
    def test_predictor_loss_spot_check(self, micro_config, micro_predictor, micro_discriminator):
        """Fast spot check over a parameter slice; the acceptance suite sweeps
        every coordinate of both networks."""
        scene = walk_scene(2, 8, seed=21)
        sample = cm.make_samples(scene, micro_config, history_steps=4)[0]

        def f():
            gctx = cm.global_encode(sample.history, micro_predictor, micro_config)
            terms = []
            for n in range(sample.n_persons):
                ctx = EncodedContext(
                    local=cm.local_encode(sample.history[n], micro_predictor, micro_config),
                    global_ctx=gctx,
                )
                chunk = cm.decode_person(ctx, sample.query_poses[n], sample.history, micro_predictor, micro_config)
                adv = loss_adv(cm.discriminate(chunk.poses, micro_discriminator, micro_config))
                terms.append(loss_rec(chunk.offsets, sample.target_offsets[n]) + scale(adv, 5e-4))
            return mean_scalars(terms)

        subset = [
            micro_predictor.local_embed.w,
            micro_predictor.query_embed.b,
            micro_predictor.local_layers[0].attn.wq[0],
            micro_predictor.global_layers[0].norm1.gamma,
            micro_predictor.decoder_layers[0].ff1.w,
            micro_predictor.head2.b,
        ]
        report = grad_check(f, subset, tol=1e-4)
        assert report.passed, str(report)
