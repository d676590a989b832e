"""Model tests: patch rearrangement bijection, rotation conditioning,
train/infer equivalence, parameter-count anchors, end-to-end causality,
checkpoint round trip, and the full-model finite-difference check."""

import numpy as np
import pytest

from framediff.errors import FormatError, GeometryError
from framediff.frame_attention import FlopCounter, MaskVariant, frame_pair_count
from framediff.model import (
    FrameDiT,
    ModelConfig,
    block_core_param_count,
    param_breakdown,
    param_count,
    patchify,
    patchify_frames,
    unpatchify,
)
from framediff.schedule import DiffusionPair, Parameterization, forward_diffuse
from framediff.tensor import Tensor, grad_check


def tiny_config(**kw):
    base = dict(
        layers=2, hidden=8, mlp=16, heads=2, patch=2, channels=1, height=2, width=2,
        variant=MaskVariant.OF, param=Parameterization.COMPANION,
    )
    base.update(kw)
    return ModelConfig(**base)


def small_config(**kw):
    base = dict(
        layers=2, hidden=32, mlp=64, heads=4, patch=4, channels=1, height=8, width=8,
        variant=MaskVariant.OF, param=Parameterization.COMPANION,
    )
    base.update(kw)
    return ModelConfig(**base)


def make_batch(rng, config, B, F):
    shape = (B, F, config.channels, config.height, config.width)
    clean = rng.standard_normal(shape)
    eps = rng.standard_normal(shape)
    t = rng.uniform(0.1, 0.9, B)
    noisy = np.stack([
        forward_diffuse(DiffusionPair(clean[b], eps[b]), float(t[b])) for b in range(B)
    ])
    return clean, noisy, t


class TestPatchify:
    def test_single_patch_is_row_major_flatten(self):
        frame = np.arange(16.0).reshape(1, 4, 4)
        tokens = patchify(frame, 4)
        assert tokens.shape == (1, 16)
        assert np.array_equal(tokens[0], frame.flatten())

    def test_round_trip_exact(self):
        rng = np.random.default_rng(30)
        frame = rng.standard_normal((3, 8, 8))
        back = unpatchify(patchify(frame, 2), 2, 3, 8, 8)
        assert np.array_equal(back, frame)

    def test_token_count(self):
        assert patchify(np.zeros((1, 16, 16)), 4).shape[0] == 16

    def test_geometry_mismatch(self):
        with pytest.raises(GeometryError):
            patchify(np.zeros((1, 5, 4)), 2)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(31)
        frames = rng.standard_normal((2, 3, 1, 4, 4))
        batched = patchify_frames(frames, 2)
        for b in range(2):
            for f in range(3):
                assert np.array_equal(batched[b, f], patchify(frames[b, f], 2))


class TestConfig:
    def test_validation(self):
        with pytest.raises(GeometryError):
            tiny_config(hidden=9)  # not divisible by heads / odd
        with pytest.raises(GeometryError):
            tiny_config(height=3)

    def test_derived_sizes(self):
        cfg = small_config()
        assert cfg.tokens_per_frame == 4
        assert cfg.token_dim == 16
        assert cfg.head_dim == 8

    def test_round_trip_dict(self):
        cfg = small_config(variant=MaskVariant.OF2, param=Parameterization.EPSILON)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestParamCount:
    def test_block_core_anchor_85m(self):
        cfg = ModelConfig(
            layers=12, hidden=768, mlp=3072, heads=12,
            patch=4, channels=1, height=16, width=16,
        )
        core = block_core_param_count(cfg)
        assert core == 12 * (4 * 768**2 + 2 * 768 * 3072)
        assert core == 84_934_656
        assert abs(core - 85e6) / 85e6 < 0.02

    def test_zero_layers_leaves_embed_and_head(self):
        cfg = tiny_config(layers=0)
        breakdown = param_breakdown(cfg)
        assert breakdown["block_core"] == 0
        assert param_count(cfg) == breakdown["patch_embed"] + breakdown["head"]

    def test_doubling_layers_doubles_block_core(self):
        assert block_core_param_count(tiny_config(layers=4)) == 2 * block_core_param_count(
            tiny_config(layers=2)
        )

    def test_count_matches_instantiated_model(self):
        cfg = small_config()
        model = FrameDiT(cfg, seed=1)
        actual = sum(p.size for p in model.params.values())
        assert actual == param_count(cfg)

    def test_variant_swap_changes_no_shapes(self):
        a = FrameDiT(small_config(variant=MaskVariant.OF), seed=3)
        b = FrameDiT(small_config(variant=MaskVariant.OF2), seed=3)
        assert {k: v.shape for k, v in a.params.items()} == {
            k: v.shape for k, v in b.params.items()
        }
        assert a.param_digest() == b.param_digest()


class TestRotationConditioning:
    def test_rotate_condition_t_zero_identity(self):
        from framediff.frame_attention import FrameLayout
        from framediff.model import rotate_condition

        rng = np.random.default_rng(60)
        layout = FrameLayout.training(2, 2)
        h = Tensor(rng.standard_normal((layout.length, 8)))
        out = rotate_condition(h, 0.0, layout)
        assert np.array_equal(out.data, h.data)

    def test_rotate_condition_quarter_turn_on_noisy_rows_only(self):
        from framediff.frame_attention import CLEAN, FrameLayout
        from framediff.model import rotate_condition

        layout = FrameLayout.training(1, 1)  # rows: c1, n1
        h = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        out = rotate_condition(h, 1.0, layout).data
        assert np.allclose(out[0], [1.0, 0.0], atol=1e-15)  # clean untouched
        assert np.allclose(out[1], [0.0, 1.0], atol=1e-15)  # noisy pair rotated

    def test_rotate_condition_norm_preserved(self):
        from framediff.frame_attention import FrameLayout
        from framediff.model import rotate_condition

        rng = np.random.default_rng(61)
        layout = FrameLayout.training(3, 2)
        h = rng.standard_normal((layout.length, 16))
        for t in rng.uniform(0, 1, 5):
            out = rotate_condition(Tensor(h), float(t), layout).data
            assert np.allclose(
                np.linalg.norm(out, axis=-1), np.linalg.norm(h, axis=-1), atol=1e-12
            )

    def test_t_zero_is_identity(self):
        rng = np.random.default_rng(32)
        cfg = small_config()
        model = FrameDiT(cfg, seed=0, dtype=np.float64)
        clean, noisy, _ = make_batch(rng, cfg, 1, 2)
        t0 = np.zeros(1)
        # With t=0 the rotation is identity; prediction must equal a run
        # where the rotation routine sees explicit zero angles.
        out_a = model.forward_train(clean, noisy, t0).data
        out_b = model.forward_train(clean, noisy, np.zeros(1)).data
        assert np.array_equal(out_a, out_b)

    def test_norm_preserved_per_token(self):
        # The conditioning is orthogonal on each token's hidden vector.
        from framediff.tensor import rotate_pairs

        rng = np.random.default_rng(33)
        h = rng.standard_normal((4, 10, 32))
        theta = rng.uniform(0, np.pi / 2, (4, 10, 1))
        out = rotate_pairs(Tensor(h), np.cos(theta), np.sin(theta)).data
        assert np.allclose(
            np.linalg.norm(out, axis=-1), np.linalg.norm(h, axis=-1), atol=1e-10
        )


class TestForward:
    def test_zero_head_predicts_exactly_zero(self):
        rng = np.random.default_rng(34)
        cfg = small_config()
        model = FrameDiT(cfg, seed=5)
        clean, noisy, t = make_batch(rng, cfg, 2, 3)
        out = model.forward_train(clean, noisy, t).data
        assert np.all(out == 0.0)

    def test_single_frame_runs_and_is_finite(self):
        rng = np.random.default_rng(35)
        cfg = small_config()
        model = FrameDiT(cfg, seed=6)
        _randomize_head(model, rng)
        clean, noisy, t = make_batch(rng, cfg, 1, 1)
        out = model.forward_train(clean, noisy, t).data
        assert out.shape == (1, cfg.tokens_per_frame, cfg.token_dim)
        assert np.all(np.isfinite(out))

    def test_parameters_never_indexed_by_time(self):
        rng = np.random.default_rng(36)
        cfg = small_config()
        model = FrameDiT(cfg, seed=7)
        digest = model.param_digest()
        clean, noisy, _ = make_batch(rng, cfg, 1, 2)
        for t in (0.0, 0.25, 0.9):
            model.forward_train(clean, noisy, np.full(1, t))
        assert model.param_digest() == digest

    def test_features_have_hidden_width(self):
        rng = np.random.default_rng(37)
        cfg = small_config()
        model = FrameDiT(cfg, seed=8)
        frames = rng.standard_normal((3, cfg.channels, cfg.height, cfg.width))
        feats = model.clean_features(frames)
        assert len(feats) == cfg.layers
        assert all(f.shape == (1, cfg.hidden) for f in feats)

    def test_geometry_mismatch_rejected(self):
        cfg = small_config()
        model = FrameDiT(cfg, seed=9)
        bad = np.zeros((1, 2, 1, 4, 4))
        with pytest.raises(GeometryError):
            model.forward_train(bad, bad, np.array([0.5]))


def _randomize_head(model, rng, scale=0.05):
    for name in ("head.w", "head.b"):
        model.params[name] = Tensor(
            rng.normal(0, scale, model.params[name].shape).astype(model.dtype),
            requires_grad=True,
        )


class TestTrainInferEquivalence:
    @pytest.mark.parametrize("variant", [MaskVariant.OF, MaskVariant.OF2])
    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-5)])
    def test_cached_inference_matches_train_rows(self, variant, dtype, tol):
        rng = np.random.default_rng(40)
        cfg = small_config(variant=variant)
        model = FrameDiT(cfg, seed=11, dtype=dtype)
        _randomize_head(model, rng)
        F = 4
        clean, noisy, t = make_batch(rng, cfg, 1, F)
        train_out = model.forward_train(clean, noisy, t).data[0]
        P = cfg.tokens_per_frame

        cache = model.new_cache(F)
        for i in range(F - 1):
            model.encode_frame(clean[0, i], cache)
        pred = model.predict_noisy(noisy[0, F - 1], float(t[0]), F, cache)
        train_pred = unpatchify(
            train_out[(F - 1) * P : F * P].astype(np.float64),
            cfg.patch, cfg.channels, cfg.height, cfg.width,
        )
        assert np.max(np.abs(pred - train_pred)) <= tol

    @pytest.mark.parametrize("variant", [MaskVariant.OF, MaskVariant.OF2])
    def test_cached_matches_full_recompute(self, variant):
        rng = np.random.default_rng(41)
        cfg = small_config(variant=variant)
        model = FrameDiT(cfg, seed=12, dtype=np.float64)
        _randomize_head(model, rng)
        F = 3
        frames = [rng.standard_normal((1, 8, 8)) for _ in range(F - 1)]
        noisy = rng.standard_normal((1, 8, 8))
        cache = model.new_cache(F)
        for f in frames:
            model.encode_frame(f, cache)
        a = model.predict_noisy(noisy, 0.6, F, cache)
        b = model.predict_noisy_full(noisy, 0.6, frames)
        assert np.max(np.abs(a - b)) <= 1e-10

    def test_cache_tag_mismatch_rejected(self):
        cfg = small_config()
        model = FrameDiT(cfg, seed=13)
        cache = model.new_cache(4)
        with pytest.raises(GeometryError):
            model.predict_noisy(np.zeros((1, 8, 8)), 0.5, 3, cache)


class TestCausality:
    @pytest.mark.parametrize("variant", [MaskVariant.OF, MaskVariant.OF2])
    def test_future_frames_cannot_move_predictions(self, variant):
        rng = np.random.default_rng(42)
        cfg = small_config(variant=variant, layers=4)
        model = FrameDiT(cfg, seed=14, dtype=np.float64)
        _randomize_head(model, rng)
        F = 4
        clean, noisy, t = make_batch(rng, cfg, 1, F)
        base = model.forward_train(clean, noisy, t).data
        P = cfg.tokens_per_frame
        for trial in range(10):
            j = int(rng.integers(2, F + 1))  # frame to perturb (1-based)
            which = rng.random() < 0.5
            clean_p, noisy_p = clean.copy(), noisy.copy()
            target = clean_p if which else noisy_p
            target[0, j - 1] += rng.standard_normal(target.shape[2:])
            out = model.forward_train(clean_p, noisy_p, t).data
            assert np.array_equal(base[0, : (j - 1) * P], out[0, : (j - 1) * P])

    def test_of2_clean_features_are_frame_local(self):
        rng = np.random.default_rng(43)
        cfg = small_config(variant=MaskVariant.OF2)
        model = FrameDiT(cfg, seed=15)
        frames = rng.standard_normal((4, 1, 8, 8))
        base = model.clean_features(frames[:1])
        perturbed = frames.copy()
        perturbed[1:] += 10.0
        # First frame's contribution to pooled features is computed from
        # frame 1 alone, so extracting on just that frame must agree.
        again = model.clean_features(perturbed[:1])
        for a, b in zip(base, again):
            assert np.array_equal(a, b)


class TestFlopInstrumentation:
    @pytest.mark.parametrize("variant", [MaskVariant.OF, MaskVariant.OF2])
    def test_train_forward_counts_match_closed_form(self, variant):
        rng = np.random.default_rng(44)
        cfg = small_config(variant=variant)
        model = FrameDiT(cfg, seed=16)
        F = 5
        clean, noisy, t = make_batch(rng, cfg, 1, F)
        counter = FlopCounter()
        model.forward_train(clean, noisy, t, counter=counter)
        pairs = frame_pair_count(variant, F).total
        expected = 2 * pairs * cfg.heads * cfg.tokens_per_frame**2 * cfg.head_dim * cfg.layers
        assert counter.attention_macs == expected


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(45)
        cfg = small_config(variant=MaskVariant.OF2, param=Parameterization.EPSILON)
        model = FrameDiT(cfg, seed=17)
        _randomize_head(model, rng)
        path = tmp_path / "model.fdck"
        model.save(path)
        loaded = FrameDiT.load(path)
        assert loaded.config == cfg
        assert loaded.param_digest() == model.param_digest()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.fdck"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            FrameDiT.load(path)

    def test_truncated_rejected(self, tmp_path):
        cfg = small_config()
        model = FrameDiT(cfg, seed=18)
        path = tmp_path / "model.fdck"
        model.save(path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 100])
        with pytest.raises(FormatError):
            FrameDiT.load(path)


class TestFullModelGradient:
    def test_finite_differences_over_all_parameters(self):
        # Tiny config: 2 layers, hidden 8, heads 2, P=1, F=2.
        rng = np.random.default_rng(46)
        cfg = tiny_config()
        model = FrameDiT(cfg, seed=19, dtype=np.float64)
        _randomize_head(model, rng, scale=0.5)
        clean, noisy, t = make_batch(rng, cfg, 1, 2)
        target = rng.standard_normal((1, 2 * cfg.tokens_per_frame, cfg.token_dim))

        def loss_with(name, tensor):
            saved = model.params[name]
            model.params[name] = tensor
            try:
                pred = model.forward_train(clean, noisy, t)
                diff = pred - Tensor(target)
                return (diff * diff).mean()
            finally:
                model.params[name] = saved

        worst = 0.0
        for name in model.params:
            err = grad_check(lambda p, n=name: loss_with(n, p), model.params[name])
            worst = max(worst, err)
        assert worst < 1e-3
