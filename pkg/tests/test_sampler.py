"""Sampler tests: a perfect-prediction stub model recovers its target
exactly, rollouts are deterministic and prefix-stable, and the cached
path agrees with full recomputation."""

import numpy as np
import pytest

from framediff.errors import CapacityError, DivergenceError, ShapeError
from framediff.frame_attention import MaskVariant
from framediff.model import FrameDiT, ModelConfig
from framediff.sampler import SamplerConfig, cfg_combine, denoise_frame, rollout, write_pgm
from framediff.schedule import Parameterization, theta_of
from framediff.tensor import Tensor


class PerfectStub:
    """Pretends to be a model that knows the true clean frame: its companion
    prediction is exact, so one denoising step recovers the target."""

    def __init__(self, target, geometry=(1, 4, 4)):
        c, h, w = geometry
        self.config = ModelConfig(
            layers=1, hidden=4, mlp=4, heads=1, patch=h, channels=c, height=h, width=w,
            param=Parameterization.COMPANION,
        )
        self.target = target
        self.encoded = []

    def new_cache(self, capacity):
        from framediff.frame_attention import KVCache

        return KVCache(1, 1, 1, 4, capacity)

    def encode_frame(self, frame, cache, counter=None):
        cache.append(len(cache) + 1, [np.zeros((1, 1, 4), np.float32)],
                     [np.zeros((1, 1, 4), np.float32)])
        self.encoded.append(np.asarray(frame).copy())

    def predict_noisy(self, x, t, frame_index, cache, drop_context=False, counter=None):
        th = theta_of(t)
        s = np.sin(th)
        if s == 0.0:
            raise AssertionError("stub never queried at t=0")
        return (np.cos(th) * x - self.target) / s

    def predict_noisy_full(self, x, t, context, drop_context=False, counter=None):
        return self.predict_noisy(x, t, len(context) + 1, None, drop_context)


def small_model(variant=MaskVariant.OF, seed=50, dtype=np.float64):
    cfg = ModelConfig(
        layers=2, hidden=32, mlp=64, heads=4, patch=4, channels=1, height=8, width=8,
        variant=variant,
    )
    model = FrameDiT(cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    for name in ("head.w", "head.b"):
        model.params[name] = Tensor(
            rng.normal(0, 0.05, model.params[name].shape).astype(model.dtype),
            requires_grad=False,
        )
    return model


class TestCfgCombine:
    def test_w_one_returns_cond_exactly(self):
        cond = np.random.default_rng(0).standard_normal((2, 2))
        uncond = cond + 1.0
        assert cfg_combine(cond, uncond, 1.0) is cond

    def test_w_zero_returns_uncond_exactly(self):
        cond = np.ones(3)
        uncond = np.zeros(3)
        assert cfg_combine(cond, uncond, 0.0) is uncond

    def test_paper_scale_arithmetic(self):
        assert cfg_combine(np.array(2.0), np.array(1.0), 2.0) == pytest.approx(3.0)

    def test_affine_in_w(self):
        rng = np.random.default_rng(1)
        cond = rng.standard_normal(4)
        uncond = rng.standard_normal(4)
        w1, w2 = 0.7, 1.9
        mid = cfg_combine(cond, uncond, (w1 + w2) / 2)
        avg = (cfg_combine(cond, uncond, w1) + cfg_combine(cond, uncond, w2)) / 2
        assert np.allclose(mid, avg, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cfg_combine(np.zeros(2), np.zeros(3), 1.5)


class TestDenoiseFrame:
    def test_single_step_perfect_stub_recovers_target(self):
        rng = np.random.default_rng(2)
        target = rng.standard_normal((1, 4, 4))
        stub = PerfectStub(target)
        cache = stub.new_cache(4)
        out = denoise_frame(stub, cache, SamplerConfig(steps=1, seed=3), 1)
        assert np.max(np.abs(out - target)) <= 1e-10

    def test_fifty_step_perfect_stub_recovers_target(self):
        rng = np.random.default_rng(3)
        target = rng.standard_normal((1, 4, 4))
        stub = PerfectStub(target)
        out = denoise_frame(stub, stub.new_cache(4), SamplerConfig(steps=50, seed=4), 1)
        assert np.max(np.abs(out - target)) <= 1e-6

    def test_same_seed_bit_identical(self):
        model = small_model()
        a = denoise_frame(model, model.new_cache(2), SamplerConfig(steps=4, seed=9), 1)
        b = denoise_frame(model, model.new_cache(2), SamplerConfig(steps=4, seed=9), 1)
        assert np.array_equal(a, b)

    def test_empty_cache_unconditional_frame(self):
        model = small_model()
        out = denoise_frame(model, model.new_cache(1), SamplerConfig(steps=3, seed=1), 1)
        assert out.shape == (1, 8, 8)
        assert np.all(np.isfinite(out))

    def test_divergence_detected(self):
        class NanStub(PerfectStub):
            def predict_noisy(self, x, t, frame_index, cache, drop_context=False, counter=None):
                return np.full_like(x, np.nan)

        stub = NanStub(np.zeros((1, 4, 4)))
        with pytest.raises(DivergenceError):
            denoise_frame(stub, stub.new_cache(1), SamplerConfig(steps=2, seed=0), 1)

    def test_epsilon_grid_avoids_singularity(self):
        cfg = ModelConfig(
            layers=2, hidden=32, mlp=64, heads=4, patch=4, channels=1, height=8, width=8,
            param=Parameterization.EPSILON,
        )
        eps_model = FrameDiT(cfg, seed=50, dtype=np.float64)
        out = denoise_frame(eps_model, eps_model.new_cache(1), SamplerConfig(steps=4, seed=2), 1)
        assert np.all(np.isfinite(out))


class TestRollout:
    def test_zero_frames_returns_empty(self):
        model = small_model()
        context = [np.zeros((1, 8, 8))] * 2
        out = rollout(model, context, SamplerConfig(steps=2, seed=5, frames_to_generate=0))
        assert out == []

    def test_context_5_generate_12_shapes(self):
        stub = PerfectStub(np.zeros((1, 4, 4)))
        context = [np.zeros((1, 4, 4))] * 5
        out = rollout(stub, context, SamplerConfig(steps=1, seed=6, frames_to_generate=12))
        assert len(out) == 12
        assert len(stub.encoded) == 17  # cache ends with context + generated

    def test_prefix_stability_under_extension(self):
        model = small_model()
        context = [np.random.default_rng(7).standard_normal((1, 8, 8))]
        short = rollout(model, context, SamplerConfig(steps=3, seed=8, frames_to_generate=2))
        long = rollout(model, context, SamplerConfig(steps=3, seed=8, frames_to_generate=4))
        for a, b in zip(short, long):
            assert np.array_equal(a, b)

    @pytest.mark.parametrize("variant", [MaskVariant.OF, MaskVariant.OF2])
    def test_cached_rollout_matches_recompute(self, variant):
        model = small_model(variant=variant)
        rng = np.random.default_rng(10)
        context = [rng.standard_normal((1, 8, 8)) for _ in range(2)]
        config = SamplerConfig(steps=3, seed=11, frames_to_generate=3, guidance_scale=1.5)
        cached = rollout(model, context, config, use_cache=True)
        recomputed = rollout(model, context, config, use_cache=False)
        for a, b in zip(cached, recomputed):
            assert np.max(np.abs(a - b)) <= 1e-10

    def test_generates_beyond_training_length(self):
        model = small_model()
        out = rollout(model, [], SamplerConfig(steps=2, seed=12, frames_to_generate=6))
        assert len(out) == 6

    def test_capacity_error_when_cache_too_small(self):
        model = small_model()

        class TinyCacheModel:
            config = model.config
            encode_frame = model.encode_frame
            predict_noisy = model.predict_noisy
            predict_noisy_full = model.predict_noisy_full

            def new_cache(self, capacity):
                return model.new_cache(1)

        with pytest.raises(CapacityError):
            rollout(
                TinyCacheModel(), [np.zeros((1, 8, 8))] * 2,
                SamplerConfig(steps=1, seed=0, frames_to_generate=1),
            )


class TestPgm:
    def test_header_and_range(self, tmp_path):
        frame = np.linspace(-1, 1, 64).reshape(1, 8, 8)
        path = tmp_path / "frame.pgm"
        write_pgm(frame, path)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n8 8\n255\n")
        pixels = np.frombuffer(raw.split(b"255\n", 1)[1], dtype=np.uint8)
        assert pixels.min() == 0 and pixels.max() == 255
