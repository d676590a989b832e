"""Autoregressive frame-by-frame generation with iterative denoising.

Frames are produced one at a time: draw pure noise for the next frame,
denoise it over a uniform time grid while attending the cached clean
context, then append the finished frame to the cache and move on. Each
frame's starting noise is keyed by (seed, frame index), so extending a
rollout never disturbs the frames already generated.

Classifier-free guidance combines the context-conditioned prediction
with an empty-context prediction (all noisy-to-clean attention masked)
as uncond + w * (cond - uncond).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, DivergenceError, ShapeError
from .frame_attention import KVCache
from .schedule import Parameterization, denoise_step, time_grid
from .rng import substream


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 1.0
    frames_to_generate: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ShapeError("steps must be >= 1")
        if self.frames_to_generate < 0:
            raise ShapeError("frames_to_generate must be >= 0")


def cfg_combine(cond: np.ndarray, uncond: np.ndarray, w: float) -> np.ndarray:
    """uncond + w * (cond - uncond); exact at w=0 and w=1."""
    if np.shape(cond) != np.shape(uncond):
        raise ShapeError(f"shapes differ: {np.shape(cond)} vs {np.shape(uncond)}")
    if w == 1.0:
        return cond
    if w == 0.0:
        return uncond
    return uncond + w * (cond - uncond)


def _grid_for(param: Parameterization, steps: int) -> np.ndarray:
    # The epsilon head cannot express an x0 estimate at t=1 (cos(theta)=0),
    # so its grid starts half a step inside; companion starts at exactly 1.
    if param == Parameterization.EPSILON:
        return time_grid(steps, start=1.0 - 0.5 / steps)
    return time_grid(steps)


def denoise_frame(
    model,
    cache: KVCache,
    config: SamplerConfig,
    frame_index: int,
    use_cache: bool = True,
    context: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Generate clean frame `frame_index` given the cached context.

    With use_cache=False the clean context features are recomputed from
    `context` on every model call instead of being read from the cache
    (the reference path the cache is checked against).
    """
    cfg = model.config
    rng = substream(config.seed, "frame-noise", frame_index)
    x = rng.standard_normal((cfg.channels, cfg.height, cfg.width))
    grid = _grid_for(cfg.param, config.steps)
    w = config.guidance_scale
    has_context = (len(cache) if use_cache else len(context or [])) > 0
    for t, s in zip(grid[:-1], grid[1:]):
        t = float(t)
        if use_cache:
            cond = model.predict_noisy(x, t, frame_index, cache)
        else:
            cond = model.predict_noisy_full(x, t, list(context))
        if w != 1.0 and has_context:
            if use_cache:
                uncond = model.predict_noisy(x, t, frame_index, cache, drop_context=True)
            else:
                uncond = model.predict_noisy_full(x, t, list(context), drop_context=True)
            pred = cfg_combine(cond, uncond, w)
        else:
            pred = cond
        x = denoise_step(x, pred, cfg.param, t, float(s))
        if not np.all(np.isfinite(x)):
            raise DivergenceError(
                f"non-finite frame during denoising at t={t:.4f} (frame {frame_index})"
            )
    return x


def rollout(
    model,
    context: list[np.ndarray],
    config: SamplerConfig,
    use_cache: bool = True,
) -> list[np.ndarray]:
    """Encode the context, then generate frames one by one.

    The cache is sized for context + generated frames; generation may run
    past the sequence length the model was trained on (positions are
    computed from the frame index, not looked up).
    """
    total = len(context) + config.frames_to_generate
    cache = model.new_cache(total) if use_cache else None
    known = [np.asarray(f, dtype=np.float64) for f in context]
    if use_cache:
        if total > cache.capacity_frames:
            raise CapacityError(f"rollout needs {total} frames, cache holds {cache.capacity_frames}")
        for f in known:
            model.encode_frame(f, cache)
    generated: list[np.ndarray] = []
    for g in range(config.frames_to_generate):
        frame_index = len(known) + 1
        frame = denoise_frame(
            model, cache, config, frame_index,
            use_cache=use_cache, context=known,
        )
        generated.append(frame)
        known.append(frame)
        if use_cache:
            model.encode_frame(frame, cache)
    return generated


def write_pgm(frame: np.ndarray, path) -> None:
    """Dump one channel as a binary portable graymap, mapping [-1,1] to 0..255."""
    img = frame[0] if frame.ndim == 3 else frame
    h, w = img.shape
    levels = np.clip((img + 1.0) * 127.5, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())
