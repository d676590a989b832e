"""Training loop: synchronized-noise diffusion loss, Adam, checkpoints.

Each training sequence draws one diffusion time t shared by all of its
noisy frames (synchronized noise) and fresh Gaussian noise per frame.
With probability p_drop the sequence is trained unconditionally: every
noisy-to-clean attention edge is masked, which is what the sampler's
classifier-free guidance later relies on.

The loss is the mean squared error over noisy-token predictions,
averaged over batch, frames, tokens and channels, so the frame count
does not rescale the learning rate.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DivergenceError, DomainError
from .frame_attention import FlopCounter, MaskVariant
from .model import FrameDiT, ModelConfig, patchify_frames
from .rng import substream
from .schedule import Parameterization, theta_of
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    lr: float = 1e-4
    batch: int = 16
    p_drop: float = 0.1
    precision: int = 32
    seed: int = 0
    variant: MaskVariant = MaskVariant.OF
    param: Parameterization = Parameterization.COMPANION
    checkpoint_every: int = 500
    t_min: float = 0.001

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise DomainError(f"p_drop {self.p_drop} outside [0, 1]")
        if self.batch < 1:
            raise DomainError("batch must be >= 1")
        if self.precision not in (32, 64):
            raise DomainError(f"precision must be 32 or 64, got {self.precision}")


@dataclass
class TrainState:
    model: FrameDiT
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    loss_history: list[float] = field(default_factory=list)

    @staticmethod
    def fresh(model: FrameDiT) -> "TrainState":
        return TrainState(
            model=model,
            m={k: np.zeros_like(p.data) for k, p in model.params.items()},
            v={k: np.zeros_like(p.data) for k, p in model.params.items()},
        )


def adam_update(
    param: Tensor,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam update, in place. `step` is 1-based."""
    if grad.shape != param.shape or m.shape != param.shape or v.shape != param.shape:
        raise DomainError(f"adam shapes disagree: {param.shape} vs {grad.shape}")
    m[...] = beta1 * m + (1 - beta1) * grad
    v[...] = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.data.dtype)


def diffusion_targets(
    frames: np.ndarray, eps: np.ndarray, t: np.ndarray, param: Parameterization
):
    """Noisy copies and per-token regression targets for a batch.

    frames, eps: (B, F, C, H, W); t: (B,) shared within each sequence.
    Returns (noisy frames, target frames) in frame space.
    """
    thetas = np.array([theta_of(float(ti)) for ti in t])
    cos = np.cos(thetas)[:, None, None, None, None]
    sin = np.sin(thetas)[:, None, None, None, None]
    noisy = cos * frames + sin * eps
    if param == Parameterization.COMPANION:
        target = -sin * frames + cos * eps
    else:
        target = eps
    return noisy, target


def batch_loss(
    model: FrameDiT,
    frames: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    drop: np.ndarray,
    param: Parameterization,
    counter: FlopCounter | None = None,
) -> Tensor:
    """Mean squared error over noisy-token predictions for one batch.

    Sequences flagged in `drop` run with all noisy-to-clean attention
    removed (the unconditional branch). The reduction is a plain mean
    over batch, frames, tokens and channels.
    """
    B = frames.shape[0]
    noisy, target = diffusion_targets(frames, eps, t, param)
    target_tokens = patchify_frames(target, model.config.patch).reshape(
        B, -1, model.config.token_dim
    )
    loss = None
    for flag in (False, True):
        idx = np.flatnonzero(drop == flag)
        if idx.size == 0:
            continue
        preds = model.forward_train(
            frames[idx], noisy[idx], t[idx], drop_context=flag, counter=counter
        )
        diff = preds - Tensor(target_tokens[idx].astype(model.dtype))
        group = T.scale((diff * diff).mean(), idx.size / B)
        loss = group if loss is None else loss + group
    return loss


def train_step(
    state: TrainState,
    batch: np.ndarray,
    config: TrainConfig,
    counter: FlopCounter | None = None,
) -> float:
    """One optimization step; randomness is keyed by (seed, step index)."""
    model = state.model
    B = batch.shape[0]
    noise_rng = substream(config.seed, "noise", state.step)
    drop_rng = substream(config.seed, "dropout", state.step)
    t = noise_rng.uniform(config.t_min, 1.0, B)
    eps = noise_rng.standard_normal(batch.shape)
    drop = drop_rng.random(B) < config.p_drop

    model.zero_grad()
    loss = batch_loss(model, batch, t, eps, drop, config.param, counter)
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {state.step}")
    if config.lr != 0.0:
        loss.backward()
        state.step += 1
        for name, p in model.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_update(p, grad, state.m[name], state.v[name], state.step, config.lr)
    else:
        state.step += 1
    state.loss_history.append(value)
    return value


def batch_digest(indices: np.ndarray, frames: np.ndarray) -> str:
    """Fingerprint of the exact batch content a step consumed."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(indices.astype(np.int64)).tobytes())
    h.update(np.ascontiguousarray(frames.astype(np.float32)).tobytes())
    return h.hexdigest()[:16]


def fit(
    frames: np.ndarray,
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir=None,
    log_path=None,
) -> tuple[TrainState, list[dict]]:
    """Train from scratch over a (N, F, C, H, W) dataset array.

    The mask variant and parameterization come from the train config, so
    paired runs can share one geometry while swapping attention variants.
    Writes one metrics record per step and a checkpoint every
    `checkpoint_every` steps (plus the final state); on divergence the
    last finished checkpoint stays on disk.
    """
    if frames.size == 0:
        raise DomainError("empty dataset")
    model_config = dataclasses.replace(
        model_config, variant=config.variant, param=config.param
    )
    dtype = np.float32 if config.precision == 32 else np.float64
    model = FrameDiT(model_config, seed=config.seed, dtype=dtype)
    state = TrainState.fresh(model)
    metrics: list[dict] = []
    n = frames.shape[0]
    batch_rng = substream(config.seed, "batch")
    order = np.array([], dtype=np.intp)

    log_fh = open(log_path, "w") if log_path else None
    try:
        for step in range(config.steps):
            while order.size < config.batch:
                order = np.concatenate([order, batch_rng.permutation(n)])
            indices, order = order[: config.batch], order[config.batch :]
            picked = frames[indices]
            started = time.perf_counter()
            try:
                loss = train_step(state, picked, config)
            except DivergenceError:
                if log_fh:
                    log_fh.flush()
                raise
            wall_ms = (time.perf_counter() - started) * 1e3
            record = {
                "step": state.step,
                "loss": loss,
                "variant": config.variant.value,
                "lr": config.lr,
                "wall_ms": round(wall_ms, 3),
                "batch_digest": batch_digest(indices, picked),
            }
            metrics.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if out_dir is not None and state.step % config.checkpoint_every == 0:
                model.save(f"{out_dir}/checkpoint_{state.step:06d}.fdck")
        if out_dir is not None:
            model.save(f"{out_dir}/checkpoint_final.fdck")
    finally:
        if log_fh:
            log_fh.close()
    return state, metrics


def fit_paired(
    frames: np.ndarray,
    model_config: ModelConfig,
    config: TrainConfig,
    out_dirs: dict[MaskVariant, str] | None = None,
    log_paths: dict[MaskVariant, str] | None = None,
) -> dict[MaskVariant, tuple[TrainState, list[dict]]]:
    """Train both attention variants from identical init and data order.

    Everything except the mask variant is shared: same seed, so the two
    runs start from equal parameter digests (shapes do not depend on the
    variant) and consume identical batch sequences, which the per-step
    batch digests in the metrics record.
    """
    runs = {}
    for variant in (MaskVariant.OF, MaskVariant.OF2):
        paired = dataclasses.replace(config, variant=variant)
        runs[variant] = fit(
            frames, model_config, paired,
            out_dir=(out_dirs or {}).get(variant),
            log_path=(log_paths or {}).get(variant),
        )
    return runs
