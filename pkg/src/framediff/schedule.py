"""Noise schedule and the rotation view of the forward diffusion process.

Continuous time t in [0,1] maps to an angle theta = t*pi/2, so the
variance-preserving mix cos(theta)*x0 + sin(theta)*eps is an orthogonal
rotation of the stacked (x0, eps) pair. The second row of that rotation,
-sin(theta)*x0 + cos(theta)*eps, is the companion signal the model can be
trained to predict; the clean sample and noise are recovered exactly by
the inverse rotation.

This module implements only that variance-preserving instance. In the
general stochastic view a forward process dx = mu(x,t) dt + sigma(t) dw
has a probability-flow ODE sharing its marginals; the deterministic
`denoise_step` below is the discrete probability-flow update in angle
coordinates (recover the pair, re-mix at the earlier time). No stochastic
sampler is provided: generation stays bit-reproducible.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, SingularityError

# Below this cosine the epsilon <-> companion conversion divides by ~0.
COS_SINGULARITY = 1e-6


class Parameterization(enum.Enum):
    """What the model's output head predicts for each noisy token."""

    EPSILON = "eps"
    COMPANION = "companion"


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine-style schedule expressed through the rotation angle.

    theta(t) = t*pi/2 is monotone on [0,1] with theta(0)=0 (no noise) and
    theta(1)=pi/2 (pure noise); the signal level is cos(theta)^2.
    """

    kind: str = "cosine-rotation"
    t_min: float = 0.001
    t_max: float = 1.0

    def theta(self, t: float) -> float:
        return theta_of(t)

    def alpha_bar(self, t: float) -> float:
        c = math.cos(theta_of(t))
        return c * c

    def cos_sin(self, t: float) -> tuple[float, float]:
        th = theta_of(t)
        return math.cos(th), math.sin(th)


def theta_of(t: float) -> float:
    """Rotation angle for time t in [0,1]."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"time {t} outside [0, 1]")
    return t * math.pi / 2.0


@dataclass(frozen=True)
class DiffusionPair:
    """A clean sample and the Gaussian noise used to corrupt it."""

    x0: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        if np.shape(self.x0) != np.shape(self.eps):
            raise ShapeError(
                f"pair shapes differ: {np.shape(self.x0)} vs {np.shape(self.eps)}"
            )


def forward_diffuse(pair: DiffusionPair, t: float) -> np.ndarray:
    """The noisy sample cos(theta)*x0 + sin(theta)*eps."""
    th = theta_of(t)
    return math.cos(th) * pair.x0 + math.sin(th) * pair.eps


def companion_of(pair: DiffusionPair, t: float) -> np.ndarray:
    """The orthogonal complement -sin(theta)*x0 + cos(theta)*eps."""
    th = theta_of(t)
    return -math.sin(th) * pair.x0 + math.cos(th) * pair.eps


def recover(x_t: np.ndarray, companion: np.ndarray, t: float) -> DiffusionPair:
    """Invert the rotation: exact (x0, eps) from the sample and companion."""
    if np.shape(x_t) != np.shape(companion):
        raise ShapeError(f"shapes differ: {np.shape(x_t)} vs {np.shape(companion)}")
    th = theta_of(t)
    c, s = math.cos(th), math.sin(th)
    return DiffusionPair(x0=c * x_t - s * companion, eps=s * x_t + c * companion)


def convert_prediction(
    pred: np.ndarray,
    src: Parameterization,
    dst: Parameterization,
    x_t: np.ndarray,
    t: float,
) -> np.ndarray:
    """Translate a prediction between the epsilon and companion heads."""
    if src == dst:
        return pred
    if np.shape(pred) != np.shape(x_t):
        raise ShapeError(f"shapes differ: {np.shape(pred)} vs {np.shape(x_t)}")
    th = theta_of(t)
    c, s = math.cos(th), math.sin(th)
    if src == Parameterization.EPSILON:
        if c <= COS_SINGULARITY:
            raise SingularityError(
                f"epsilon->companion undefined at t={t}: cos(theta)={c:.2e}"
            )
        return (pred - s * x_t) / c
    return s * x_t + c * pred


def denoise_step(
    x_t: np.ndarray,
    pred: np.ndarray,
    param: Parameterization,
    t: float,
    s: float,
) -> np.ndarray:
    """Deterministic update from time t to an earlier time s.

    Recovers (x0_hat, eps_hat) from the prediction, then re-mixes them at
    time s. With a perfect prediction this lands exactly on the forward
    trajectory of the same (x0, eps) pair.
    """
    if not 0.0 <= s < t <= 1.0:
        raise DomainError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    companion = convert_prediction(pred, param, Parameterization.COMPANION, x_t, t)
    pair = recover(x_t, companion, t)
    ths = theta_of(s)
    return math.cos(ths) * pair.x0 + math.sin(ths) * pair.eps


def time_grid(steps: int, start: float = 1.0) -> np.ndarray:
    """Uniform denoising grid from `start` down to 0 with `steps` intervals."""
    if steps < 1:
        raise DomainError(f"need at least one step, got {steps}")
    return start * (1.0 - np.arange(steps + 1) / steps)
