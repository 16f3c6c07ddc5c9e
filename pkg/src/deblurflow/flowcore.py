"""Linear interpolation paths and their matching losses.

Three path kinds share one sampler: noise to clean (the generative
prior), blur to clean (the deblurring path, whose velocity is the
constant residual), and noise to residual. Works on numpy arrays and
torch tensors alike; whatever array type the pair carries flows through.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .degrade import ImagePair
from .errors import InvalidArgumentError

TIME_SCHEDULES = ("uniform01", "logit-normal")


class PathKind(Enum):
    GEN_NOISE_TO_CLEAN = "gen"
    DEBLUR_BLUR_TO_CLEAN = "deblur"
    NOISE_TO_RESIDUAL = "noise-to-residual"


@dataclass(frozen=True)
class PathSample:
    """One point on an interpolation path plus its regression target.

    `endpoint` is the t=1 end of the path (noise or the blurred image);
    the t=0 end is always the clean-side quantity.
    """

    x_t: object
    t: float
    target_v: object
    kind: PathKind
    endpoint: object


def _normal_like(ref, seed: int):
    noise = np.random.default_rng(seed).standard_normal(tuple(ref.shape))
    if torch.is_tensor(ref):
        return torch.as_tensor(noise, dtype=ref.dtype)
    return noise.astype(ref.dtype, copy=False)


def sample_path(pair: ImagePair, kind: PathKind, t: float, noise_seed: int = 0) -> PathSample:
    """Evaluate the chosen path at time t for one pair.

    Noise endpoints are standard-normal, deterministic per seed. The
    blur-to-clean path needs no noise and its target is t-independent.
    """
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"t must lie in [0,1], got {t}")
    x, y = pair.sharp, pair.blur
    if kind == PathKind.DEBLUR_BLUR_TO_CLEAN:
        x_t = (1.0 - t) * x + t * y
        return PathSample(x_t, t, pair.residual, kind, y)
    eps = _normal_like(x, noise_seed)
    if kind == PathKind.GEN_NOISE_TO_CLEAN:
        start = x
    elif kind == PathKind.NOISE_TO_RESIDUAL:
        start = pair.residual
    else:
        raise InvalidArgumentError(f"unknown path kind {kind!r}")
    x_t = (1.0 - t) * start + t * eps
    return PathSample(x_t, t, eps - start, kind, eps)


def _check_shapes(pred, target):
    if tuple(pred.shape) != tuple(target.shape):
        raise InvalidArgumentError(
            f"shape mismatch: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )


def flow_matching_loss(pred_v, sample: PathSample):
    """Mean squared error between a predicted field and the path target."""
    _check_shapes(pred_v, sample.target_v)
    return ((pred_v - sample.target_v) ** 2).mean()


def residual_loss(pred_r, pair: ImagePair):
    """Mean squared error against the blur-minus-sharp residual.

    On the blur-to-clean path this coincides bit for bit with
    flow_matching_loss: the target fields are the same array expression.
    """
    _check_shapes(pred_r, pair.residual)
    return ((pred_r - pair.residual) ** 2).mean()


def draw_time(schedule: str, seed: int) -> float:
    """Draw one training time in [0,1] from the named schedule."""
    if schedule not in TIME_SCHEDULES:
        raise InvalidArgumentError(f"schedule must be one of {TIME_SCHEDULES}")
    rng = np.random.default_rng(seed)
    if schedule == "uniform01":
        return float(rng.uniform(0.0, 1.0))
    return float(1.0 / (1.0 + np.exp(-rng.normal(0.0, 1.0))))
