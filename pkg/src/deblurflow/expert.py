"""Fidelity experts, co-training pair draws, and the Euler sampler.

An expert turns a blurred image into a high-fidelity starting estimate.
Three kinds exist at this scale: identity (no help), classical Wiener
deconvolution with a known kernel, and a small trained restorer. The
sampler walks the deblurring flow from the expert estimate, decoding a
residual field each step and stepping against it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .degrade import BlurKernel, ImagePair
from .errors import InvalidArgumentError, NotFoundError, NumericFailureError
from .flowcore import PathKind

EXPERT_KINDS = ("identity", "wiener", "toy-restorer")


@dataclass(frozen=True)
class FidelityExpert:
    kind: str
    params: object
    expert_id: str

    def __post_init__(self):
        if self.kind not in EXPERT_KINDS:
            raise InvalidArgumentError(f"unknown expert kind {self.kind!r}")


class ToyRestorer(nn.Module):
    """Small conv stack predicting the blur residual from the blurred image.

    The restored image is the input minus the predicted residual. The
    final layer starts at zero, so an untrained restorer passes its
    input through unchanged.
    """

    def __init__(self, channels: int = 3, width: int = 32, depth: int = 3, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        layers = [nn.Conv2d(channels, width, 3, padding=1), nn.ReLU()]
        for _ in range(depth - 1):
            layers += [nn.Conv2d(width, width, 3, padding=1), nn.ReLU()]
        head = nn.Conv2d(width, channels, 3, padding=1)
        nn.init.zeros_(head.weight)
        nn.init.zeros_(head.bias)
        layers.append(head)
        self.body = nn.Sequential(*layers)

    def forward(self, y):
        return self.body(y)

    def restore(self, y):
        with torch.no_grad():
            return torch.clamp(y - self.body(y), 0.0, 1.0)


_REGISTRY: dict = {}


def register_expert(expert: FidelityExpert) -> FidelityExpert:
    _REGISTRY[expert.expert_id] = expert
    return expert


def get_expert(expert_id: str) -> FidelityExpert:
    if expert_id not in _REGISTRY:
        raise NotFoundError(f"no expert registered under id {expert_id!r}")
    return _REGISTRY[expert_id]


def registered_experts() -> list:
    return sorted(_REGISTRY)


register_expert(FidelityExpert("identity", None, "identity"))


def make_wiener_expert(kernel: BlurKernel, expert_id: str = "wiener",
                       balance: float = 1e-2) -> FidelityExpert:
    return register_expert(FidelityExpert("wiener", (kernel, balance), expert_id))


def make_restorer_expert(module: ToyRestorer, expert_id: str = "toy-restorer") -> FidelityExpert:
    return register_expert(FidelityExpert("toy-restorer", module, expert_id))


def _wiener_channel(chan: np.ndarray, kernel: BlurKernel, balance: float) -> np.ndarray:
    pad = 2 * kernel.size
    yp = np.pad(chan, pad, mode="reflect")
    k = np.zeros_like(yp)
    ks = kernel.size
    # the blur correlates, so the convolution being inverted uses the
    # flipped weights
    k[:ks, :ks] = kernel.weights[::-1, ::-1]
    k = np.roll(k, (-(ks // 2), -(ks // 2)), axis=(0, 1))
    kf = np.fft.fft2(k)
    yf = np.fft.fft2(yp)
    xf = np.conj(kf) * yf / (np.abs(kf) ** 2 + balance)
    xp = np.real(np.fft.ifft2(xf))
    return xp[pad:-pad, pad:-pad]


def expert_restore(expert: FidelityExpert, y: torch.Tensor) -> torch.Tensor:
    """Run one expert on a CHW image tensor, same shape out."""
    if expert.kind == "identity":
        return y
    if expert.kind == "toy-restorer":
        return expert.params.restore(y)
    kernel, balance = expert.params
    chans = [
        _wiener_channel(y[c].detach().cpu().numpy().astype(np.float64), kernel, balance)
        for c in range(y.shape[0])
    ]
    out = np.clip(np.stack(chans), 0.0, 1.0)
    return torch.as_tensor(out, dtype=y.dtype)


@dataclass(frozen=True)
class CoTrainConfig:
    """Mixing rule for training pairs: rho is the share of raw blur starts."""

    rho: float = 0.7
    expert: str = "toy-restorer"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidArgumentError(f"rho must lie in [0,1], got {self.rho}")


def draw_training_pair(cotrain: CoTrainConfig, pair: ImagePair, seed: int):
    """With probability rho return (blur, sharp); otherwise run the expert.

    The first element is the path's t=1 start endpoint; the residual a
    model must learn follows from it.
    """
    rng = np.random.default_rng(seed)
    if rng.uniform() < cotrain.rho:
        return pair.blur, pair.sharp
    expert = get_expert(cotrain.expert)
    return expert_restore(expert, pair.blur), pair.sharp


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 5
    schedule: str = "uniform"
    start_t: float = 1.0
    expert: Optional[str] = None

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgumentError(f"steps must be >= 1, got {self.steps}")
        if self.schedule != "uniform":
            raise InvalidArgumentError(f"unknown step schedule {self.schedule!r}")
        if not 0.0 < self.start_t <= 1.0:
            raise InvalidArgumentError(f"start_t must lie in (0,1], got {self.start_t}")


def time_grid(config: SamplerConfig) -> list:
    """Descending uniform grid from start_t to 0, steps+1 points."""
    n = config.steps
    return [config.start_t * (n - i) / n for i in range(n + 1)]


def sample(net, codec, config: SamplerConfig, y, field=None):
    """Walk the deblurring flow from the expert estimate of y.

    Each step re-encodes the current state, decodes the predicted latent
    field to an image-space residual, and steps against it; `field`
    swaps in an arbitrary (state, t) -> residual map for oracles and
    diagnostics. Returns the final state clipped to [0,1] plus every
    intermediate state (steps+1 entries). Raises on the first non-finite
    state, reporting the step index.
    """
    numpy_in = not torch.is_tensor(y)
    if numpy_in:
        arr = np.asarray(y)
        if arr.ndim == 2:
            arr = arr[..., None]
        y = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    if not torch.isfinite(y).all():
        raise InvalidArgumentError("non-finite values in sampler input")

    x_star = expert_restore(get_expert(config.expert), y) if config.expert else y
    grid = time_grid(config)
    dt = config.start_t / config.steps
    trajectory = [x_star]
    with torch.no_grad():
        for i in range(config.steps):
            t = grid[i]
            if field is not None:
                r_hat = field(x_star, t)
            else:
                ls = codec.encode(x_star)
                r_hat = codec.decode(net(ls.z_r, t), ls.skips, ls.source_shape)
            x_star = x_star - r_hat * dt
            if not torch.isfinite(x_star).all():
                raise NumericFailureError(f"non-finite state after step {i}", step=i)
            trajectory.append(x_star)
    x_out = torch.clamp(x_star, 0.0, 1.0)
    if numpy_in:
        x_out = x_out.numpy().transpose(1, 2, 0)
        trajectory = [s.numpy().transpose(1, 2, 0) for s in trajectory]
    return x_out, trajectory


def restore_for_path(net, codec, kind: PathKind, y: torch.Tensor, steps: int,
                     expert_id: Optional[str] = None, noise_seed: int = 0) -> torch.Tensor:
    """Restore one image with the sampling rule matching the trained path.

    Image-endpoint paths (blur-to-clean, noise-to-clean) walk the Euler
    sampler from the expert estimate of y. The residual path instead
    integrates a residual out of seeded noise and subtracts it from y;
    the expert plays no role there.
    """
    if kind == PathKind.NOISE_TO_RESIDUAL:
        noise = np.random.default_rng(noise_seed).standard_normal(tuple(y.shape))
        state = torch.as_tensor(noise, dtype=y.dtype)
        _, trajectory = sample(net, codec, SamplerConfig(steps=steps), state)
        return torch.clamp(y - trajectory[-1], 0.0, 1.0)
    cfg = SamplerConfig(steps=steps, expert=expert_id)
    x_out, _ = sample(net, codec, cfg, y)
    return x_out
