"""Restoration-oriented latent codec and the MAC cost meter.

The learned codec downsamples images by 2^stages into the latent grid
the vector-field network runs on, and decodes predicted latent fields
back to image-space residuals, merging encoder skip features by
concatenation. Its decoder output head starts at zero so an untrained
codec decodes every field to the zero residual.

A parameter-free fixed codec (space-to-depth and back) provides the
same interface losslessly; the base prior is trained through it, and it
doubles as the no-latent-space ablation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .degrade import ImagePair
from .errors import InvalidArgumentError, UnsupportedLayerError
from .flowcore import PathKind, residual_loss, sample_path


def to_chw(image) -> torch.Tensor:
    """HWC (or HW) array in, float32 CHW tensor out."""
    if torch.is_tensor(image):
        return image.to(torch.float32)
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def to_hwc(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().transpose(1, 2, 0)


def pair_to_tensors(pair: ImagePair) -> ImagePair:
    """Re-wrap a pair with float32 CHW tensors for the torch side."""
    return ImagePair(to_chw(pair.sharp), to_chw(pair.blur), pair.pair_id)


@dataclass(frozen=True)
class CodecConfig:
    stages: int = 3
    base_channels: int = 16
    latent_channels: int = 192
    image_channels: int = 3
    blocks_per_stage: int = 1
    skip_enabled: bool = True
    seed: int = 0


@dataclass(frozen=True)
class LatentSample:
    z_r: torch.Tensor
    skips: list
    source_shape: tuple  # (H, W, C) before padding


def _conv_block(channels: int, repeats: int) -> nn.Sequential:
    layers = []
    for _ in range(repeats):
        layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU()]
    return nn.Sequential(*layers)


class RSpaceCodec(nn.Module):
    """Encoder/decoder pair around the latent grid.

    Channel width doubles per stage from base_channels; a 1x1 projection
    maps the trunk to latent_channels and back.
    """

    def __init__(self, config: CodecConfig):
        super().__init__()
        torch.manual_seed(config.seed)
        self.config = config
        c = config.base_channels
        self.stem = nn.Conv2d(config.image_channels, c, 3, padding=1)
        enc_blocks, downs = [], []
        for s in range(config.stages):
            enc_blocks.append(_conv_block(c * 2**s, config.blocks_per_stage))
            downs.append(nn.Conv2d(c * 2**s, c * 2 ** (s + 1), 3, stride=2, padding=1))
        self.enc_blocks = nn.ModuleList(enc_blocks)
        self.downs = nn.ModuleList(downs)
        trunk = c * 2**config.stages
        self.to_latent = nn.Conv2d(trunk, config.latent_channels, 1)

        self.from_latent = nn.Conv2d(config.latent_channels, trunk, 1)
        ups, merges, dec_blocks = [], [], []
        for s in reversed(range(config.stages)):
            lo, hi = c * 2**s, c * 2 ** (s + 1)
            ups.append(nn.Conv2d(hi, lo, 3, padding=1))
            merge_in = lo * 2 if config.skip_enabled else lo
            merges.append(nn.Conv2d(merge_in, lo, 3, padding=1))
            dec_blocks.append(_conv_block(lo, config.blocks_per_stage))
        self.ups = nn.ModuleList(ups)
        self.merges = nn.ModuleList(merges)
        self.dec_blocks = nn.ModuleList(dec_blocks)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.head = nn.Conv2d(c, config.image_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def factor(self) -> int:
        return 2**self.config.stages

    def _pad(self, x: torch.Tensor) -> torch.Tensor:
        f = self.factor
        ph = (-x.shape[-2]) % f
        pw = (-x.shape[-1]) % f
        if ph or pw:
            x = F.pad(x.unsqueeze(0), (0, pw, 0, ph), mode="reflect").squeeze(0)
        return x

    def encode(self, x: torch.Tensor) -> LatentSample:
        if not torch.isfinite(x).all():
            raise InvalidArgumentError("non-finite values in encoder input")
        if x.shape[0] != self.config.image_channels:
            raise InvalidArgumentError(
                f"expected {self.config.image_channels} channels, got {x.shape[0]}"
            )
        src = (x.shape[-2], x.shape[-1], x.shape[0])
        h = self._pad(x).unsqueeze(0)
        h = self.stem(h)
        skips = []
        for block, down in zip(self.enc_blocks, self.downs):
            h = block(h)
            if self.config.skip_enabled:
                skips.append(h.squeeze(0))
            h = down(h)
        z = self.to_latent(h).squeeze(0)
        return LatentSample(z, skips, src)

    def decode(self, v_latent: torch.Tensor, skips=None,
               source_shape: Optional[tuple] = None) -> torch.Tensor:
        skips = skips or []
        if self.config.skip_enabled and len(skips) != self.config.stages:
            raise InvalidArgumentError(
                f"expected {self.config.stages} skip features, got {len(skips)}"
            )
        h = self.from_latent(v_latent.unsqueeze(0))
        for i, (up, merge, block) in enumerate(zip(self.ups, self.merges, self.dec_blocks)):
            h = up(self.upsample(h))
            if self.config.skip_enabled:
                skip = skips[self.config.stages - 1 - i].unsqueeze(0)
                if skip.shape[-2:] != h.shape[-2:] or skip.shape[1] != h.shape[1]:
                    raise InvalidArgumentError(
                        f"skip shape {tuple(skip.shape[1:])} does not match "
                        f"decoder stage {tuple(h.shape[1:])}"
                    )
                h = torch.cat([h, skip], dim=1)
            h = block(merge(h))
        r = self.head(h).squeeze(0)
        if source_shape is not None:
            r = r[:, : source_shape[0], : source_shape[1]]
        return r

    def mac_forward(self, x: torch.Tensor):
        ls = self.encode(x)
        return self.decode(ls.z_r, ls.skips, ls.source_shape)


class FixedCodec(nn.Module):
    """Lossless space-to-depth stand-in with the codec interface.

    No parameters, no skips; decoding inverts encoding exactly. Running
    the field network through it is flow matching straight on pixels.
    """

    def __init__(self, stages: int = 3, image_channels: int = 3):
        super().__init__()
        self.config = CodecConfig(
            stages=stages,
            base_channels=0,
            latent_channels=image_channels * 4**stages,
            image_channels=image_channels,
            skip_enabled=False,
        )
        self.unshuffle = nn.PixelUnshuffle(2**stages)
        self.shuffle = nn.PixelShuffle(2**stages)

    @property
    def factor(self) -> int:
        return 2**self.config.stages

    def _pad(self, x: torch.Tensor) -> torch.Tensor:
        f = self.factor
        ph = (-x.shape[-2]) % f
        pw = (-x.shape[-1]) % f
        if ph or pw:
            x = F.pad(x.unsqueeze(0), (0, pw, 0, ph), mode="reflect").squeeze(0)
        return x

    def encode(self, x: torch.Tensor) -> LatentSample:
        if not torch.isfinite(x).all():
            raise InvalidArgumentError("non-finite values in encoder input")
        src = (x.shape[-2], x.shape[-1], x.shape[0])
        z = self.unshuffle(self._pad(x).unsqueeze(0)).squeeze(0)
        return LatentSample(z, [], src)

    def decode(self, v_latent: torch.Tensor, skips=None,
               source_shape: Optional[tuple] = None) -> torch.Tensor:
        r = self.shuffle(v_latent.unsqueeze(0)).squeeze(0)
        if source_shape is not None:
            r = r[:, : source_shape[0], : source_shape[1]]
        return r

    def mac_forward(self, x: torch.Tensor):
        ls = self.encode(x)
        return self.decode(ls.z_r, ls.skips, ls.source_shape)


def build_codec(config: CodecConfig) -> RSpaceCodec:
    return RSpaceCodec(config)


def make_vspace_codec(image_channels: int = 3) -> RSpaceCodec:
    """Heavier generic-autoencoder config, used only for cost comparison."""
    return RSpaceCodec(
        CodecConfig(base_channels=64, blocks_per_stage=2, image_channels=image_channels)
    )


def encode(codec, x) -> LatentSample:
    return codec.encode(x)


def decode(codec, v_latent, skips=None, source_shape=None) -> torch.Tensor:
    return codec.decode(v_latent, skips, source_shape)


def latent_residual_loss(codec, net, pair: ImagePair, t: float, cotrain_source=None):
    """Loss of the decoded field against the pair residual at time t.

    `cotrain_source` substitutes the path's t=1 endpoint (and therefore
    the target residual) with an expert estimate; None means the blurred
    image itself.
    """
    work = pair
    if cotrain_source is not None:
        work = ImagePair(pair.sharp, cotrain_source, pair.pair_id)
    s = sample_path(work, PathKind.DEBLUR_BLUR_TO_CLEAN, t)
    ls = codec.encode(s.x_t)
    v = net(ls.z_r, t)
    r_hat = codec.decode(v, ls.skips, ls.source_shape)
    return residual_loss(r_hat, work)


def codec_trainable_params(codec) -> list:
    return [p for p in codec.parameters() if p.requires_grad]


_ZERO_COST_LAYERS = (
    nn.ReLU,
    nn.GELU,
    nn.SiLU,
    nn.LayerNorm,
    nn.Dropout,
    nn.Upsample,
    nn.PixelShuffle,
    nn.PixelUnshuffle,
    nn.Identity,
    nn.Flatten,
    nn.Softmax,
    nn.Tanh,
    nn.Sigmoid,
)


def _conv_macs(mod: nn.Conv2d, out: torch.Tensor) -> int:
    per_position = (mod.in_channels // mod.groups) * mod.kernel_size[0] * mod.kernel_size[1]
    batch = out.shape[0] if out.ndim == 4 else 1
    positions = out.shape[-2] * out.shape[-1]
    return per_position * mod.out_channels * positions * batch


def _linear_macs(mod: nn.Linear, out: torch.Tensor) -> int:
    positions = out.numel() // mod.out_features
    return mod.in_features * mod.out_features * positions


def mac_cost(module: nn.Module, input_shape: tuple) -> int:
    """Exact multiply-accumulate count of one forward at the given shape.

    Counts convolutions, linear layers, low-rank adapter paths, and the
    attention score/value matmuls; normalization, activations, and
    resampling are free. Any other layer kind raises.
    """
    report = mac_report(module, input_shape)
    return sum(report.values())


def mac_report(module: nn.Module, input_shape: tuple) -> dict:
    from .model import LoraLinear, SelfAttention, VectorFieldNet

    containers = (nn.Sequential, nn.ModuleList, nn.ModuleDict)
    for name, mod in module.named_modules():
        if list(mod.children()) or isinstance(mod, containers + (LoraLinear, SelfAttention)):
            continue
        if not isinstance(mod, (nn.Conv2d, nn.Linear) + _ZERO_COST_LAYERS):
            raise UnsupportedLayerError(
                f"cannot cost layer {name or '<root>'} of kind {type(mod).__name__}"
            )

    counts: dict = {}
    handles = []

    def track(name):
        def hook(mod, args, out):
            if isinstance(mod, nn.Conv2d):
                macs = _conv_macs(mod, out)
            elif isinstance(mod, nn.Linear):
                macs = _linear_macs(mod, out)
            elif isinstance(mod, SelfAttention):
                b, n, c = args[0].shape
                macs = 2 * b * n * n * c  # scores and value mixing
            elif isinstance(mod, LoraLinear):
                positions = out.numel() // mod.base.out_features
                macs = positions * mod.rank * (mod.base.in_features + mod.base.out_features)
            else:
                return
            counts[name] = counts.get(name, 0) + macs

        return hook

    for name, mod in module.named_modules():
        if isinstance(mod, (nn.Conv2d, nn.Linear, SelfAttention, LoraLinear)):
            handles.append(mod.register_forward_hook(track(name or "<root>")))
    try:
        x = torch.zeros(*input_shape)
        with torch.no_grad():
            if isinstance(module, VectorFieldNet):
                module(x, 0.5)
            elif hasattr(module, "mac_forward"):
                module.mac_forward(x)
            else:
                module(x)
    finally:
        for h in handles:
            h.remove()
    return counts
